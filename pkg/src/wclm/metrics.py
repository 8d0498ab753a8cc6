"""Automated evaluation metrics over prediction/reference string pairs.

Surface level: edit-distance similarity, clipped n-gram precision, sentence
BLEU. Lexical-semantic: TF-IDF cosine over a corpus-fitted 1-2 gram space,
plus cosine aggregation over externally supplied sentence/token embeddings
(the neural encoders themselves are out of scope). Model-based: a judge
scored through a pluggable text backend against a fixed rubric, and a
file-backed stub with the same pair-scoring shape for learned evaluators.

N-gram style metrics tokenize by lowercasing, stripping punctuation, and
splitting on whitespace; pass ``tokenize=`` to substitute another rule.
"""

import logging
import re
from collections import Counter
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, JudgeParseError, MetricError, ProviderError

log = logging.getLogger(__name__)

_PUNCT = re.compile(r"[^0-9a-z\s]+")


def default_tokenize(text: str) -> list[str]:
    return _PUNCT.sub(" ", text.lower()).split()


Tokenizer = Callable[[str], list[str]]


# ---------------------------------------------------------------------------
# surface-level similarity
# ---------------------------------------------------------------------------


def edit_distance(a: str, b: str) -> int:
    """Character-level Levenshtein distance over Unicode scalar values."""
    return int(
        kernels.levenshtein(
            np.array([ord(c) for c in a], dtype=np.int64),
            np.array([ord(c) for c in b], dtype=np.int64),
        )
    )


def edit_distance_similarity(prediction: str, reference: str) -> float:
    """1 - ED / max(|prediction|, |reference|); two empty strings score 1.0."""
    longest = max(len(prediction), len(reference))
    if longest == 0:
        return 1.0
    return 1.0 - edit_distance(prediction, reference) / longest


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def ngram_precision(
    prediction: str,
    reference: str,
    n: int,
    tokenize: Tokenizer = default_tokenize,
) -> float | None:
    """Clipped n-gram precision; None (absent) when the prediction is too short."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    pred_tokens = tokenize(prediction)
    if len(pred_tokens) < n:
        return None
    pred_counts = _ngram_counts(pred_tokens, n)
    ref_counts = _ngram_counts(tokenize(reference), n)
    total = sum(pred_counts.values())
    clipped = sum(min(count, ref_counts[gram]) for gram, count in pred_counts.items())
    return clipped / total


_BLEU_FLOOR = 1e-9


def sentence_bleu(
    prediction: str,
    reference: str,
    max_n: int = 4,
    tokenize: Tokenizer = default_tokenize,
) -> float:
    """Geometric mean of clipped 1..max_n-gram precisions with a brevity penalty.

    Zero or undefined precisions are floored at 1e-9 before the log so short
    strings stay finite. BP is 1 when the prediction is longer than the
    reference, else exp(1 - |reference| / |prediction|), lengths in tokens.
    """
    pred_tokens = tokenize(prediction)
    ref_tokens = tokenize(reference)
    if not pred_tokens or not ref_tokens:
        raise MetricError("sentence_bleu requires non-empty prediction and reference")
    log_sum = 0.0
    for n in range(1, max_n + 1):
        precision = ngram_precision(prediction, reference, n, tokenize)
        if precision is None or precision == 0.0:
            precision = _BLEU_FLOOR
        log_sum += np.log(precision) / max_n
    if len(pred_tokens) > len(ref_tokens):
        brevity = 1.0
    else:
        brevity = float(np.exp(1.0 - len(ref_tokens) / len(pred_tokens)))
    return brevity * float(np.exp(log_sum))


# ---------------------------------------------------------------------------
# TF-IDF cosine
# ---------------------------------------------------------------------------


@dataclass
class TfidfSpace:
    """1- and 2-gram vocabulary with smoothed idf weights, fitted on a corpus."""

    vocabulary: dict[tuple[str, ...], int]
    idf: np.ndarray
    n_docs: int
    tokenize: Tokenizer = default_tokenize

    def vector(self, text: str) -> np.ndarray:
        vec = np.zeros(len(self.vocabulary))
        tokens = self.tokenize(text)
        for n in (1, 2):
            for gram, count in _ngram_counts(tokens, n).items():
                column = self.vocabulary.get(gram)
                if column is not None:
                    vec[column] = count * self.idf[column]
        return vec


def tfidf_fit(corpus: Sequence[str], tokenize: Tokenizer = default_tokenize) -> TfidfSpace:
    """Fit idf weights over the combined references + predictions corpus.

    tf is the raw in-document count; idf = ln((1 + N) / (1 + df)) + 1.
    """
    if len(corpus) == 0:
        raise MetricError("cannot fit a TF-IDF space on an empty corpus")
    doc_freq: Counter = Counter()
    for doc in corpus:
        tokens = tokenize(doc)
        grams = set(_ngram_counts(tokens, 1)) | set(_ngram_counts(tokens, 2))
        doc_freq.update(grams)
    vocabulary = {gram: i for i, gram in enumerate(sorted(doc_freq))}
    n_docs = len(corpus)
    idf = np.empty(len(vocabulary))
    for gram, column in vocabulary.items():
        idf[column] = np.log((1.0 + n_docs) / (1.0 + doc_freq[gram])) + 1.0
    return TfidfSpace(vocabulary=vocabulary, idf=idf, n_docs=n_docs, tokenize=tokenize)


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))


def tfidf_cosine(space: TfidfSpace, prediction: str, reference: str) -> float:
    """Cosine of the TF-IDF vectors; zero-vector pairs score 0.0 by convention."""
    return _cosine(space.vector(prediction), space.vector(reference))


# ---------------------------------------------------------------------------
# embedding-based aggregation (vectors supplied externally)
# ---------------------------------------------------------------------------


class EmbeddingProvider:
    """String -> fixed-dimension vector lookup loaded from a text file.

    File format: header line ``dim <d>`` then one entry per line,
    ``<key>\\t<d space-separated floats>``. Sentence keys are exact strings;
    token vectors use ``token:<t>`` keys.
    """

    def __init__(self, dim: int, table: dict[str, np.ndarray]):
        self.dim = dim
        self._table = {}
        for key, vec in table.items():
            arr = np.asarray(vec, dtype=np.float64).reshape(-1)
            if arr.size != dim:
                raise ConfigError(f"embedding for {key!r} has dim {arr.size}, expected {dim}")
            if np.linalg.norm(arr) == 0.0:
                raise ConfigError(f"embedding for {key!r} has zero norm")
            self._table[key] = arr

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingProvider":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("dim "):
            raise ConfigError(f"{path}: missing 'dim <d>' header")
        dim = int(lines[0].split()[1])
        table = {}
        for line in lines[1:]:
            if not line.strip():
                continue
            key, _, rest = line.partition("\t")
            table[key] = np.array([float(x) for x in rest.split()])
        return cls(dim, table)

    def sentence_vector(self, text: str) -> np.ndarray:
        if text not in self._table:
            raise ProviderError(f"no embedding for sentence {text!r}")
        return self._table[text]

    def token_vector(self, token: str) -> np.ndarray:
        key = f"token:{token}"
        if key not in self._table:
            raise ProviderError(f"no embedding for token {token!r}")
        return self._table[key]


def embedding_cosine(provider: EmbeddingProvider, prediction: str, reference: str) -> float:
    """Cosine of externally supplied sentence vectors, in [-1, 1]."""
    return _cosine(provider.sentence_vector(prediction), provider.sentence_vector(reference))


@dataclass
class BertScore:
    precision: float
    recall: float
    f1: float


def bertscore(
    provider: EmbeddingProvider,
    prediction_tokens: Sequence[str],
    reference_tokens: Sequence[str],
) -> BertScore:
    """Greedy max-cosine matching over token vectors, aggregated as P/R/F1."""
    if not prediction_tokens or not reference_tokens:
        raise MetricError("bertscore requires non-empty token lists")
    pred = np.stack([provider.token_vector(t) for t in prediction_tokens])
    ref = np.stack([provider.token_vector(t) for t in reference_tokens])
    pred = pred / np.linalg.norm(pred, axis=1, keepdims=True)
    ref = ref / np.linalg.norm(ref, axis=1, keepdims=True)
    sim = pred @ ref.T
    precision = float(sim.max(axis=1).mean())
    recall = float(sim.max(axis=0).mean())
    f1 = 0.0 if precision + recall == 0.0 else 2 * precision * recall / (precision + recall)
    return BertScore(precision=precision, recall=recall, f1=f1)


def bertscore_f1(
    provider: EmbeddingProvider,
    prediction_tokens: Sequence[str],
    reference_tokens: Sequence[str],
) -> float:
    return bertscore(provider, prediction_tokens, reference_tokens).f1


class PairScoreTable:
    """File-backed pair scorer: the interface seat for learned evaluators.

    Lines are ``<prediction>\\t<reference>\\t<score>``. Scoring a pair absent
    from the table raises, mirroring an unavailable model checkpoint.
    """

    def __init__(self, table: dict[tuple[str, str], float]):
        self._table = dict(table)

    @classmethod
    def load(cls, path: str | Path) -> "PairScoreTable":
        table = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ConfigError(f"{path}:{lineno}: expected prediction<TAB>reference<TAB>score")
            table[(parts[0], parts[1])] = float(parts[2])
        return cls(table)

    def score(self, prediction: str, reference: str) -> float:
        key = (prediction, reference)
        if key not in self._table:
            raise ProviderError(f"no stored score for pair {key!r}")
        return self._table[key]


# ---------------------------------------------------------------------------
# judge scoring (rubric levels ship as data)
# ---------------------------------------------------------------------------

JUDGE_RUBRIC: tuple[tuple[float, str, str], ...] = (
    (
        1.0,
        "Perfect Match",
        "The predicted actions fully and precisely cover the ground-truth actions. "
        "No missing or incorrect actions.",
    ),
    (
        0.8,
        "Strong Match",
        "The predicted actions mostly cover the ground truth, with only minor "
        "omissions or paraphrasing and no major errors.",
    ),
    (
        0.6,
        "Partial Match",
        "The prediction covers some key actions but misses important parts. "
        "Still related and somewhat helpful.",
    ),
    (
        0.4,
        "Weak Match",
        "Very limited overlap. Only a few actions (or fragments) are relevant "
        "to the ground truth.",
    ),
    (
        0.2,
        "Minimal Match",
        "Prediction is largely irrelevant or incorrect, with almost no valid "
        "overlap with the ground truth.",
    ),
    (
        0.0,
        "No Match",
        "Completely unrelated or invalid prediction, with no correspondence to "
        "the ground truth.",
    ),
)

RUBRIC_LEVELS = tuple(level for level, _, _ in JUDGE_RUBRIC)

_JUDGE_TEMPLATE = """You are scoring a predicted corrective action against a reference.

Scoring guideline:
{rubric}

Reference: {reference}
Prediction: {prediction}

Reply with a single line of the form
Score: <value>
where <value> is one of {levels}.
"""


def render_judge_prompt(prediction: str, reference: str) -> str:
    """Deterministic prompt embedding the rubric and the pair under review."""
    rubric = "\n".join(
        f"{level:.1f} ({label}): {description}" for level, label, description in JUDGE_RUBRIC
    )
    return _JUDGE_TEMPLATE.format(
        rubric=rubric,
        reference=reference,
        prediction=prediction,
        levels=", ".join(f"{level:.1f}" for level in RUBRIC_LEVELS),
    )


_SCORE_RE = re.compile(r"Score:\s*([01](?:\.\d+)?)")


def parse_judge_response(response: str) -> float:
    match = _SCORE_RE.search(response)
    if not match:
        raise JudgeParseError("no 'Score: <value>' line in judge response", response)
    value = float(match.group(1))
    if not any(abs(value - level) < 1e-9 for level in RUBRIC_LEVELS):
        raise JudgeParseError(f"score {value} is not a rubric level", response)
    return value


def judge_score(backend, prediction: str, reference: str, max_retries: int = 2) -> float:
    """Render the prompt, call the backend, and parse the rubric score.

    ``backend`` exposes ``complete(prompt: str) -> str``. Unparsable responses
    are retried up to ``max_retries`` times and logged; the last failure is
    re-raised. Transport failures surface as ProviderError.
    """
    prompt = render_judge_prompt(prediction, reference)
    last: JudgeParseError | None = None
    for attempt in range(1 + max_retries):
        try:
            response = backend.complete(prompt)
        except Exception as exc:  # backend transport failure
            raise ProviderError(f"judge backend failed: {exc}") from exc
        try:
            return parse_judge_response(response)
        except JudgeParseError as exc:
            last = exc
            log.warning("judge parse failure on attempt %d: %s", attempt + 1, exc)
    assert last is not None
    raise last


_PRED_RE = re.compile(r"^Prediction: (.*)$", re.MULTILINE)
_REF_RE = re.compile(r"^Reference: (.*)$", re.MULTILINE)


class LocalJudgeMock:
    """Offline rubric-faithful judge: deterministic, no external service.

    Equal strings earn a Perfect Match; otherwise the token-overlap F1 of the
    pair is snapped down to the nearest rubric level. Responses follow the
    ``Score: <value>`` contract so the full parse path is exercised.
    """

    def complete(self, prompt: str) -> str:
        pred_match = _PRED_RE.search(prompt)
        ref_match = _REF_RE.search(prompt)
        if not pred_match or not ref_match:
            return "I could not locate the pair."
        prediction, reference = pred_match.group(1), ref_match.group(1)
        if prediction == reference:
            return "Score: 1.0"
        pred_tokens, ref_tokens = default_tokenize(prediction), default_tokenize(reference)
        if not pred_tokens or not ref_tokens:
            return "Score: 0.0"
        overlap = sum((Counter(pred_tokens) & Counter(ref_tokens)).values())
        f1 = 2 * overlap / (len(pred_tokens) + len(ref_tokens))
        snapped = max(level for level in RUBRIC_LEVELS if level <= f1 + 1e-12)
        return f"Score: {snapped:.1f}"


# ---------------------------------------------------------------------------
# batch scoring
# ---------------------------------------------------------------------------

METRIC_COLUMNS = (
    "edit_distance_similarity",
    "unigram_precision",
    "bigram_precision",
    "sentence_bleu",
    "tfidf_cosine",
    "bert_cosine",
    "bertscore_f1",
    "bleurt",
    "judge",
)


@dataclass
class ScoredPair:
    prediction: str
    reference: str
    scores: dict[str, float] = field(default_factory=dict)


def score_pair(
    prediction: str,
    reference: str,
    space: TfidfSpace | None = None,
    provider: EmbeddingProvider | None = None,
    bleurt: PairScoreTable | None = None,
    judge=None,
) -> ScoredPair:
    """Compute every available metric for one pair; absent metrics are omitted."""
    scores: dict[str, float] = {
        "edit_distance_similarity": edit_distance_similarity(prediction, reference)
    }
    for name, n in (("unigram_precision", 1), ("bigram_precision", 2)):
        value = ngram_precision(prediction, reference, n)
        if value is not None:
            scores[name] = value
    try:
        scores["sentence_bleu"] = sentence_bleu(prediction, reference)
    except MetricError:
        pass
    if space is not None:
        scores["tfidf_cosine"] = tfidf_cosine(space, prediction, reference)
    if provider is not None:
        try:
            scores["bert_cosine"] = embedding_cosine(provider, prediction, reference)
        except ProviderError:
            pass
        try:
            scores["bertscore_f1"] = bertscore_f1(
                provider, default_tokenize(prediction), default_tokenize(reference)
            )
        except (ProviderError, MetricError):
            pass
    if bleurt is not None:
        try:
            scores["bleurt"] = bleurt.score(prediction, reference)
        except ProviderError:
            pass
    if judge is not None:
        scores["judge"] = judge_score(judge, prediction, reference)
    return ScoredPair(prediction=prediction, reference=reference, scores=scores)
