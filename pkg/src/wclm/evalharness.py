"""Rank-correlation analysis, schema parsing, governance rates, and
threshold calibration for generated corrective actions.

Correlations return None (an undefined-correlation signal) instead of raising
when an input vector is constant. Governance distinguishes strict schema
conformance (Format) from parsable-with-actionable-content (Validity) and
reports accuracy over the valid and high-quality subsets.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CalibrationError, ConfigError, DataConsistencyError, ShapeError

log = logging.getLogger(__name__)


def _paired(a, b, minimum: int = 3) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a, dtype=np.float64).reshape(-1)
    y = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ShapeError(f"paired vectors differ in length: {x.size} vs {y.size}")
    if x.size < minimum:
        raise ShapeError(f"need at least {minimum} observations, got {x.size}")
    return x, y


def average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties replaced by the mean rank of the tied run."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(a: Sequence[float], b: Sequence[float]) -> float | None:
    """Pearson correlation of average-ranked data; None when undefined."""
    x, y = _paired(a, b)
    rx, ry = average_ranks(x), average_ranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        return None
    return float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))


def kendall_tau(a: Sequence[float], b: Sequence[float]) -> float | None:
    """Tie-corrected tau-b by pair enumeration; None when undefined."""
    x, y = _paired(a, b)
    concordant, discordant, ties_x, ties_y = kernels.kendall_counts(x, y)
    n0 = x.size * (x.size - 1) // 2
    denom = (n0 - ties_x) * (n0 - ties_y)
    if denom <= 0:
        return None
    return float((concordant - discordant) / np.sqrt(denom))


def chatterjee_xi(a: Sequence[float], b: Sequence[float]) -> float:
    """Chatterjee's rank dependence coefficient of b on a (asymmetric).

    Observations are sorted by a with ties left in stable input order (noted
    in the debug log). With b untied the estimator is
    1 - 3 sum|r_{i+1} - r_i| / (n^2 - 1); with ties in b the max-rank form
    1 - n sum|r_{i+1} - r_i| / (2 sum l_i (n - l_i)) applies, defined as 0
    when b is constant.
    """
    x, y = _paired(a, b)
    n = x.size
    if np.unique(x).size < n:
        log.debug("chatterjee_xi: ties in the conditioning vector; stable input order used")
    order = np.argsort(x, kind="stable")
    y_ordered = y[order]
    y_sorted = np.sort(y)
    # r_i: how many b values are <= b_(i); l_i: how many are >= b_(i)
    r = np.searchsorted(y_sorted, y_ordered, side="right")
    jumps = np.abs(np.diff(r)).sum()
    if np.unique(y).size == n:
        return float(1.0 - 3.0 * jumps / (n * n - 1.0))
    l = n - np.searchsorted(y_sorted, y_ordered, side="left")
    denom = 2.0 * (l * (n - l)).sum()
    if denom == 0.0:
        return 0.0
    return float(1.0 - n * jumps / denom)


# ---------------------------------------------------------------------------
# schema parsing and governance
# ---------------------------------------------------------------------------

_SCHEMA_RE = re.compile(r"^\s*corrective\s+actions?\s+included?\s*:\s*(.+?)\s*$", re.IGNORECASE)

DEFAULT_ACTION_VERBS = (
    "replace",
    "replaced",
    "repair",
    "repaired",
    "remove",
    "removed",
    "install",
    "installed",
    "reseal",
    "resealed",
    "patch",
    "patched",
    "adjust",
    "adjusted",
    "tighten",
    "tightened",
    "reprogram",
    "reprogrammed",
    "flush",
    "flushed",
)


def parse_corrective_action(text: str) -> str | None:
    """Extract the action from a strictly schema-conforming single line.

    Returns the action tail, or None for a schema violation (violations are
    results, not errors).
    """
    stripped = text.strip()
    if not stripped or "\n" in stripped:
        return None
    match = _SCHEMA_RE.match(stripped)
    return match.group(1) if match else None


_WORD_RE = re.compile(r"[0-9a-z&']+")


def lenient_action_extract(text: str, verbs: Sequence[str] = DEFAULT_ACTION_VERBS) -> str | None:
    """Find an imperative repair phrase (lexicon verb + object) in free text.

    The documented proxy for "actionable content": the first configured verb
    followed by at least one further word, taken through the end of its
    sentence.
    """
    verb_set = set(verbs)
    for sentence in re.split(r"[.\n]", text.lower()):
        words = _WORD_RE.findall(sentence)
        for i, word in enumerate(words):
            if word in verb_set and i + 1 < len(words):
                return " ".join(words[i:])
    return None


@dataclass
class EvalRecord:
    """One evaluation row: a model output with its reference and score."""

    id: str
    output: str
    reference: str = ""
    prompt: str = ""
    score_source: str = "human"  # "human" or "judge"; a field, never inferred
    score: float | None = None
    hq: bool = False
    truncated: bool = False

    @classmethod
    def from_json(cls, line: str) -> "EvalRecord":
        raw = json.loads(line)
        return cls(
            id=str(raw.get("id", "")),
            output=raw.get("output", ""),
            reference=raw.get("reference", ""),
            prompt=raw.get("prompt", ""),
            score_source=raw.get("score_source", "human"),
            score=raw.get("score"),
            hq=bool(raw.get("hq", False)),
            truncated=bool(raw.get("truncated", False)),
        )


def load_eval_records(path: str | Path) -> list[EvalRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(EvalRecord.from_json(line))
    return records


@dataclass
class GovernanceReport:
    n: int
    n_valid: int
    n_hq: int
    format_rate: float
    validity_rate: float
    acc_valid: float | None
    acc_hq: float | None
    record_flags: list[dict] = field(default_factory=list)

    def rates_percent(self) -> tuple[float, float, float | None, float | None]:
        """(Format, Validity, Acc(Valid), Acc(HQ)) as percentages, 1 decimal."""
        pct = lambda x: None if x is None else round(100.0 * x, 1)
        return (
            pct(self.format_rate),
            pct(self.validity_rate),
            pct(self.acc_valid),
            pct(self.acc_hq),
        )


def governance(
    records: Sequence[EvalRecord],
    accuracy_threshold: float = 0.8,
    action_verbs: Sequence[str] = DEFAULT_ACTION_VERBS,
) -> GovernanceReport:
    """Aggregate Format / Validity / Acc(Valid) / Acc(HQ) over eval records.

    Format counts strict schema conformance. Validity additionally admits
    outputs whose action is recoverable by the lenient extractor, provided
    generation did not exhaust its token budget mid-phrase. Accuracy applies
    ``score >= accuracy_threshold`` over the valid set and its high-quality
    subset; an hq flag on an invalid record is a data error.
    """
    if not records:
        raise ConfigError("governance requires at least one record")
    n = len(records)
    format_hits = 0
    flags = []
    valid_scores: list[float] = []
    hq_scores: list[float] = []
    for record in records:
        action = parse_corrective_action(record.output)
        conforms = action is not None
        if conforms:
            format_hits += 1
            valid = True
        else:
            extracted = lenient_action_extract(record.output, action_verbs)
            valid = extracted is not None and not record.truncated
            action = extracted if valid else None
        if record.hq and not valid:
            raise DataConsistencyError(f"record {record.id!r} is flagged hq but not valid")
        if valid:
            if record.score is None:
                raise DataConsistencyError(f"valid record {record.id!r} lacks a score")
            valid_scores.append(record.score)
            if record.hq:
                hq_scores.append(record.score)
        flags.append(
            {"id": record.id, "format": conforms, "valid": valid, "hq": record.hq, "action": action}
        )

    def rate(hits: list[float]) -> float | None:
        if not hits:
            return None
        return sum(1 for s in hits if s >= accuracy_threshold) / len(hits)

    return GovernanceReport(
        n=n,
        n_valid=len(valid_scores),
        n_hq=len(hq_scores),
        format_rate=format_hits / n,
        validity_rate=len(valid_scores) / n,
        acc_valid=rate(valid_scores),
        acc_hq=rate(hq_scores),
        record_flags=flags,
    )


# ---------------------------------------------------------------------------
# threshold calibration and event probability
# ---------------------------------------------------------------------------


@dataclass
class Threshold:
    kappa: float
    j_statistic: float
    candidates: np.ndarray


def youden_threshold(scores: Sequence[float], labels: Sequence[int]) -> Threshold:
    """Pick the cutoff maximizing J = TPR - FPR over observed score values.

    The decision rule is ``score >= kappa``; ties on J resolve to the smallest
    kappa. A non-positive best J (inverted scores) is reported with a warning.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if s.size != y.size or s.size == 0:
        raise ShapeError("scores and labels must be equal-length and non-empty")
    positives = int(y.sum())
    negatives = y.size - positives
    if positives == 0 or negatives == 0:
        raise CalibrationError("both classes must be present to calibrate a threshold")
    candidates = np.unique(s)
    best_kappa = None
    best_j = -np.inf
    for kappa in candidates:  # ascending, so ties keep the smallest kappa
        decide = s >= kappa
        tpr = (decide & (y == 1)).sum() / positives
        fpr = (decide & (y == 0)).sum() / negatives
        j = tpr - fpr
        if j > best_j:
            best_j = float(j)
            best_kappa = float(kappa)
    if best_j <= 0:
        log.warning("youden_threshold: best J = %.4f <= 0; scores are uninformative or inverted", best_j)
    return Threshold(kappa=best_kappa, j_statistic=best_j, candidates=candidates)


@dataclass
class EventStats:
    count: int
    total: int
    rate: float
    expected: float  # mean of Binomial(total, reference rate)


def event_probability(
    predictions: Sequence[str],
    predicate: Callable[[str], bool],
    reference_count: int,
    reference_total: int,
) -> EventStats:
    """Empirical event rate among predictions, next to the reference expectation."""
    if reference_total < 1:
        raise ConfigError("reference_total must be >= 1")
    total = len(predictions)
    if total < 1:
        raise ConfigError("event_probability requires at least one prediction")
    count = sum(1 for p in predictions if predicate(p))
    reference_rate = reference_count / reference_total
    return EventStats(
        count=count,
        total=total,
        rate=count / total,
        expected=total * reference_rate,
    )
