"""Five-stage deterministic claim-narrative cleaning.

Stage order is fixed: (1) duplicate-fragment removal, (2) shorthand
expansion, (3) misspelling correction, (4) administrative-sentence removal,
(5) degenerate-record filtering. Sentences are period/newline delimited;
fields are rebuilt by joining surviving sentences with ". ", which makes the
whole pipeline idempotent.
"""

import json
import re
from dataclasses import dataclass, field, replace
from collections.abc import Iterable, Sequence
from pathlib import Path

from .errors import ConfigError

_SENTENCE_SPLIT = re.compile(r"[.\n]+")
_WORD = re.compile(r"[0-9a-z&']+")


@dataclass(frozen=True)
class ClaimRecord:
    complaint: str
    cause: str
    correction: str
    metadata: dict = field(default_factory=dict)

    FIELDS = ("complaint", "cause", "correction")

    def narrative(self, name: str) -> str:
        return getattr(self, name)

    def to_json(self) -> str:
        payload = {name: self.narrative(name) for name in self.FIELDS}
        payload.update(self.metadata)
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ClaimRecord":
        raw = json.loads(line)
        meta = {k: v for k, v in raw.items() if k not in cls.FIELDS}
        return cls(
            complaint=raw.get("complaint", ""),
            cause=raw.get("cause", ""),
            correction=raw.get("correction", ""),
            metadata=meta,
        )


def load_claim_records(path: str | Path) -> list[ClaimRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(ClaimRecord.from_json(line))
    return records


def save_claim_records(records: Iterable[ClaimRecord], path: str | Path) -> None:
    Path(path).write_text(
        "".join(record.to_json() + "\n" for record in records), encoding="utf-8"
    )


def _boundary_regex(keys) -> re.Pattern | None:
    if not keys:
        return None
    alternation = "|".join(re.escape(k) for k in sorted(keys, key=len, reverse=True))
    return re.compile(rf"(?<![0-9a-z])(?:{alternation})(?![0-9a-z])")


class RewriteDict:
    """Ordered shorthand expansions plus a misspelling map, keys lowercase.

    Values are resolved to a fixpoint at construction (an expansion may not
    keep referencing rewrite keys), so one normalization pass is idempotent.
    Cyclic or self-growing definitions are rejected as config errors.
    """

    def __init__(self, shorthand: dict[str, str] | None = None, misspellings: dict[str, str] | None = None):
        self.shorthand = dict(shorthand or {})
        self.misspellings = dict(misspellings or {})
        for key in list(self.shorthand) + list(self.misspellings):
            if key != key.lower():
                raise ConfigError(f"dictionary key {key!r} must be lowercase")

        def substitute_shorthand(text: str) -> str:
            pattern = _boundary_regex(self.shorthand)
            return pattern.sub(lambda m: self.shorthand[m.group(0)], text) if pattern else text

        def substitute_misspellings(text: str) -> str:
            return _WORD.sub(lambda m: self.misspellings.get(m.group(0), m.group(0)), text)

        self.shorthand = _fixpoint(self.shorthand, substitute_shorthand)
        self.misspellings = _fixpoint(self.misspellings, substitute_misspellings)
        # a corrected word must not resurrect a shorthand key on a second run
        self.misspellings = {k: substitute_shorthand(v) for k, v in self.misspellings.items()}


def _fixpoint(mapping: dict[str, str], substitute) -> dict[str, str]:
    resolved = {}
    for key, value in mapping.items():
        for _ in range(len(mapping) + 1):
            new_value = substitute(value)
            if new_value == value:
                break
            value = new_value
        else:
            raise ConfigError(f"cyclic rewrite dictionary definition involving {key!r}")
        resolved[key] = value
    return resolved


def _load_tsv(path: str | Path) -> dict[str, str]:
    table: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "\t" not in line:
            raise ConfigError(f"{path}:{lineno}: expected shorthand<TAB>expansion")
        key, _, value = line.partition("\t")
        table[key.strip()] = value.strip()
    return table


def load_rewrite_dict(shorthand_path: str | Path, misspelling_path: str | Path | None = None) -> RewriteDict:
    return RewriteDict(
        shorthand=_load_tsv(shorthand_path),
        misspellings=_load_tsv(misspelling_path) if misspelling_path else {},
    )


def load_patterns(path: str | Path) -> list[str]:
    """One pattern per line: plain substring, or ^prefix anchored at sentence start."""
    patterns = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.lstrip().startswith("#"):
            patterns.append(line.strip())
    return patterns


def _sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_SPLIT.split(text) if s.strip()]


def _join(sentences: Sequence[str]) -> str:
    return ". ".join(sentences)


def _squash_ws(sentence: str) -> str:
    return " ".join(sentence.split())


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def dedup_fragments(record: ClaimRecord) -> ClaimRecord:
    """Stage 1: keep only the first occurrence of each sentence across fields."""
    seen: set[str] = set()
    updates = {}
    for name in ClaimRecord.FIELDS:
        kept = []
        for sentence in _sentences(record.narrative(name)):
            key = _squash_ws(sentence)
            if key not in seen:
                seen.add(key)
                kept.append(sentence)
        updates[name] = _join(kept)
    return replace(record, **updates)


def normalize_text(record: ClaimRecord, rewrites: RewriteDict) -> ClaimRecord:
    """Stages 2-3: lowercase, expand shorthand (longest match), fix misspellings."""
    updates = {}
    shorthand_re = _boundary_regex(rewrites.shorthand)
    for name in ClaimRecord.FIELDS:
        text = record.narrative(name).lower()
        if shorthand_re is not None:
            text = shorthand_re.sub(lambda m: rewrites.shorthand[m.group(0)], text)
        if rewrites.misspellings:
            text = _WORD.sub(
                lambda m: rewrites.misspellings.get(m.group(0), m.group(0)), text
            )
        updates[name] = text
    return replace(record, **updates)


def strip_admin(record: ClaimRecord, patterns: Sequence[str]) -> ClaimRecord:
    """Stage 4: drop sentences matching an administrative pattern."""

    def is_admin(sentence: str) -> bool:
        for pattern in patterns:
            if pattern.startswith("^"):
                if sentence.startswith(pattern[1:]):
                    return True
            elif pattern in sentence:
                return True
        return False

    updates = {}
    for name in ClaimRecord.FIELDS:
        kept = [s for s in _sentences(record.narrative(name)) if not is_admin(s)]
        updates[name] = _join(kept)
    return replace(record, **updates)


def filter_degenerate(record: ClaimRecord, min_tokens: int = 3) -> bool:
    """Stage 5 keep/drop decision: every field needs >= min_tokens tokens."""
    if min_tokens < 1:
        raise ConfigError(f"min_tokens must be >= 1, got {min_tokens}")
    return all(
        len(record.narrative(name).split()) >= min_tokens for name in ClaimRecord.FIELDS
    )


@dataclass
class PipelineResult:
    records: list[ClaimRecord]
    drop_log: list[tuple[str, str]]  # (record id, failing stage)


def pipeline(
    records: Sequence[ClaimRecord],
    rewrites: RewriteDict,
    patterns: Sequence[str],
    min_tokens: int = 3,
) -> PipelineResult:
    """Apply stages 1..5 in order; per-record failures never abort the batch."""
    kept: list[ClaimRecord] = []
    dropped: list[tuple[str, str]] = []
    for index, record in enumerate(records):
        record_id = str(record.metadata.get("id", index))
        cleaned = dedup_fragments(record)
        cleaned = normalize_text(cleaned, rewrites)
        cleaned = strip_admin(cleaned, patterns)
        if filter_degenerate(cleaned, min_tokens):
            kept.append(cleaned)
        else:
            dropped.append((record_id, "filter_degenerate"))
    return PipelineResult(records=kept, drop_log=dropped)
