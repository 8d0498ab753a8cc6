"""Operator entry point: reproducible preprocess / tokenize / train / generate
/ evaluate / correlate / govern / threshold runs.

Every run resolves its configuration (file values over defaults, seed
overridable by flag), echoes the resolved text into a content-addressed run
directory, and writes outputs only there. Environment variables are never
consulted; flags and config files are the whole interface.
"""

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import evalharness, metrics, preprocess
from .decoding import DecodeConfig, generate
from .errors import ConfigError, WclmError
from .evalharness import (
    EvalRecord,
    chatterjee_xi,
    event_probability,
    governance,
    kendall_tau,
    load_eval_records,
    parse_corrective_action,
    spearman_rho,
    youden_threshold,
)
from .lora import LoraConfig, inject, load_adapter
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .preprocess import load_claim_records, load_patterns, load_rewrite_dict, save_claim_records
from .tokenizer import Vocab, train_bpe
from .training import PROMPT_TEMPLATE, TrainConfig, render_prompt, train

SCHEMA_PREFIX = PROMPT_TEMPLATE.rsplit("\n", 1)[1]

# section -> key -> (type, default); unknown keys are rejected
_SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "model": {
        "d": (int, 64),
        "n_layers": (int, 2),
        "m_head": (int, 4),
        "d_ff": (int, 128),
        "vocab_size": (int, 0),  # 0: resolve from the vocab file at run time
        "max_seq_len": (int, 2048),
        "rope_base": (float, 10000.0),
        "eps": (float, 1e-6),
        "init_std": (float, 0.02),
    },
    "lora": {
        "r": (int, 32),
        "alpha": (float, 32.0),
        "dropout": (float, 0.0),
        "targets": (str, "q,v"),
    },
    "train": {
        "lr": (float, 6e-5),
        "batch_size": (int, 8),
        "grad_accum_steps": (int, 4),
        "epochs": (int, 1),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "adam_eps": (float, 1e-8),
        "weight_decay": (float, 0.0),
        "reduction": (str, "mean"),
    },
    "decode": {
        "strategy": (str, "greedy"),
        "temperature": (float, 1.0),
        "k": (int, 50),
        "p": (float, 0.9),
        "max_new_tokens": (int, 64),
    },
    "run": {
        "seed": (int, 0),
    },
}


@dataclass
class RunConfig:
    """Fully resolved key=value configuration for one run."""

    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.values:
            self.values = {
                section: {key: default for key, (_, default) in keys.items()}
                for section, keys in _SCHEMA.items()
            }

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def override_seed(self, seed: int | None) -> None:
        if seed is not None:
            self.values["run"]["seed"] = seed

    def model_config(self, vocab_size: int | None = None) -> ModelConfig:
        raw = dict(self.values["model"])
        if raw["vocab_size"] == 0:
            if vocab_size is None:
                raise ConfigError("model vocab_size is 0 and no vocabulary was supplied")
            raw["vocab_size"] = vocab_size
        return ModelConfig(**raw)

    def lora_config(self) -> LoraConfig:
        raw = dict(self.values["lora"])
        targets = tuple(t.strip().lower() for t in raw.pop("targets").split(",") if t.strip())
        return LoraConfig(targets=targets, **raw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            seed=self.seed,
            max_seq_len=self.values["model"]["max_seq_len"],
            **self.values["train"],
        )

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(seed=self.seed, **self.values["decode"])

    def resolved_text(self, extra: dict[str, dict[str, object]] | None = None) -> str:
        sections = dict(self.values)
        if extra:
            sections = {**sections, **extra}
        lines = []
        for section in sections:
            lines.append(f"[{section}]")
            for key, value in sections[section].items():
                lines.append(f"{key}={value!r}" if isinstance(value, str) else f"{key}={value}")
            lines.append("")
        return "\n".join(lines)


def load_config(path: str | Path | None) -> RunConfig:
    """Parse sectioned key=value text over the documented defaults.

    Unknown sections or keys and unparsable values are config errors naming
    the offending line. A missing or empty file yields pure defaults.
    """
    config = RunConfig()
    if path is None:
        return config
    section = None
    for lineno, raw_line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        if section is None:
            raise ConfigError(f"{path}:{lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA[section]:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}' in [{section}]")
        caster, _ = _SCHEMA[section][key]
        try:
            config.values[section][key] = caster(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: cannot parse {value!r} as {caster.__name__}") from exc
    # eager validation so malformed values fail at load, not mid-run
    config.lora_config()
    config.train_config()
    config.decode_config()
    config.model_config(vocab_size=config.values["model"]["vocab_size"] or 259)
    return config


def _run_dir(base: str | Path, command: str, resolved: str) -> Path:
    digest = hashlib.sha256(resolved.encode("utf-8")).hexdigest()[:12]
    run = Path(base) / f"{command}-{digest}"
    run.mkdir(parents=True, exist_ok=True)
    (run / "resolved.cfg").write_text(resolved, encoding="utf-8")
    return run


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    config = load_config(args.config)
    config.override_seed(args.seed)
    rewrites = load_rewrite_dict(args.rewrite_dict, args.misspellings)
    patterns = load_patterns(args.patterns) if args.patterns else []
    records = load_claim_records(args.input)
    extra = {
        "preprocess": {
            "input": str(args.input),
            "rewrite_dict": str(args.rewrite_dict),
            "misspellings": str(args.misspellings or ""),
            "patterns": str(args.patterns or ""),
            "min_tokens": args.min_tokens,
        }
    }
    run = _run_dir(args.out, "preprocess", config.resolved_text(extra))
    result = preprocess.pipeline(records, rewrites, patterns, args.min_tokens)
    save_claim_records(result.records, run / "cleaned.jsonl")
    with open(run / "drop_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "stage"])
        writer.writerows(result.drop_log)
    print(f"kept {len(result.records)}/{len(records)} records -> {run}")
    return 0


def cmd_tokenize(args) -> int:
    config = load_config(args.config)
    config.override_seed(args.seed)
    records = load_claim_records(args.input)
    corpus = []
    for record in records:
        corpus.append(render_prompt(record.complaint, record.cause))
        corpus.append(" " + record.correction)
    extra = {"tokenize": {"input": str(args.input), "vocab_size": args.vocab_size}}
    run = _run_dir(args.out, "tokenize", config.resolved_text(extra))
    vocab = train_bpe(corpus, args.vocab_size)
    vocab.save(run / "vocab.txt")
    print(f"trained vocabulary of {vocab.size} tokens ({len(vocab.merges)} merges) -> {run}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    config.override_seed(args.seed)
    vocab = Vocab.load(args.vocab)
    records = [
        {"complaint": r.complaint, "cause": r.cause, "correction": r.correction}
        for r in load_claim_records(args.data)
    ]
    extra = {"train_paths": {"data": str(args.data), "vocab": str(args.vocab)}}
    run = _run_dir(args.out, "train", config.resolved_text(extra))
    params = init_params(config.model_config(vocab.size), seed=config.seed)
    adapter = inject(params, config.lora_config(), seed=config.seed)
    result = train(
        records,
        params,
        adapter,
        vocab,
        config.train_config(),
        trace_path=run / "loss_trace.csv",
        adapter_path=run / "adapter.bin",
    )
    save_checkpoint(params, run / "checkpoint.bin")
    print(
        f"trained {result.examples} examples, {len(result.trace)} steps, "
        f"final loss {result.final_loss:.4f} -> {run}"
    )
    return 0


def cmd_generate(args) -> int:
    config = load_config(args.config)
    config.override_seed(args.seed)
    vocab = Vocab.load(args.vocab)
    params = load_checkpoint(args.checkpoint)
    adapter = load_adapter(args.adapter, params.config) if args.adapter else None
    records = load_claim_records(args.data)
    extra = {
        "generate_paths": {
            "data": str(args.data),
            "vocab": str(args.vocab),
            "checkpoint": str(args.checkpoint),
            "adapter": str(args.adapter or ""),
        }
    }
    run = _run_dir(args.out, "generate", config.resolved_text(extra))
    decode_cfg = config.decode_config()
    rows = []
    for index, record in enumerate(records):
        prompt = render_prompt(record.complaint, record.cause)
        result = generate(params, vocab, prompt, decode_cfg, adapter)
        row = result.report_record()
        # the prompt ends with the schema prefix; the governed output is the
        # completed schema line
        row["output"] = SCHEMA_PREFIX + result.text
        row["id"] = str(record.metadata.get("id", index))
        row["reference"] = record.correction
        rows.append(row)
    _write_jsonl(run / "generations.jsonl", rows)
    print(f"generated {len(rows)} outputs -> {run}")
    return 0


def _load_pairs(path: str | Path) -> list[tuple[str, str, str]]:
    """(id, prediction, reference) triples from a pairs or generations file."""
    pairs = []
    for index, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        raw = json.loads(line)
        if "prediction" in raw:
            prediction = raw["prediction"]
        elif "output" in raw:
            action = parse_corrective_action(raw["output"])
            prediction = action if action is not None else raw["output"]
        else:
            raise ConfigError(f"{path}: record {index} has neither 'prediction' nor 'output'")
        pairs.append((str(raw.get("id", index)), prediction, raw.get("reference", "")))
    return pairs


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    config.override_seed(args.seed)
    pairs = _load_pairs(args.data)
    provider = metrics.EmbeddingProvider.load(args.embeddings) if args.embeddings else None
    bleurt = metrics.PairScoreTable.load(args.bleurt) if args.bleurt else None
    judge = metrics.LocalJudgeMock() if args.judge == "mock" else None
    extra = {
        "evaluate": {
            "data": str(args.data),
            "embeddings": str(args.embeddings or ""),
            "bleurt": str(args.bleurt or ""),
            "judge": args.judge,
        }
    }
    run = _run_dir(args.out, "evaluate", config.resolved_text(extra))
    space = metrics.tfidf_fit([p for _, p, _ in pairs] + [r for _, _, r in pairs])
    with open(run / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *metrics.METRIC_COLUMNS])
        for pair_id, prediction, reference in pairs:
            scored = metrics.score_pair(
                prediction, reference, space=space, provider=provider, bleurt=bleurt, judge=judge
            )
            writer.writerow(
                [pair_id]
                + ["" if col not in scored.scores else f"{scored.scores[col]:.6f}"
                   for col in metrics.METRIC_COLUMNS]
            )
    print(f"scored {len(pairs)} pairs -> {run}")
    return 0


def cmd_correlate(args) -> int:
    config = load_config(args.config)
    config.override_seed(args.seed)
    with open(args.data, newline="") as fh:
        table = list(csv.DictReader(fh))
    if not table:
        raise ConfigError(f"{args.data}: empty table")
    if args.target_col not in table[0]:
        raise ConfigError(f"{args.data}: no column {args.target_col!r}")
    extra = {"correlate": {"data": str(args.data), "target_col": args.target_col}}
    run = _run_dir(args.out, "correlate", config.resolved_text(extra))
    columns = [c for c in table[0] if c not in (args.target_col, "id")]
    rows = []
    for column in columns:
        sample = [
            (float(row[column]), float(row[args.target_col]))
            for row in table
            if row[column] not in ("", None) and row[args.target_col] not in ("", None)
        ]
        if len(sample) < 3:
            rows.append((column, None, None, None))
            continue
        a = [s for s, _ in sample]
        b = [h for _, h in sample]
        rows.append((column, chatterjee_xi(a, b), spearman_rho(a, b), kendall_tau(a, b)))
    fmt = lambda v: "" if v is None else f"{v:.4f}"
    with open(run / "correlations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "chatterjee_xi", "spearman_rho", "kendall_tau"])
        for name, xi, rho, tau in rows:
            writer.writerow([name, fmt(xi), fmt(rho), fmt(tau)])
    print(f"{'metric':<28} {'xi':>8} {'rho':>8} {'tau':>8}")
    for name, xi, rho, tau in rows:
        print(f"{name:<28} {fmt(xi):>8} {fmt(rho):>8} {fmt(tau):>8}")
    print(f"-> {run}")
    return 0


def cmd_govern(args) -> int:
    config = load_config(args.config)
    config.override_seed(args.seed)
    records = load_eval_records(args.data)
    extra = {
        "govern": {
            "data": str(args.data),
            "threshold": args.threshold,
            "event_regex": args.event_regex or "",
            "event_ref": f"{args.event_ref_count}/{args.event_ref_total}"
            if args.event_regex
            else "",
        }
    }
    run = _run_dir(args.out, "govern", config.resolved_text(extra))
    report = governance(records, accuracy_threshold=args.threshold)
    fmt_rate, val_rate, acc_valid, acc_hq = report.rates_percent()
    show = lambda v: "n/a" if v is None else f"{v:.1f}"
    lines = [
        f"{'N':<12}{report.n}",
        f"{'|V|':<12}{report.n_valid}",
        f"{'|H|':<12}{report.n_hq}",
        f"{'Format %':<12}{show(fmt_rate)}",
        f"{'Validity %':<12}{show(val_rate)}",
        f"{'Acc(Valid) %':<12}{show(acc_valid)}",
        f"{'Acc(HQ) %':<12}{show(acc_hq)}",
    ]
    if args.event_regex:
        import re as _re

        pattern = _re.compile(args.event_regex)
        predictions = [r.output for r in records]
        stats = event_probability(
            predictions,
            lambda text: bool(pattern.search(text)),
            args.event_ref_count,
            args.event_ref_total,
        )
        lines += [
            f"{'Event hits':<12}{stats.count}/{stats.total}",
            f"{'Event rate':<12}{stats.rate:.6g}",
            f"{'Expected':<12}{stats.expected:.6g}",
        ]
    text = "\n".join(lines) + "\n"
    (run / "governance.txt").write_text(text, encoding="utf-8")
    with open(run / "governance.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "n_valid", "n_hq", "format", "validity", "acc_valid", "acc_hq"])
        writer.writerow(
            [report.n, report.n_valid, report.n_hq, show(fmt_rate), show(val_rate), show(acc_valid), show(acc_hq)]
        )
    print(text, end="")
    print(f"-> {run}")
    return 0


def cmd_threshold(args) -> int:
    config = load_config(args.config)
    config.override_seed(args.seed)
    with open(args.data, newline="") as fh:
        table = list(csv.DictReader(fh))
    try:
        scores = [float(row[args.score_col]) for row in table]
        labels = [int(row[args.label_col]) for row in table]
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{args.data}: cannot read score/label columns: {exc}") from exc
    extra = {
        "threshold": {
            "data": str(args.data),
            "score_col": args.score_col,
            "label_col": args.label_col,
            "kappa": "" if args.kappa is None else args.kappa,
        }
    }
    run = _run_dir(args.out, "threshold", config.resolved_text(extra))
    if args.kappa is not None:
        # externally imposed operating point: report J at the given kappa
        import numpy as np

        s = np.asarray(scores)
        y = np.asarray(labels)
        tpr = ((s >= args.kappa) & (y == 1)).sum() / max(1, (y == 1).sum())
        fpr = ((s >= args.kappa) & (y == 0)).sum() / max(1, (y == 0).sum())
        payload = {"kappa": args.kappa, "j_statistic": float(tpr - fpr), "source": "override"}
    else:
        result = youden_threshold(scores, labels)
        payload = {"kappa": result.kappa, "j_statistic": result.j_statistic, "source": "youden"}
    (run / "threshold.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(f"kappa={payload['kappa']} J={payload['j_statistic']:.4f} -> {run}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wclm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--out", default="runs", help="base directory for run artifacts")

    p = sub.add_parser("preprocess", help="run the five-stage cleaning pipeline")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--rewrite-dict", required=True)
    p.add_argument("--misspellings", default=None)
    p.add_argument("--patterns", default=None)
    p.add_argument("--min-tokens", type=int, default=3)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("tokenize", help="train the byte-level BPE vocabulary")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("train", help="LoRA fine-tune on claim records")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode corrective actions for claim records")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--adapter", default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score prediction/reference pairs")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--bleurt", default=None)
    p.add_argument("--judge", choices=("none", "mock"), default="none")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("correlate", help="rank-correlate metric columns against a target")
    common(p)
    p.add_argument("--data", required=True, help="CSV with metric columns")
    p.add_argument("--target-col", default="human")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("govern", help="Format/Validity/Acc governance report")
    common(p)
    p.add_argument("--data", required=True, help="evaluation records JSONL")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--event-regex", default=None)
    p.add_argument("--event-ref-count", type=int, default=0)
    p.add_argument("--event-ref-total", type=int, default=1)
    p.set_defaults(func=cmd_govern)

    p = sub.add_parser("threshold", help="Youden-J threshold calibration")
    common(p)
    p.add_argument("--data", required=True, help="CSV with score and label columns")
    p.add_argument("--score-col", default="score")
    p.add_argument("--label-col", default="label")
    p.add_argument("--kappa", type=float, default=None, help="externally imposed operating point")
    p.set_defaults(func=cmd_threshold)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except WclmError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
