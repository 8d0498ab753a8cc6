"""Autoregressive generation: greedy, temperature sampling, top-k, top-p.

Every session draws from a counter-based Philox generator seeded explicitly,
so sampled runs are reproducible from the recorded seed. Generation stops at
the end-of-sequence token or the new-token budget, whichever comes first.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, SequenceLengthError
from .lora import LoraAdapter
from .model import ModelParams, forward, output_distribution
from .tokenizer import EOS_ID, Vocab

STRATEGIES = ("greedy", "sample", "top_k", "top_p")


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "greedy"
    temperature: float = 1.0
    k: int = 50
    p: float = 0.9
    max_new_tokens: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; valid: {STRATEGIES}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not 0 < self.p <= 1:
            raise ConfigError(f"p must be in (0, 1], got {self.p}")
        if self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


def _descending_order(probs: np.ndarray) -> np.ndarray:
    # ties broken by lower token id: sort by (-prob, id)
    return np.lexsort((np.arange(probs.size), -probs))


def truncate_top_k(probs: np.ndarray, k: int) -> np.ndarray:
    """Keep the k most probable entries (ties to lower ids) and renormalize."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    if k >= probs.size:
        return probs.copy()
    keep = _descending_order(probs)[:k]
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


def truncate_top_p(probs: np.ndarray, p: float) -> np.ndarray:
    """Keep the smallest descending-probability prefix reaching cumulative p."""
    if not 0 < p <= 1:
        raise ConfigError(f"p must be in (0, 1], got {p}")
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    if p == 1.0:
        return probs.copy()
    order = _descending_order(probs)
    cumulative = np.cumsum(probs[order])
    cutoff = int(np.searchsorted(cumulative, p, side="left")) + 1
    keep = order[:cutoff]
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


@dataclass
class GenerationResult:
    prompt: str
    text: str  # decoded newly generated suffix
    tokens: list[int]  # generated ids, including the terminator when reached
    stopped_by_eos: bool
    config: DecodeConfig

    @property
    def truncated(self) -> bool:
        return not self.stopped_by_eos

    def report_record(self) -> dict:
        return {
            "prompt": self.prompt,
            "output": self.text,
            "tokens": self.tokens,
            "seed": self.config.seed,
            "strategy": self.config.strategy,
            "config": asdict(self.config),
            "truncated": self.truncated,
        }


def generate(
    params: ModelParams,
    vocab: Vocab,
    prompt: str,
    cfg: DecodeConfig,
    adapter: LoraAdapter | None = None,
) -> GenerationResult:
    """Decode a continuation of ``prompt`` under the configured strategy."""
    ids = vocab.encode(prompt)
    if not ids:
        raise ConfigError("prompt produced no tokens")
    if len(ids) + cfg.max_new_tokens > params.config.max_seq_len:
        raise SequenceLengthError(
            f"prompt of {len(ids)} tokens leaves no room for {cfg.max_new_tokens} "
            f"new tokens within max_seq_len {params.config.max_seq_len}"
        )
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    generated: list[int] = []
    stopped = False
    context = list(ids)
    for _ in range(cfg.max_new_tokens):
        logits = forward(params, context, adapter=adapter)
        probs = output_distribution(logits.data[-1], cfg.temperature)
        if cfg.strategy == "greedy":
            next_id = int(np.argmax(probs))
        else:
            if cfg.strategy == "top_k":
                probs = truncate_top_k(probs, cfg.k)
            elif cfg.strategy == "top_p":
                probs = truncate_top_p(probs, cfg.p)
            next_id = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
            next_id = min(next_id, probs.size - 1)
        generated.append(next_id)
        context.append(next_id)
        if next_id == EOS_ID:
            stopped = True
            break
    return GenerationResult(
        prompt=prompt,
        text=vocab.decode(generated),
        tokens=generated,
        stopped_by_eos=stopped,
        config=cfg,
    )
