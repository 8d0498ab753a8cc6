"""Masked autoregressive supervised fine-tuning.

A training example is the concatenation z of instruction and response tokens
with a binary supervision mask that is zero over the instruction and padding.
The loss is the negative log-likelihood of the masked (response) tokens under
the standard next-token shift: the logits at position t-1 score token z_t.
Only adapter tensors are trainable; the backbone never receives gradients.
"""

import csv
import logging
from dataclasses import dataclass, field
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import ConfigError, DivergenceError, ExampleError, NumericError, ShapeError
from .lora import LoraAdapter, save_adapter
from .model import ModelParams, forward
from .numerics import Matrix, Tape
from .tokenizer import EOS_ID, PAD_ID, Vocab

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = "Complaint: {complaint}\nCause: {cause}\nCorrective actions included:"
RESPONSE_PREFIX = " "


def render_prompt(complaint: str, cause: str) -> str:
    return PROMPT_TEMPLATE.format(complaint=complaint, cause=cause)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 6e-5
    batch_size: int = 8
    grad_accum_steps: int = 4
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    max_seq_len: int = 2048
    reduction: str = "mean"  # sum mode selectable for scale experiments

    def __post_init__(self):
        if min(self.batch_size, self.grad_accum_steps, self.epochs, self.max_seq_len) < 1:
            raise ConfigError("batch_size, grad_accum_steps, epochs, max_seq_len must be >= 1")
        if self.lr < 0 or self.adam_eps <= 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0, adam_eps > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


@dataclass
class TrainingExample:
    instruction: list[int]
    response: list[int]
    tokens: np.ndarray  # z = concat(instruction, response) [+ padding]
    mask: np.ndarray  # 1 over surviving response positions, else 0


def assemble(
    complaint: str,
    cause: str,
    correction: str,
    vocab: Vocab,
    max_len: int = 2048,
    pad_to: int | None = None,
) -> TrainingExample:
    """Render the prompt template, tokenize, and build the supervision mask.

    The response gets an end-of-sequence terminator. Overlong sequences are
    truncated from the right (the response is cut before the instruction); an
    instruction that alone exceeds ``max_len`` rejects the example. Optional
    right-padding with masked pad tokens brings the sequence to ``pad_to``.
    """
    if not complaint.strip() or not cause.strip():
        raise ExampleError("empty instruction text")
    if not correction.strip():
        raise ExampleError("empty response text")
    instruction = vocab.encode(render_prompt(complaint, cause))
    response = vocab.encode(RESPONSE_PREFIX + correction) + [EOS_ID]
    if len(instruction) > max_len:
        raise ExampleError(
            f"instruction occupies {len(instruction)} tokens, over the {max_len} budget"
        )
    response = response[: max_len - len(instruction)]
    tokens = np.array(instruction + response, dtype=np.int64)
    mask = np.zeros(tokens.size, dtype=np.int64)
    mask[len(instruction) :] = 1
    if pad_to is not None:
        if pad_to > max_len:
            raise ConfigError(f"pad_to {pad_to} exceeds max_len {max_len}")
        if tokens.size < pad_to:
            pad = np.full(pad_to - tokens.size, PAD_ID, dtype=np.int64)
            tokens = np.concatenate([tokens, pad])
            mask = np.concatenate([mask, np.zeros(pad.size, dtype=np.int64)])
    return TrainingExample(instruction=instruction, response=response, tokens=tokens, mask=mask)


def masked_nll(logits: Matrix, tokens: Sequence[int], mask: Sequence[int], reduction: str = "mean") -> Matrix:
    """Negative log-likelihood over supervised positions.

    sum_t mask_t * -log softmax(logits[t-1])[tokens[t]], divided by the
    supervised count under mean reduction. Positions with mask 0 contribute
    nothing and receive zero gradient.
    """
    z = np.asarray(tokens, dtype=np.int64).reshape(-1)
    m = np.asarray(mask, dtype=np.int64).reshape(-1)
    if z.size != m.size or logits.rows != z.size:
        raise ShapeError(
            f"logits rows {logits.rows}, tokens {z.size}, mask {m.size} must agree"
        )
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    supervised = np.flatnonzero(m)
    if supervised.size == 0:
        raise ExampleError("supervision mask is all zero")
    if supervised[0] == 0:
        raise ExampleError("position 0 has no preceding context and cannot be supervised")

    rows = supervised - 1
    x = logits.data[rows]
    row_max = x.max(axis=1, keepdims=True)
    shifted = x - row_max
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + row_max
    targets = z[supervised]
    logprobs = x[np.arange(rows.size), targets] - logsumexp[:, 0]
    total = -logprobs.sum()
    count = supervised.size
    value = total / count if reduction == "mean" else total
    weight = 1.0 / count if reduction == "mean" else 1.0

    def backward(g: np.ndarray) -> None:
        probs = np.exp(shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True)))
        probs[np.arange(rows.size), targets] -= 1.0
        contribution = np.zeros_like(logits.data)
        np.add.at(contribution, rows, probs * (weight * g[0, 0]))
        nm.accumulate_grad(logits, contribution)

    return nm.record(np.array([[value]]), (logits,), backward)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, Matrix],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> None:
    """One decoupled-weight-decay Adam update with bias correction, in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for tensor '{name}'")
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            param.data *= 1.0 - cfg.lr * cfg.weight_decay
        param.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    trace: list[tuple[int, float]]  # (optimizer step, mean masked NLL)
    examples: int
    final_loss: float


def train(
    records: Sequence[dict],
    params: ModelParams,
    adapter: LoraAdapter,
    vocab: Vocab,
    cfg: TrainConfig,
    trace_path: str | Path | None = None,
    adapter_path: str | Path | None = None,
) -> TrainResult:
    """Gradient-accumulated AdamW fine-tuning of the adapter tensors.

    ``records`` carry complaint/cause/correction strings. One optimizer step
    consumes batch_size * grad_accum_steps examples; logged loss is the mean
    masked NLL over that window. Deterministic under a fixed seed.
    """
    if not records:
        raise ConfigError("training requires a non-empty dataset")
    examples = [
        assemble(r["complaint"], r["cause"], r["correction"], vocab, cfg.max_seq_len)
        for r in records
    ]
    trainable = adapter.named_tensors()
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    dropout_rng = (
        np.random.default_rng(cfg.seed + 1) if adapter.config.dropout > 0.0 else None
    )
    window = cfg.batch_size * cfg.grad_accum_steps
    trace: list[tuple[int, float]] = []
    step = 0

    for _ in range(cfg.epochs):
        order = rng.permutation(len(examples))
        for lo in range(0, len(order), window):
            chunk = order[lo : lo + window]
            adapter.zero_grads()
            losses = []
            for index in chunk:
                ex = examples[index]
                with Tape() as tape:
                    logits = forward(params, ex.tokens, adapter=adapter, dropout_rng=dropout_rng)
                    loss = masked_nll(logits, ex.tokens, ex.mask, cfg.reduction)
                    tape.backward(loss)
                losses.append(loss.item())
            step += 1
            mean_loss = float(np.mean(losses))
            if not np.isfinite(mean_loss):
                raise DivergenceError(f"non-finite loss at optimizer step {step}")
            grads = {
                name: (mat.grad / len(chunk) if mat.grad is not None else np.zeros_like(mat.data))
                for name, mat in trainable.items()
            }
            adamw_step(trainable, grads, state, cfg)
            adapter.zero_grads()
            trace.append((step, mean_loss))
            log.debug("step %d: loss %.6f", step, mean_loss)

    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(trace)
    if adapter_path is not None:
        save_adapter(adapter, adapter_path)
    return TrainResult(trace=trace, examples=len(examples), final_loss=trace[-1][1])


# ---------------------------------------------------------------------------
# KL / MLE diagnostic
# ---------------------------------------------------------------------------


def kl_mle_gap(
    empirical: np.ndarray,
    model: np.ndarray,
    x_weights: np.ndarray | None = None,
) -> tuple[float, float, float]:
    """(expected NLL, conditional entropy, expected KL) for tabular conditionals.

    Rows are conditional distributions P(y|x); ``x_weights`` defaults to
    uniform over rows. The three satisfy nll = entropy + kl, the decomposition
    that makes likelihood maximization equivalent to conditional KL
    minimization.
    """
    p_data = np.asarray(empirical, dtype=np.float64)
    p_model = np.asarray(model, dtype=np.float64)
    if p_data.shape != p_model.shape or p_data.ndim != 2:
        raise ShapeError(f"table shapes must match, got {p_data.shape} and {p_model.shape}")
    if np.any(p_data < 0) or not np.allclose(p_data.sum(axis=1), 1.0, atol=1e-9):
        raise ConfigError("empirical rows must be probability vectors")
    if x_weights is None:
        weights = np.full(p_data.shape[0], 1.0 / p_data.shape[0])
    else:
        weights = np.asarray(x_weights, dtype=np.float64)
        if weights.shape != (p_data.shape[0],) or not np.isclose(weights.sum(), 1.0):
            raise ConfigError("x_weights must be a probability vector over rows")
    support = p_data > 0
    if np.any(p_model[support] <= 0):
        raise NumericError("model assigns zero probability on the data support: KL is infinite")

    log_data = np.zeros_like(p_data)
    log_data[support] = np.log(p_data[support])
    log_model = np.zeros_like(p_model)
    log_model[support] = np.log(p_model[support])

    nll = float(-(weights[:, None] * p_data * log_model).sum())
    entropy = float(-(weights[:, None] * p_data * log_data).sum())
    kl = float((weights[:, None] * p_data * (log_data - log_model)).sum())
    return nll, entropy, kl
