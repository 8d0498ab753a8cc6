"""Decoder-only transformer forward pass.

Embeddings, per-head rotary position encoding on queries and keys, PreNorm
blocks (RMSNorm -> causal multi-head attention -> residual, RMSNorm -> SwiGLU
FFN -> residual), a final RMSNorm, and a temperature-scaled output head.

Weights are stored in the x @ W orientation: attention projections are
d x d (heads stacked along columns), W_up/W_gate are d x d_ff/2, W_down is
d_ff/2 x d, and the output projection is vocab_size x d applied transposed.
"""

import math
from dataclasses import dataclass, fields
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from . import numerics as nm
from . import tensorfile
from .errors import ConfigError, SequenceLengthError, ShapeError, VocabularyError
from .numerics import Matrix


@dataclass(frozen=True)
class ModelConfig:
    d: int
    n_layers: int
    m_head: int
    d_ff: int
    vocab_size: int
    max_seq_len: int = 2048
    rope_base: float = 10000.0
    eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self):
        if min(self.d, self.n_layers, self.m_head, self.d_ff, self.vocab_size) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.d % self.m_head != 0:
            raise ConfigError(f"d={self.d} not divisible by m_head={self.m_head}")
        if (self.d // self.m_head) % 2 != 0:
            raise ConfigError(f"head dim {self.d // self.m_head} must be even for rotary pairs")
        if self.d_ff % 2 != 0:
            raise ConfigError(f"d_ff={self.d_ff} must be even")
        if self.max_seq_len < 1 or self.rope_base <= 0 or self.eps <= 0:
            raise ConfigError("max_seq_len, rope_base and eps must be positive")

    @property
    def d_k(self) -> int:
        return self.d // self.m_head


@dataclass
class LayerParams:
    w_q: Matrix
    w_k: Matrix
    w_v: Matrix
    w_o: Matrix
    w_up: Matrix
    w_gate: Matrix
    w_down: Matrix
    g_attn: Matrix
    g_ffn: Matrix


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: Matrix  # vocab_size x d
    layers: list[LayerParams]
    g_out: Matrix  # 1 x d
    w_out: Matrix  # vocab_size x d
    b_out: Matrix  # 1 x vocab_size

    def named_tensors(self) -> dict[str, Matrix]:
        out = {"embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            for field in fields(LayerParams):
                out[f"layer.{i}.{field.name}"] = getattr(layer, field.name)
        out["g_out"] = self.g_out
        out["w_out"] = self.w_out
        out["b_out"] = self.b_out
        return out


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Gaussian(0, init_std) projections and embeddings, all-ones gains, zero bias."""
    rng = np.random.default_rng(seed)
    sd = config.init_std

    def gauss(rows: int, cols: int) -> Matrix:
        return Matrix(rng.normal(0.0, sd, size=(rows, cols)))

    half_ff = config.d_ff // 2
    layers = [
        LayerParams(
            w_q=gauss(config.d, config.d),
            w_k=gauss(config.d, config.d),
            w_v=gauss(config.d, config.d),
            w_o=gauss(config.d, config.d),
            w_up=gauss(config.d, half_ff),
            w_gate=gauss(config.d, half_ff),
            w_down=gauss(half_ff, config.d),
            g_attn=Matrix(np.ones((1, config.d))),
            g_ffn=Matrix(np.ones((1, config.d))),
        )
        for _ in range(config.n_layers)
    ]
    return ModelParams(
        config=config,
        embedding=gauss(config.vocab_size, config.d),
        layers=layers,
        g_out=Matrix(np.ones((1, config.d))),
        w_out=gauss(config.vocab_size, config.d),
        b_out=Matrix(np.zeros((1, config.vocab_size))),
    )


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def embed(params: ModelParams, tokens: Sequence[int]) -> Matrix:
    """Look up embedding rows; row s of the result is E[tokens[s]]."""
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= params.config.vocab_size):
        raise VocabularyError(
            f"token id outside vocabulary of size {params.config.vocab_size}"
        )
    return nm.take_rows(params.embedding, ids)


def rope_rotate(h: Matrix, start_pos: int, base: float = 10000.0) -> Matrix:
    """Rotate adjacent column pairs by position-dependent angles.

    Pair k (columns 2k-2, 2k-1 for k = 1..cols/2) at absolute position s is
    rotated by angle s * base**(-2(k-1)/cols). Row i sits at position
    start_pos + i. Inverse rotation propagates gradients.
    """
    if h.cols % 2 != 0:
        raise ShapeError(f"rope requires an even column count, got {h.cols}")
    half = h.cols // 2
    freqs = base ** (-2.0 * np.arange(half) / h.cols)  # theta_k, k=1..half
    positions = start_pos + np.arange(h.rows)
    angles = positions[:, None] * freqs[None, :]
    cos, sin = np.cos(angles), np.sin(angles)

    even = h.data[:, 0::2]
    odd = h.data[:, 1::2]
    out = np.empty_like(h.data)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos

    def backward(g: np.ndarray) -> None:
        g_even = g[:, 0::2]
        g_odd = g[:, 1::2]
        gh = np.empty_like(g)
        gh[:, 0::2] = g_even * cos + g_odd * sin
        gh[:, 1::2] = -g_even * sin + g_odd * cos
        nm.accumulate_grad(h, gh)

    return nm.record(out, (h,), backward)


def causal_mask(n: int) -> np.ndarray:
    """0 where j <= i, -inf where j > i."""
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def _project(
    x: Matrix,
    weight: Matrix,
    adapter,
    layer_index: int,
    target: str,
    dropout_rng: np.random.Generator | None,
) -> Matrix:
    """x @ W plus the low-rank adapter path when one is attached."""
    out = nm.matmul(x, weight)
    if adapter is None:
        return out
    entry = adapter.entry(layer_index, target)
    if entry is None:
        return out
    a, b = entry
    low_in = x
    if dropout_rng is not None and adapter.config.dropout > 0.0:
        keep = 1.0 - adapter.config.dropout
        mask = (dropout_rng.random(x.shape) < keep).astype(np.float64) / keep
        low_in = nm.mul_const(x, mask)
    low = nm.matmul(nm.matmul(low_in, nm.transpose(a)), nm.transpose(b))
    return nm.add(out, nm.scale(low, adapter.config.scaling))


def attention_block(
    h: Matrix,
    layer: LayerParams,
    config: ModelConfig,
    adapter=None,
    layer_index: int = 0,
    dropout_rng: np.random.Generator | None = None,
) -> Matrix:
    """PreNorm causal multi-head attention with a residual connection."""
    n = h.rows
    x = nm.rmsnorm_rows(h, layer.g_attn, config.eps)
    q = _project(x, layer.w_q, adapter, layer_index, "q", dropout_rng)
    k = _project(x, layer.w_k, adapter, layer_index, "k", dropout_rng)
    v = _project(x, layer.w_v, adapter, layer_index, "v", dropout_rng)

    mask = causal_mask(n)
    inv_sqrt_dk = 1.0 / math.sqrt(config.d_k)
    heads = []
    for i in range(config.m_head):
        j0, j1 = i * config.d_k, (i + 1) * config.d_k
        qi = rope_rotate(nm.col_slice(q, j0, j1), 0, config.rope_base)
        ki = rope_rotate(nm.col_slice(k, j0, j1), 0, config.rope_base)
        scores = nm.add_const(nm.scale(nm.matmul(qi, nm.transpose(ki)), inv_sqrt_dk), mask)
        weights = nm.softmax_rows(scores)
        heads.append(nm.matmul(weights, nm.col_slice(v, j0, j1)))

    attn = _project(nm.hstack(heads), layer.w_o, adapter, layer_index, "o", dropout_rng)
    return nm.add(h, attn)


def ffn_block(
    h: Matrix,
    layer: LayerParams,
    config: ModelConfig,
    adapter=None,
    layer_index: int = 0,
    dropout_rng: np.random.Generator | None = None,
) -> Matrix:
    """PreNorm SwiGLU feed-forward with a residual connection."""
    x = nm.rmsnorm_rows(h, layer.g_ffn, config.eps)
    up = _project(x, layer.w_up, adapter, layer_index, "up", dropout_rng)
    gate = _project(x, layer.w_gate, adapter, layer_index, "gate", dropout_rng)
    inner = nm.mul(nm.silu(up), gate)
    out = _project(inner, layer.w_down, adapter, layer_index, "down", dropout_rng)
    return nm.add(h, out)


def forward(
    params: ModelParams,
    tokens: Sequence[int],
    adapter=None,
    dropout_rng: np.random.Generator | None = None,
) -> Matrix:
    """Raw next-token logits, one row per position (temperature applied downstream)."""
    config = params.config
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size > config.max_seq_len:
        raise SequenceLengthError(
            f"sequence length {ids.size} exceeds max_seq_len {config.max_seq_len}"
        )
    h = embed(params, ids)
    for index, layer in enumerate(params.layers):
        h = attention_block(h, layer, config, adapter, index, dropout_rng)
        h = ffn_block(h, layer, config, adapter, index, dropout_rng)
    h = nm.rmsnorm_rows(h, params.g_out, config.eps)
    return nm.add(nm.matmul(h, nm.transpose(params.w_out)), params.b_out)


def output_distribution(logits_row: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """softmax(logits / beta) over the vocabulary; beta controls sharpness."""
    if beta <= 0:
        raise ConfigError(f"temperature beta must be > 0, got {beta}")
    row = np.asarray(logits_row, dtype=np.float64).reshape(-1)
    shifted = (row - row.max()) / beta
    expd = np.exp(shifted)
    return expd / expd.sum()


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    config = {name: repr(getattr(params.config, name)) for name in _CONFIG_FIELDS}
    tensors = {name: mat.data for name, mat in params.named_tensors().items()}
    tensorfile.write_tensor_file(path, config, tensors)


def load_checkpoint(path: str | Path) -> ModelParams:
    raw_config, tensors = tensorfile.read_tensor_file(path)
    kwargs = {}
    for name in _CONFIG_FIELDS:
        if name not in raw_config:
            raise ConfigError(f"{path}: checkpoint config missing '{name}'")
        value = raw_config[name]
        kwargs[name] = int(value) if name not in ("rope_base", "eps", "init_std") else float(value)
    config = ModelConfig(**kwargs)

    def grab(name: str, shape: tuple[int, int]) -> Matrix:
        if name not in tensors:
            raise ConfigError(f"{path}: checkpoint missing tensor '{name}'")
        arr = tensors[name]
        if arr.shape != shape:
            raise ShapeError(f"{path}: tensor '{name}' has shape {arr.shape}, expected {shape}")
        return Matrix(arr)

    half_ff = config.d_ff // 2
    layers = [
        LayerParams(
            w_q=grab(f"layer.{i}.w_q", (config.d, config.d)),
            w_k=grab(f"layer.{i}.w_k", (config.d, config.d)),
            w_v=grab(f"layer.{i}.w_v", (config.d, config.d)),
            w_o=grab(f"layer.{i}.w_o", (config.d, config.d)),
            w_up=grab(f"layer.{i}.w_up", (config.d, half_ff)),
            w_gate=grab(f"layer.{i}.w_gate", (config.d, half_ff)),
            w_down=grab(f"layer.{i}.w_down", (half_ff, config.d)),
            g_attn=grab(f"layer.{i}.g_attn", (1, config.d)),
            g_ffn=grab(f"layer.{i}.g_ffn", (1, config.d)),
        )
        for i in range(config.n_layers)
    ]
    return ModelParams(
        config=config,
        embedding=grab("embedding", (config.vocab_size, config.d)),
        layers=layers,
        g_out=grab("g_out", (1, config.d)),
        w_out=grab("w_out", (config.vocab_size, config.d)),
        b_out=grab("b_out", (1, config.vocab_size)),
    )
