"""Low-rank adapter algebra and placement over frozen transformer projections.

Each adapted target W (stored in the x @ W orientation, d_in x d_out) gains a
trainable pair A (r x d_in) and B (d_out x r); the effective weight is
W + (alpha/r) * (B A)^T and the forward path computes the equivalent
x @ A^T @ B^T without materializing the delta. The backbone stays frozen:
only A and B carry requires_grad.
"""

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensorfile
from .errors import ConfigError, ShapeError, StateError
from .model import LayerParams, ModelConfig, ModelParams
from .numerics import Matrix

TARGETS = ("q", "k", "v", "o", "up", "gate", "down")
DEFAULT_TARGETS = ("q", "v")  # attention query/value placement
ALL_TARGETS = TARGETS  # full attention + feed-forward placement


@dataclass(frozen=True)
class LoraConfig:
    r: int = 32
    alpha: float = 32.0
    dropout: float = 0.0
    targets: tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError(f"rank r must be >= 1, got {self.r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not self.targets:
            raise ConfigError("at least one adapter target is required")
        unknown = [t for t in self.targets if t not in TARGETS]
        if unknown:
            raise ConfigError(f"unknown adapter target(s) {unknown}; valid: {TARGETS}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.r


def target_dims(target: str, config: ModelConfig) -> tuple[int, int]:
    """(d_in, d_out) of the stacked projection named by ``target``."""
    half_ff = config.d_ff // 2
    table = {
        "q": (config.d, config.d),
        "k": (config.d, config.d),
        "v": (config.d, config.d),
        "o": (config.d, config.d),
        "up": (config.d, half_ff),
        "gate": (config.d, half_ff),
        "down": (half_ff, config.d),
    }
    if target not in table:
        raise ConfigError(f"unknown adapter target '{target}'")
    return table[target]


class LoraAdapter:
    """Map from (layer index, target name) to the (A, B) trainable pair."""

    def __init__(self, config: LoraConfig, model_config: ModelConfig):
        self.config = config
        self.model_config = model_config
        self.tensors: dict[tuple[int, str], tuple[Matrix, Matrix]] = {}
        self.merged = False

    def entry(self, layer_index: int, target: str) -> tuple[Matrix, Matrix] | None:
        return self.tensors.get((layer_index, target))

    def named_tensors(self) -> dict[str, Matrix]:
        out: dict[str, Matrix] = {}
        for (layer_index, target), (a, b) in sorted(self.tensors.items()):
            out[f"layer.{layer_index}.{target}.A"] = a
            out[f"layer.{layer_index}.{target}.B"] = b
        return out

    def zero_grads(self) -> None:
        for a, b in self.tensors.values():
            a.zero_grad()
            b.zero_grad()


def inject(params: ModelParams, config: LoraConfig, seed: int = 0) -> LoraAdapter:
    """Attach zero-effect adapters: A ~ Gaussian(0, 1/r), B = 0.

    With B zero the adapted forward is bitwise identical to the frozen model;
    only A and B are marked trainable.
    """
    mc = params.config
    for target in config.targets:
        d_in, d_out = target_dims(target, mc)
        if config.r > min(d_in, d_out):
            raise ConfigError(
                f"rank {config.r} exceeds min dimension {min(d_in, d_out)} of target '{target}'"
            )
    rng = np.random.default_rng(seed)
    adapter = LoraAdapter(config, mc)
    for layer_index in range(mc.n_layers):
        for target in config.targets:
            d_in, d_out = target_dims(target, mc)
            a = Matrix(rng.normal(0.0, 1.0 / config.r, size=(config.r, d_in)), requires_grad=True)
            b = Matrix(np.zeros((d_out, config.r)), requires_grad=True)
            adapter.tensors[(layer_index, target)] = (a, b)
    return adapter


def effective_weight(
    w_frozen: np.ndarray, a: np.ndarray, b: np.ndarray, alpha: float, r: int
) -> np.ndarray:
    """W_frozen + (alpha/r) B A, with W_frozen in the d_out x d_in orientation."""
    w = np.asarray(w_frozen, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != r or b.shape[1] != r:
        raise ShapeError(f"A {a.shape} / B {b.shape} inconsistent with rank {r}")
    if w.shape != (b.shape[0], a.shape[1]):
        raise ShapeError(f"W {w.shape} does not match B A = {(b.shape[0], a.shape[1])}")
    return w + (alpha / r) * (b @ a)


def trainable_parameter_count(config: LoraConfig, model_config: ModelConfig) -> int:
    """Sum over layers and targets of r * (d_in + d_out)."""
    per_layer = sum(
        config.r * sum(target_dims(target, model_config)) for target in config.targets
    )
    return model_config.n_layers * per_layer


_TARGET_FIELD = {
    "q": "w_q",
    "k": "w_k",
    "v": "w_v",
    "o": "w_o",
    "up": "w_up",
    "gate": "w_gate",
    "down": "w_down",
}


def merge(adapter: LoraAdapter, params: ModelParams) -> ModelParams:
    """Bake every adapter delta into a copy of the backbone weights.

    The adapter is single-use: a second merge would double the delta, so it
    is refused once the merged flag is set.
    """
    if adapter.merged:
        raise StateError("adapter already merged; merging twice would double the delta")
    if adapter.model_config != params.config:
        raise ShapeError("adapter was built for a different model configuration")
    scaling = adapter.config.scaling
    new_layers = []
    for layer_index, layer in enumerate(params.layers):
        updates: dict[str, Matrix] = {}
        for target, field in _TARGET_FIELD.items():
            entry = adapter.entry(layer_index, target)
            if entry is None:
                continue
            a, b = entry
            frozen: Matrix = getattr(layer, field)
            # delta in x @ W orientation: ((alpha/r) B A)^T = (alpha/r) A^T B^T
            updates[field] = Matrix(frozen.data + scaling * (a.data.T @ b.data.T))
        new_layers.append(replace(layer, **updates) if updates else layer)
    adapter.merged = True
    return ModelParams(
        config=params.config,
        embedding=params.embedding,
        layers=new_layers,
        g_out=params.g_out,
        w_out=params.w_out,
        b_out=params.b_out,
    )


# ---------------------------------------------------------------------------
# adapter io (same binary container as checkpoints)
# ---------------------------------------------------------------------------


def save_adapter(adapter: LoraAdapter, path: str | Path) -> None:
    config = {
        "r": repr(adapter.config.r),
        "alpha": repr(adapter.config.alpha),
        "dropout": repr(adapter.config.dropout),
        "targets": ",".join(adapter.config.targets),
    }
    tensors = {name: mat.data for name, mat in adapter.named_tensors().items()}
    tensorfile.write_tensor_file(path, config, tensors)


def load_adapter(path: str | Path, model_config: ModelConfig) -> LoraAdapter:
    raw, tensors = tensorfile.read_tensor_file(path)
    try:
        config = LoraConfig(
            r=int(raw["r"]),
            alpha=float(raw["alpha"]),
            dropout=float(raw["dropout"]),
            targets=tuple(raw["targets"].split(",")),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: adapter config missing {exc}") from exc
    adapter = LoraAdapter(config, model_config)
    for layer_index in range(model_config.n_layers):
        for target in config.targets:
            d_in, d_out = target_dims(target, model_config)
            try:
                a = tensors[f"layer.{layer_index}.{target}.A"]
                b = tensors[f"layer.{layer_index}.{target}.B"]
            except KeyError as exc:
                raise ConfigError(f"{path}: adapter missing tensor {exc}") from exc
            if a.shape != (config.r, d_in) or b.shape != (d_out, config.r):
                raise ShapeError(f"{path}: adapter tensors for layer {layer_index} '{target}' have wrong shape")
            adapter.tensors[(layer_index, target)] = (
                Matrix(a, requires_grad=True),
                Matrix(b, requires_grad=True),
            )
    return adapter
