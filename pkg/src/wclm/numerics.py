"""Dense-matrix substrate with reverse-mode automatic differentiation.

Every value is a 2-D row-major float64 array wrapped in a :class:`Matrix`.
Operations executed while a :class:`Tape` is active are recorded in creation
order; since inputs always precede outputs, that order is topological and the
backward sweep is a single reversed pass that visits each node exactly once,
summing gradient contributions over consumers.

With no tape active, the same operations run as plain numpy computations
(inference mode). Tapes are thread-local: recording is confined to the thread
that opened the tape, and tape-less forwards on other threads are unaffected.
"""

import threading
from collections.abc import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_LOCAL = threading.local()


def _active_tape():
    return getattr(_LOCAL, "tape", None)


class Matrix:
    """A rows x cols float64 matrix, optionally participating in autodiff.

    ``requires_grad`` on a leaf marks it as a differentiation target; on a
    recorded node it means gradients must flow through. ``grad`` accumulates
    contributions during :meth:`Tape.backward` and is never cleared
    implicitly.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Matrix requires 2-D data, got ndim={arr.ndim}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() requires a 1x1 matrix, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations for one backward pass."""

    def __init__(self):
        self._nodes: list[Matrix] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise ConfigError("a tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _LOCAL.tape = None
        return False

    def backward(self, loss: Matrix) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable grad-requiring leaf."""
        if loss.shape != (1, 1):
            raise ShapeError(f"backward requires a scalar 1x1 loss, got {loss.shape}")
        if loss.grad is None:
            loss.grad = np.zeros((1, 1))
        loss.grad += 1.0
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def accumulate_grad(target: Matrix, contribution: np.ndarray) -> None:
    if not target.requires_grad:
        return
    if target.grad is None:
        target.grad = np.zeros_like(target.data)
    target.grad += contribution


def record(
    data: np.ndarray,
    parents: Sequence[Matrix],
    backward: Callable[[np.ndarray], None],
) -> Matrix:
    """Create an op output, recording it when a tape is active.

    ``backward`` receives the output gradient and must push contributions to
    the parents via gradient accumulation. Fused operations defined in other
    modules build their nodes through this hook.
    """
    out = Matrix(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward
        tape._nodes.append(out)
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product a @ b."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            accumulate_grad(a, g @ b.data.T)
        if b.requires_grad:
            accumulate_grad(b, a.data.T @ g)

    return record(out_data, (a, b), backward)


def transpose(a: Matrix) -> Matrix:
    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, g.T)

    return record(a.data.T.copy(), (a,), backward)


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum; b may be a 1 x cols row vector broadcast over rows."""
    broadcast = b.rows == 1 and a.rows != 1
    if a.shape != b.shape and not (broadcast and a.cols == b.cols):
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")

    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, g)
        if b.requires_grad:
            accumulate_grad(b, g.sum(axis=0, keepdims=True) if broadcast else g)

    return record(a.data + b.data, (a, b), backward)


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise (Hadamard) product of same-shape matrices."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            accumulate_grad(a, g * b.data)
        if b.requires_grad:
            accumulate_grad(b, g * a.data)

    return record(a.data * b.data, (a, b), backward)


def scale(a: Matrix, factor: float) -> Matrix:
    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, g * factor)

    return record(a.data * factor, (a,), backward)


def mul_const(a: Matrix, const: np.ndarray) -> Matrix:
    """Elementwise product with a non-differentiated constant array."""

    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, g * const)

    return record(a.data * const, (a,), backward)


def add_const(a: Matrix, const: np.ndarray) -> Matrix:
    """Elementwise sum with a non-differentiated constant array.

    The constant may contain the -inf mask sentinel; gradients pass through
    unchanged (masked positions are zeroed downstream by softmax_rows).
    """

    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, g)

    return record(a.data + const, (a,), backward)


def silu(a: Matrix) -> Matrix:
    """SiLU activation x * sigmoid(x), numerically stable at both tails."""
    x = a.data
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    sig[~pos] = ex / (1.0 + ex)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, g * (sig * (1.0 + x * (1.0 - sig))))

    return record(x * sig, (a,), backward)


def rmsnorm_rows(a: Matrix, gamma: Matrix, eps: float = 1e-6) -> Matrix:
    """Row-wise RMS normalization scaled by gamma (no mean subtraction).

    Each row v maps to v / sqrt(mean(v_i^2) + eps) * gamma.
    """
    if eps < 0:
        raise ConfigError(f"rmsnorm eps must be >= 0, got {eps}")
    if gamma.shape != (1, a.cols):
        raise ShapeError(f"gamma shape {gamma.shape} does not match 1x{a.cols}")
    x = a.data
    d = a.cols
    inv = 1.0 / np.sqrt((x * x).mean(axis=1, keepdims=True) + eps)
    normed = x * inv

    def backward(g: np.ndarray) -> None:
        gg = g * gamma.data
        if a.requires_grad:
            # d/dx of x_j * inv: inv on the diagonal, -(inv^3/d) x_j x_k off it
            proj = (gg * x).sum(axis=1, keepdims=True)
            accumulate_grad(a, gg * inv - x * (inv**3) * proj / d)
        if gamma.requires_grad:
            accumulate_grad(gamma, (g * normed).sum(axis=0, keepdims=True))

    return record(normed * gamma.data, (a, gamma), backward)


def softmax_rows(m: Matrix, temperature: float = 1.0) -> Matrix:
    """Row-wise softmax of m / temperature with -inf mask support.

    Masked (-inf) entries come out as exactly zero probability; computation
    subtracts the row maximum for stability. A row that is entirely -inf has
    no valid support and raises.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    x = m.data
    if x.size == 0:
        probs = np.zeros_like(x)
        return record(probs, (m,), lambda g: accumulate_grad(m, np.zeros_like(x)))
    row_max = x.max(axis=1, keepdims=True)
    if not np.isfinite(row_max).all():
        raise NumericError("softmax row with no finite entries (all-masked or NaN)")
    expd = np.exp((x - row_max) / temperature)
    probs = expd / expd.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * probs).sum(axis=1, keepdims=True)
        accumulate_grad(m, probs * (g - inner) / temperature)

    return record(probs, (m,), backward)


def take_rows(a: Matrix, indices: np.ndarray) -> Matrix:
    """Gather rows a[indices]; backward scatter-adds into the source rows."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_rows requires a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise ShapeError(f"row index out of range for {a.rows} rows")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            contribution = np.zeros_like(a.data)
            np.add.at(contribution, idx, g)
            accumulate_grad(a, contribution)

    return record(a.data[idx], (a,), backward)


def col_slice(a: Matrix, start: int, stop: int) -> Matrix:
    if not (0 <= start < stop <= a.cols):
        raise ShapeError(f"column slice [{start}:{stop}] invalid for {a.cols} columns")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            contribution = np.zeros_like(a.data)
            contribution[:, start:stop] = g
            accumulate_grad(a, contribution)

    return record(a.data[:, start:stop].copy(), (a,), backward)


def hstack(parts: Sequence[Matrix]) -> Matrix:
    if not parts:
        raise ShapeError("hstack requires at least one matrix")
    rows = parts[0].rows
    if any(p.rows != rows for p in parts):
        raise ShapeError("hstack requires matching row counts")
    widths = [p.cols for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g: np.ndarray) -> None:
        for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
            accumulate_grad(p, g[:, j0:j1])

    return record(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def sum_all(a: Matrix) -> Matrix:
    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, np.full_like(a.data, g[0, 0]))

    return record(np.array([[a.data.sum()]]), (a,), backward)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Matrix], Matrix],
    point: Matrix,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a Matrix to a 1x1 Matrix and be finite near ``point``.
    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise ConfigError(f"step must be > 0, got {step}")
    base = point.data.copy()

    probe = Matrix(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
        if out.shape != (1, 1):
            raise ShapeError(f"grad_check requires a scalar-valued f, got {out.shape}")
        if not np.isfinite(out.data).all():
            raise NumericError("f evaluated to a non-finite value at the base point")
        tape.backward(out)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(base)

    def evaluate(x: np.ndarray) -> float:
        value = f(Matrix(x)).item()
        if not np.isfinite(value):
            raise NumericError("f evaluated to a non-finite value during differencing")
        return value

    numeric = np.zeros_like(base)
    for idx in np.ndindex(*base.shape):
        x = base.copy()
        x[idx] += step
        f_plus = evaluate(x)
        x[idx] -= 2 * step
        f_minus = evaluate(x)
        numeric[idx] = (f_plus - f_minus) / (2 * step)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
