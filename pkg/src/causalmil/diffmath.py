"""Dense 2-D float64 math with a reverse-mode gradient tape.

Every value is a row-major ``rows x cols`` matrix of 64-bit floats;
vectors are ``1 x n``. While a :class:`GradTape` is active (as a context
manager), each operation appends an adjoint closure to the tape and
:func:`backward` replays them newest-first, accumulating gradients into
every reachable input's ``grad`` slot. Without an active tape the same
functions are plain numpy computations that build no graph, which is
what evaluation-mode forwards use.

Broadcasting is deliberately limited to the three 2-D cases the models
need (equal shapes, 1x1 scalars, and row/column vectors against a
matrix); anything else raises :class:`~causalmil.errors.DimensionError`.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, DomainError, TapeError

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "tensor",
    "zeros",
    "uniform_init",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "smul",
    "neg",
    "tanh",
    "sigmoid",
    "gelu",
    "layer_norm",
    "softmax_rows",
    "masked_softmax_rows",
    "logsumexp_row",
    "dropout",
    "sum_all",
    "mean_all",
    "sum_sq",
    "cross_entropy",
    "cross_entropy_mean",
    "concat_cols",
    "stack_rows",
    "row",
    "pick",
    "take_cols",
    "finite_difference_grads",
    "gradcheck",
    "GradcheckReport",
]

_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715

_active_tape: "GradTape | None" = None


class Tensor:
    """A ``rows x cols`` float64 matrix, optionally recorded on a tape."""

    __slots__ = ("data", "grad", "_parents", "_backprop")

    def __init__(self, data) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backprop: Callable[[np.ndarray], None] | None = None

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
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match tensor shape {self.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class GradTape:
    """Ordered record of operations, replayable for adjoints.

    Use as a context manager around a forward pass; only one tape may be
    active at a time. A fresh tape per training step keeps steps isolated.
    """

    def __init__(self) -> None:
        self._nodes: list[Tensor] = []
        self._ids: set[int] = set()

    def __enter__(self) -> "GradTape":
        global _active_tape
        if _active_tape is not None:
            raise TapeError("a gradient tape is already active")
        _active_tape = self
        return self

    def __exit__(self, *exc) -> bool:
        global _active_tape
        _active_tape = None
        return False

    def _record(self, t: Tensor) -> None:
        self._nodes.append(t)
        self._ids.add(id(t))

    def __len__(self) -> int:
        return len(self._nodes)

    def clear(self) -> None:
        """Drop all records and break parent links so graphs can be collected."""
        for t in self._nodes:
            t._parents = ()
            t._backprop = None
        self._nodes.clear()
        self._ids.clear()


def backward(tape: GradTape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(input) into ``grad`` for every input of ``loss``.

    The loss must be a 1x1 tensor recorded on ``tape``. Each tape is meant
    to be replayed once; a second call would double-count gradients.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward expects a scalar loss, got {loss.shape}")
    if id(loss) not in tape._ids:
        raise TapeError("loss tensor is detached from this tape")
    loss.accumulate_grad(np.ones((1, 1)))
    for node in reversed(tape._nodes):
        if node.grad is None or node._backprop is None:
            continue
        node._backprop(node.grad)


def tensor(data) -> Tensor:
    """Wrap data in a constant (leaf) tensor."""
    return Tensor(data)


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)))


def uniform_init(rng: np.random.Generator, rows: int, cols: int, fan_in: int) -> Tensor:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) leaf tensor."""
    if fan_in <= 0:
        raise ConfigError(f"fan_in must be positive, got {fan_in}")
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backprop) -> Tensor:
    out = Tensor(data)
    if _active_tape is not None:
        out._parents = parents
        out._backprop = backprop
        _active_tape._record(out)
    return out


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, int]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    for s, o in ((sa, sb), (sb, sa)):
        if s == (1, 1):
            return o
    if sa[0] == 1 and sb[1] == sa[1]:
        return sb
    if sb[0] == 1 and sa[1] == sb[1]:
        return sa
    if sa[1] == 1 and sb[0] == sa[0]:
        return sb
    if sb[1] == 1 and sa[0] == sb[0]:
        return sa
    raise DimensionError(f"shapes {sa} and {sb} do not broadcast")


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    if shape[0] == 1 and shape[1] == g.shape[1]:
        return g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and shape[0] == g.shape[0]:
        return g.sum(axis=1, keepdims=True)
    raise ContractError(f"cannot reduce gradient {g.shape} to {shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``; inner dimensions must agree."""
    if a.cols != b.rows:
        raise DimensionError(f"matmul mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backprop(g: np.ndarray) -> None:
        a.accumulate_grad(g @ b.data.T)
        b.accumulate_grad(a.data.T @ g)

    return _node(out_data, (a, b), backprop)


def transpose(a: Tensor) -> Tensor:
    def backprop(g: np.ndarray) -> None:
        a.accumulate_grad(g.T)

    return _node(a.data.T.copy(), (a,), backprop)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    out_data = a.data + b.data

    def backprop(g: np.ndarray) -> None:
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backprop)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    out_data = a.data - b.data

    def backprop(g: np.ndarray) -> None:
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _node(out_data, (a, b), backprop)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with the same limited broadcasting as add."""
    _broadcast_shape(a, b)
    out_data = a.data * b.data

    def backprop(g: np.ndarray) -> None:
        a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backprop)


def smul(a: Tensor, c: float) -> Tensor:
    """Scale by a python float constant (no gradient for the constant)."""
    c = float(c)

    def backprop(g: np.ndarray) -> None:
        a.accumulate_grad(c * g)

    return _node(c * a.data, (a,), backprop)


def neg(a: Tensor) -> Tensor:
    return smul(a, -1.0)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backprop(g: np.ndarray) -> None:
        a.accumulate_grad(g * (1.0 - y * y))

    return _node(y, (a,), backprop)


def sigmoid(a: Tensor) -> Tensor:
    # Numerically stable split over sign.
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backprop(g: np.ndarray) -> None:
        a.accumulate_grad(g * y * (1.0 - y))

    return _node(y, (a,), backprop)


def gelu(a: Tensor) -> Tensor:
    """GELU via the tanh approximation 0.5*x*(1 + tanh(c0*(x + c1*x^3)))."""
    x = a.data
    inner = _GELU_C0 * (x + _GELU_C1 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backprop(g: np.ndarray) -> None:
        d_inner = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
        deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        a.accumulate_grad(g * deriv)

    return _node(y, (a,), backprop)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with learned gain and bias.

    Each row is normalized by its own mean and population variance, then
    scaled and shifted: ``y = gain * (x - mu) / sqrt(var + eps) + bias``.
    """
    n = x.cols
    if n == 0:
        raise DomainError("layer_norm over an empty vector")
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise DimensionError(
            f"layer_norm gain/bias must be 1x{n}, got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gain.data + bias.data

    def backprop(g: np.ndarray) -> None:
        gain.accumulate_grad((g * xhat).sum(axis=0, keepdims=True))
        bias.accumulate_grad(g.sum(axis=0, keepdims=True))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        x.accumulate_grad((dxhat - m1 - xhat * m2) * inv)

    return _node(y, (x, gain, bias), backprop)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax; stable via per-row max shift."""
    if x.cols == 0:
        raise DomainError("softmax over an empty vector")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backprop(g: np.ndarray) -> None:
        dot = (g * y).sum(axis=1, keepdims=True)
        x.accumulate_grad(y * (g - dot))

    return _node(y, (x,), backprop)


def masked_softmax_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax over the entries where ``mask`` is True.

    Masked-out entries are exactly 0.0 in the output and receive no
    gradient. A row with no allowed entry violates the self-loop
    contract and raises.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} != tensor shape {x.shape}")
    if not mask.any(axis=1).all():
        raise ContractError("softmax row with every entry masked out")
    neg_fill = np.where(mask, x.data, -np.inf)
    shifted = neg_fill - neg_fill.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    # The outer where keeps masked entries at exactly 0.0 even when the
    # row sum is non-finite (0/nan is nan); allowed entries then carry
    # the non-finite values onward to the loss-level finiteness checks.
    y = np.where(mask, e / e.sum(axis=1, keepdims=True), 0.0)

    def backprop(g: np.ndarray) -> None:
        # y is exactly zero where masked, which also zeroes the gradient there.
        dot = (g * y).sum(axis=1, keepdims=True)
        x.accumulate_grad(y * (g - dot))

    return _node(y, (x,), backprop)


def logsumexp_row(x: Tensor) -> Tensor:
    """log(sum(exp(x))) of a 1 x n row, stable via max shift."""
    if x.rows != 1 or x.cols == 0:
        raise DimensionError(f"logsumexp_row expects a nonempty 1 x n row, got {x.shape}")
    m = x.data.max()
    e = np.exp(x.data - m)
    total = e.sum()
    y = np.array([[m + math.log(total)]])

    def backprop(g: np.ndarray) -> None:
        x.accumulate_grad(g[0, 0] * (e / total))

    return _node(y, (x,), backprop)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train-mode keeps entries with prob 1-rate and
    scales by 1/(1-rate) so expectations match; eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    factor = keep * scale

    def backprop(g: np.ndarray) -> None:
        x.accumulate_grad(g * factor)

    return _node(x.data * factor, (x,), backprop)


def sum_all(x: Tensor) -> Tensor:
    def backprop(g: np.ndarray) -> None:
        x.accumulate_grad(np.full(x.shape, g[0, 0]))

    return _node(np.array([[x.data.sum()]]), (x,), backprop)


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size

    def backprop(g: np.ndarray) -> None:
        x.accumulate_grad(np.full(x.shape, g[0, 0] / size))

    return _node(np.array([[x.data.mean()]]), (x,), backprop)


def sum_sq(x: Tensor) -> Tensor:
    """Sum of squared entries (squared Frobenius/L2 norm)."""

    def backprop(g: np.ndarray) -> None:
        x.accumulate_grad(2.0 * g[0, 0] * x.data)

    return _node(np.array([[float((x.data**2).sum())]]), (x,), backprop)


def _check_label(label: int, n_classes: int) -> int:
    label = int(label)
    if not 0 <= label < n_classes:
        raise DomainError(f"label {label} outside [0, {n_classes})")
    return label


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Softmax cross-entropy of a 1 x C logit row against a class index."""
    if logits.rows != 1:
        raise DimensionError(f"cross_entropy expects a 1 x C row, got {logits.shape}")
    label = _check_label(label, logits.cols)
    z = logits.data - logits.data.max()
    e = np.exp(z)
    total = e.sum()
    loss = math.log(total) - z[0, label]
    p = e / total

    def backprop(g: np.ndarray) -> None:
        d = p.copy()
        d[0, label] -= 1.0
        logits.accumulate_grad(g[0, 0] * d)

    return _node(np.array([[loss]]), (logits,), backprop)


def cross_entropy_mean(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean softmax cross-entropy over rows of a K x C logit matrix."""
    labels_arr = np.asarray(labels, dtype=int)
    if labels_arr.ndim != 1 or labels_arr.size != logits.rows:
        raise DimensionError(
            f"labels must be a length-{logits.rows} sequence, got shape {labels_arr.shape}"
        )
    for lab in labels_arr:
        _check_label(lab, logits.cols)
    k = logits.rows
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    totals = e.sum(axis=1, keepdims=True)
    picked = z[np.arange(k), labels_arr]
    loss = float((np.log(totals[:, 0]) - picked).mean())
    p = e / totals

    def backprop(g: np.ndarray) -> None:
        d = p.copy()
        d[np.arange(k), labels_arr] -= 1.0
        logits.accumulate_grad(g[0, 0] * d / k)

    return _node(np.array([[loss]]), (logits,), backprop)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along columns; row counts must agree."""
    if a.rows != b.rows:
        raise DimensionError(f"concat_cols row mismatch: {a.shape} vs {b.shape}")
    na = a.cols

    def backprop(g: np.ndarray) -> None:
        a.accumulate_grad(g[:, :na])
        b.accumulate_grad(g[:, na:])

    return _node(np.concatenate([a.data, b.data], axis=1), (a, b), backprop)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 1 x n rows into a len(parts) x n matrix."""
    if not parts:
        raise DimensionError("stack_rows of an empty sequence")
    n = parts[0].cols
    for p in parts:
        if p.shape != (1, n):
            raise DimensionError(f"stack_rows expects 1 x {n} rows, got {p.shape}")
    parts = tuple(parts)

    def backprop(g: np.ndarray) -> None:
        for i, p in enumerate(parts):
            p.accumulate_grad(g[i : i + 1, :])

    return _node(np.concatenate([p.data for p in parts], axis=0), parts, backprop)


def row(x: Tensor, i: int) -> Tensor:
    """Select row i as a 1 x n tensor."""
    if not 0 <= i < x.rows:
        raise DimensionError(f"row {i} outside 0..{x.rows - 1}")

    def backprop(g: np.ndarray) -> None:
        full = np.zeros(x.shape)
        full[i : i + 1, :] = g
        x.accumulate_grad(full)

    return _node(x.data[i : i + 1, :].copy(), (x,), backprop)


def pick(x: Tensor, i: int, j: int) -> Tensor:
    """Select entry (i, j) as a 1 x 1 tensor."""
    if not (0 <= i < x.rows and 0 <= j < x.cols):
        raise DimensionError(f"index ({i}, {j}) outside shape {x.shape}")

    def backprop(g: np.ndarray) -> None:
        full = np.zeros(x.shape)
        full[i, j] = g[0, 0]
        x.accumulate_grad(full)

    return _node(np.array([[x.data[i, j]]]), (x,), backprop)


def take_cols(x: Tensor, idx: Sequence[int]) -> Tensor:
    """Select a subset of columns, in the given order."""
    idx_arr = np.asarray(idx, dtype=int)
    if idx_arr.ndim != 1 or idx_arr.size == 0:
        raise DimensionError("take_cols needs a nonempty 1-D index list")
    if (idx_arr < 0).any() or (idx_arr >= x.cols).any():
        raise DimensionError(f"column index outside 0..{x.cols - 1}")

    def backprop(g: np.ndarray) -> None:
        full = np.zeros(x.shape)
        np.add.at(full, (slice(None), idx_arr), g)
        x.accumulate_grad(full)

    return _node(x.data[:, idx_arr].copy(), (x,), backprop)


# ---------------------------------------------------------------------------
# Gradient checking

class GradcheckReport:
    """Worst relative error per parameter, plus an overall verdict."""

    def __init__(self, rtol: float) -> None:
        self.rtol = rtol
        self.per_param: dict[str, float] = {}
        self.max_rel_error = 0.0
        self.checked = 0

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.rtol

    def __repr__(self) -> str:
        return (
            f"GradcheckReport(ok={self.ok}, max_rel_error={self.max_rel_error:.3e},"
            f" checked={self.checked})"
        )


def finite_difference_grads(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-4,
) -> dict[str, np.ndarray]:
    """Central-difference gradients of ``loss_fn()`` for each named parameter.

    ``loss_fn`` must rebuild its forward pass from the live parameter
    values on every call; it is evaluated tape-free, so only the scalar
    loss value is used.
    """
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_fn().item()
            flat[i] = keep - h
            down = loss_fn().item()
            flat[i] = keep
            gflat[i] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-4,
    rtol: float = 1e-4,
    min_grad: float = 1e-8,
) -> GradcheckReport:
    """Compare tape gradients of ``loss_fn`` against central differences.

    Entries where both gradients are below ``min_grad`` in magnitude are
    skipped; the rest must agree to within ``rtol`` relative error.
    """
    for p in params.values():
        p.grad = None
    with GradTape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    tape_grads = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    for p in params.values():
        p.grad = None
    fd_grads = finite_difference_grads(loss_fn, params, h=h)

    report = GradcheckReport(rtol)
    for name, p in params.items():
        gt, gf = tape_grads[name], fd_grads[name]
        scale = np.maximum(np.abs(gt), np.abs(gf))
        gated = scale > min_grad
        report.checked += int(gated.sum())
        if not gated.any():
            report.per_param[name] = 0.0
            continue
        rel = np.abs(gt - gf)[gated] / scale[gated]
        worst = float(rel.max())
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
