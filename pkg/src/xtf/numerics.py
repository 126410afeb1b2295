"""Dense float64 arrays plus a recording tape for reverse-mode gradients.

Everything here is deliberately small: the op set is exactly what the tiny
decoder model needs, all values are float64, and every op is a pure function
of its inputs so repeated calls are bitwise identical. Gradients come from
replaying a GradientTape backwards; `finite_diff_check` is the independent
referee for the whole chain.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's precondition."""


class ContractError(ValueError):
    """An API contract was violated (e.g. backward on a non-scalar loss)."""


class NonFiniteError(FloatingPointError):
    """A NaN/Inf appeared where only finite values are allowed."""


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A C-contiguous float64 array, optionally tracked by the active tape.

    `shape` is the list of dimension sizes and `data` the row-major flat
    view, so product(shape) == len(data) by construction.
    """

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = _as_f64(value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def copy(self) -> "Tensor":
        return Tensor(self.value.copy())

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.value)):
            raise NonFiniteError(f"{what} contains non-finite values")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape})"


class GradientTape:
    """Single-writer record of executed ops.

    Used as a context manager; ops executed inside the block append
    (output, inputs, backward_fn) records. Replaying the records in reverse
    yields one gradient per requested tensor, each with the tensor's shape.
    """

    _active = threading.local()

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    # -- active-tape plumbing -------------------------------------------------
    def __enter__(self) -> "GradientTape":
        stack = getattr(GradientTape._active, "stack", None)
        if stack is None:
            stack = []
            GradientTape._active.stack = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        GradientTape._active.stack.pop()

    @staticmethod
    def current() -> "GradientTape | None":
        stack = getattr(GradientTape._active, "stack", None)
        return stack[-1] if stack else None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._records.append((out, inputs, backward))

    def __len__(self) -> int:
        return len(self._records)

    # -- reverse pass ----------------------------------------------------------
    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradient of the scalar `loss` w.r.t. each tensor in `params`."""
        if loss.value.shape != ():
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.array(1.0)}
        for out, inputs, backward in reversed(self._records):
            g_out = grads.get(id(out))
            if g_out is None:
                continue
            g_inputs = backward(g_out)
            for tensor, g in zip(inputs, g_inputs):
                if g is None:
                    continue
                acc = grads.get(id(tensor))
                grads[id(tensor)] = g if acc is None else acc + g
        out = []
        for p in params:
            g = grads.get(id(p))
            out.append(g.reshape(p.value.shape) if g is not None else np.zeros_like(p.value))
        return out


def backward(loss: Tensor, tape: GradientTape, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Replay `tape` in reverse; one gradient array per tensor in `params`."""
    return tape.gradients(loss, params)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = GradientTape.current()
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


# custom fused ops elsewhere register their backward through this
record_op = _record


# ---------------------------------------------------------------------------
# Op set. Each op computes the float64 forward value and, when a tape is
# active, records a closure producing input gradients from the output grad.
# ---------------------------------------------------------------------------


def constant(value) -> Tensor:
    return Tensor(value)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may be a trailing-axes broadcast (bias add)."""
    if a.shape != b.shape and a.shape[-b.ndim:] != b.shape:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.value + b.value)

    def bwd(g):
        gb = g
        if b.shape != a.shape:
            reduce_axes = tuple(range(g.ndim - b.ndim))
            gb = g.sum(axis=reduce_axes)
        return g, gb

    return _record(out, (a, b), bwd)


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable array (e.g. an attention mask)."""
    out = Tensor(a.value + const)
    return _record(out, (a,), lambda g: (g,))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.value * c)
    return _record(out, (a,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.value * b.value)
    return _record(out, (a, b), lambda g: (g * b.value, g * a.value))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D, or 3-D with matching leading (batch) dimension."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: need matching 2-D or 3-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.value @ b.value)

    def bwd(g):
        return g @ b.value.swapaxes(-1, -2), a.value.swapaxes(-1, -2) @ g

    return _record(out, (a, b), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.value.transpose(axes)))
    inv = np.argsort(axes)
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.value.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.value.shape),))


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `table[ids]`; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.intp)
    out = Tensor(table.value[ids])

    def bwd(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(out, (table,), bwd)


def slice_rows(a: Tensor, n: int) -> Tensor:
    out = Tensor(a.value[:n])

    def bwd(g):
        ga = np.zeros_like(a.value)
        ga[:n] = g
        return (ga,)

    return _record(out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stabilized softmax along `axis`; the canonical implementation shared
    by the model and all scoring code."""
    a.check_finite("softmax input")
    out = Tensor(softmax_value(a.value, axis=axis))

    def bwd(g):
        w = out.value
        return (w * (g - np.sum(w * g, axis=axis, keepdims=True)),)

    return _record(out, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a.check_finite("log_softmax input")
    out = Tensor(log_softmax_value(a.value, axis=axis))

    def bwd(g):
        w = np.exp(out.value)
        return (g - w * np.sum(g, axis=axis, keepdims=True),)

    return _record(out, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layer_norm: gain/bias must match the last axis")
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.value + bias.value)

    def bwd(g):
        n = x.shape[-1]
        g_xhat = g * gain.value
        gx = inv * (
            g_xhat
            - g_xhat.mean(axis=-1, keepdims=True)
            - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record(out, (x, gain, bias), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Smooth (tanh-form) GELU; smoothness keeps finite-difference checks tight."""
    x = a.value
    x_sq = x * x
    inner = _GELU_C * (x + 0.044715 * x_sq * x)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x_sq)
        gx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * gx,)

    return _record(out, (a,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map x @ w + b for 2-D x."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {x.shape} @ {w.shape} + {b.shape}")
    out = Tensor(x.value @ w.value + b.value)

    def bwd(g):
        return g @ w.value.T, x.value.T @ g, g.sum(axis=0)

    return _record(out, (x, w, b), bwd)


def embed_positions(table: Tensor, positions: Tensor, ids: np.ndarray) -> Tensor:
    """Fused token-plus-position embedding lookup for a length-n sequence."""
    ids = np.asarray(ids, dtype=np.intp)
    n = ids.size
    out = Tensor(table.value[ids] + positions.value[:n])

    def bwd(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids, g)
        gp = np.zeros_like(positions.value)
        gp[:n] = g
        return gt, gp

    return _record(out, (table, positions), bwd)


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Fused two-layer block with the smooth (tanh-form) GELU between."""
    pre = x.value @ w1.value + b1.value
    pre_sq = pre * pre
    inner = _GELU_C * (pre + 0.044715 * pre_sq * pre)
    t = np.tanh(inner)
    hidden = 0.5 * pre * (1.0 + t)
    out = Tensor(hidden @ w2.value + b2.value)

    def bwd(g):
        g_hidden = g @ w2.value.T
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * pre_sq)
        g_pre = g_hidden * (0.5 * (1.0 + t) + 0.5 * pre * (1.0 - t * t) * d_inner)
        return (
            g_pre @ w1.value.T,
            x.value.T @ g_pre,
            g_pre.sum(axis=0),
            hidden.T @ g,
            g.sum(axis=0),
        )

    return _record(out, (x, w1, b1, w2, b2), bwd)


def pick(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Select entries a[rows[i], cols[i]] into a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = Tensor(a.value[rows, cols])

    def bwd(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _record(out, (a,), bwd)


def sequence_nll(logits: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Fused sum of -log softmax(logits[row])[col] over (row, col) pairs."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    logits.check_finite("sequence_nll input")
    used = logits.value[rows]
    m = used.max(axis=-1, keepdims=True)
    shifted = used - m
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    picked = shifted[np.arange(rows.size), cols] - log_z[:, 0]
    out = Tensor(-float(picked.sum()))

    def bwd(g):
        probs = np.exp(shifted - log_z)
        probs[np.arange(rows.size), cols] -= 1.0
        g_logits = np.zeros_like(logits.value)
        np.add.at(g_logits, rows, g * probs)
        return (g_logits,)

    return _record(out, (logits,), bwd)


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(a * weights) with constant weights."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: weights shape {w.shape} != {a.shape}")
    out = Tensor(float(np.sum(a.value * w)))
    return _record(out, (a,), lambda g: (g * w,))


def total(a: Tensor) -> Tensor:
    """Scalar sum of all entries."""
    out = Tensor(float(a.value.sum()))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


# ---------------------------------------------------------------------------
# Plain-array helpers shared across modules (no tape involvement).
# ---------------------------------------------------------------------------


def softmax_value(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stabilized softmax on a raw array."""
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax_value(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| / (|analytic| + |numeric| + 1e-12)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.abs(a) + np.abs(n) + 1e-12
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    analytic: Sequence[np.ndarray] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    `loss_fn` must rebuild the loss from the current values of `params`
    (it is re-run with individual entries perturbed by ±step). Passing
    `analytic` skips the tape pass and checks the supplied gradients
    instead, which lets tests feed deliberately corrupted gradients.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    if analytic is None:
        with GradientTape() as tape:
            loss = loss_fn()
        analytic = tape.gradients(loss, params)

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        g_flat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().value)
            flat[i] = orig - step
            down = float(loss_fn().value)
            flat[i] = orig
            central = (up - down) / (2.0 * step)
            err = abs(g_flat[i] - central) / (abs(g_flat[i]) + abs(central) + 1e-12)
            worst = max(worst, err)
    return worst
