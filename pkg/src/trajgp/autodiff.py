"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records operations define-by-run; ``backward`` replays the tape in
reverse append order and accumulates gradients for every trainable leaf.
All tensor buffers are numpy float64 arrays; matrix kernels delegate to
BLAS/LAPACK through numpy/scipy, only the differentiation bookkeeping and the
backward rules live here.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf, which is an error state."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky failed; ``minor`` is the 1-based failing leading minor index."""

    def __init__(self, minor: int, message: str):
        super().__init__(message)
        self.minor = minor


def _as_f8(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """A float64 array attached (optionally) to a tape.

    Constants carry ``tape=None`` and never receive gradients.  Leaves are
    created through :meth:`Tape.leaf`; everything else comes out of ops.
    """

    __slots__ = ("data", "tape", "tid", "requires_grad", "name")

    def __init__(self, data, tape=None, tid=None, requires_grad=False, name=None):
        self.data = _as_f8(data)
        self.tape = tape
        self.tid = tid
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        grad = ", trainable" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{grad})"

    # Operator sugar; scalars and ndarrays are lifted to constants.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return slice_(self, key)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(value) -> Tensor:
    """Wrap an array-like as an untracked constant tensor."""
    return Tensor(value)


@dataclass
class Node:
    """One recorded operation: output id, parent ids, and its backward rule."""

    op: str
    out_tid: int
    parent_tids: tuple
    backward: object  # callable(grad_out) -> tuple of parent grads (or None)


class Tape:
    """Append-only operation record; topological order equals append order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._next_tid = 0
        self.trainable: dict[int, Tensor] = {}

    def _new_tid(self) -> int:
        tid = self._next_tid
        self._next_tid += 1
        return tid

    def leaf(self, value, trainable=False, name=None) -> Tensor:
        t = Tensor(value, tape=self, tid=self._new_tid(),
                   requires_grad=trainable, name=name)
        if trainable:
            self.trainable[t.tid] = t
        return t

    def __len__(self):
        return len(self.nodes)


def _resolve_tape(operands) -> Tape | None:
    tape = None
    for t in operands:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _finish(op_name, out_data, operands, backward_fn):
    """Shared op epilogue: finiteness check, recording, output construction."""
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite values in output of op '{op_name}'")
    tape = _resolve_tape(operands)
    needs_grad = any(t.requires_grad for t in operands)
    if tape is None or not needs_grad:
        return Tensor(out_data, tape=tape)
    out = Tensor(out_data, tape=tape, tid=tape._new_tid(), requires_grad=True)
    parent_tids = tuple(t.tid if t.requires_grad else None for t in operands)
    tape.nodes.append(Node(op_name, out.tid, parent_tids, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(g, a.shape) if na else None,
                _unbroadcast(g, b.shape) if nb else None)

    return _finish("add", out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(g, a.shape) if na else None,
                _unbroadcast(-g, b.shape) if nb else None)

    return _finish("sub", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(g * bd, a.shape) if na else None,
                _unbroadcast(g * ad, b.shape) if nb else None)

    return _finish("mul", out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = a.data / b.data
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        ga = _unbroadcast(g / bd, a.shape) if na else None
        gb = _unbroadcast(-g * ad / (bd * bd), b.shape) if nb else None
        return ga, gb

    return _finish("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def pow_const(a: Tensor, exponent: float) -> Tensor:
    with np.errstate(all="ignore"):
        out = a.data ** exponent
    ad = a.data

    def bw(g):
        return (g * exponent * ad ** (exponent - 1.0),)

    return _finish("pow_const", out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _finish("exp", out, (a,), bw)


def log(a: Tensor) -> Tensor:
    with np.errstate(all="ignore"):
        out = np.log(a.data)
    ad = a.data

    def bw(g):
        return (g / ad,)

    return _finish("log", out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _finish("tanh", out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _finish("sigmoid", out, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    ad = a.data

    def bw(g):
        return (g * expit(ad),)

    return _finish("softplus", out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def bw(g):
        return (g * mask,)

    return _finish("relu", out, (a,), bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()

    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _finish("broadcast", out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    orig = a.shape

    def bw(g):
        return (g.reshape(orig),)

    return _finish("reshape", out, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            raise ValueError("transpose requires at least 2 dimensions")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _finish("transpose", out, (a,), bw)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-advanced) slicing; gradient scatters back into zeros."""
    out = a.data[key]
    if out.base is not None:
        out = out.copy()
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=np.float64)
        full[key] = g
        return (full,)

    return _finish("slice", out, (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for i in range(len(sizes)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _finish("concat", out, tuple(tensors), bw)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.data.size if axis is None else np.prod(
        [shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bw(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("mean", out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(
            f"matmul requires 2-D or batched operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape) if na else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape) if nb else None
        return ga, gb

    return _finish("matmul", out, (a, b), bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, with the usual max-shift for stability."""
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _finish("softmax", out, (a,), bw)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = np.mean(a.data, axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv
    n = a.shape[-1]

    def bw(g):
        gm = np.mean(g, axis=-1, keepdims=True)
        gx = np.mean(g * xc, axis=-1, keepdims=True)
        return (inv * (g - gm - xc * gx * inv * inv),)

    return _finish("layer_norm", out, (a,), bw)


# ---------------------------------------------------------------------------
# Distance and linear-algebra ops
# ---------------------------------------------------------------------------

def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distances between rows: out[i, j] = ||a_i - b_j||^2."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(
            f"pairwise_sqdist expects (n, m) and (p, m), got {a.shape}, {b.shape}")
    ad, bd = a.data, b.data
    na = np.sum(ad * ad, axis=1)[:, None]
    nb = np.sum(bd * bd, axis=1)[None, :]
    out = np.maximum(na + nb - 2.0 * (ad @ bd.T), 0.0)

    na, nb = a.requires_grad, b.requires_grad

    def bw(g):
        ga = 2.0 * (np.sum(g, axis=1)[:, None] * ad - g @ bd) if na else None
        gb = 2.0 * (np.sum(g, axis=0)[:, None] * bd - g.T @ ad) if nb else None
        return ga, gb

    return _finish("pairwise_sqdist", out, (a, b), bw)


def _phi_half_diag(m: np.ndarray) -> np.ndarray:
    out = np.tril(m)
    idx = np.diag_indices_from(out)
    out[idx] *= 0.5
    return out


def cholesky(a: Tensor) -> Tensor:
    """Lower Cholesky factor of the symmetrized input (A + A^T) / 2.

    Raises :class:`NotPositiveDefiniteError` carrying the failing leading
    minor index when the input is not positive definite.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"cholesky expects a square matrix, got {a.shape}")
    sym = 0.5 * (a.data + a.data.T)
    try:
        chol_l = scipy.linalg.cholesky(sym, lower=True)
    except scipy.linalg.LinAlgError as err:
        minor = int(str(err).split("-th")[0]) if "-th" in str(err) else -1
        raise NotPositiveDefiniteError(minor, str(err)) from err

    def bw(g):
        lbar = np.tril(g)
        p = _phi_half_diag(chol_l.T @ lbar)
        s = p + p.T
        w = scipy.linalg.solve_triangular(chol_l, s, lower=True, trans="T")
        sigma_bar = scipy.linalg.solve_triangular(
            chol_l, w.T, lower=True, trans="T").T
        return (0.5 * sigma_bar,)

    return _finish("cholesky", chol_l, (a,), bw)


def triangular_solve(t: Tensor, b: Tensor, lower: bool = True,
                     trans: bool = False) -> Tensor:
    """Solve T X = B (or T^T X = B when ``trans``) for triangular T."""
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ValueError(f"triangular_solve expects square T, got {t.shape}")
    if b.ndim != 2 or b.shape[0] != t.shape[0]:
        raise ValueError(
            f"triangular_solve shape mismatch: T {t.shape} vs B {b.shape}")
    x = scipy.linalg.solve_triangular(
        t.data, b.data, lower=lower, trans="T" if trans else "N")
    td = t.data
    nt = t.requires_grad

    def bw(g):
        gb = scipy.linalg.solve_triangular(
            td, g, lower=lower, trans="N" if trans else "T")
        if not nt:
            return None, gb
        gt = (-x @ gb.T) if trans else (-gb @ x.T)
        gt = np.tril(gt) if lower else np.triu(gt)
        return gt, gb

    return _finish("triangular_solve", x, (t, b), bw)


def logdet_from_chol(chol_l: Tensor) -> Tensor:
    """log det(A) = 2 * sum(log diag(L)) given A = L L^T."""
    diag = np.diagonal(chol_l.data)
    out = 2.0 * np.sum(np.log(diag))
    n = chol_l.shape[0]

    def bw(g):
        full = np.zeros((n, n), dtype=np.float64)
        np.fill_diagonal(full, 2.0 * g / diag)
        return (full,)

    return _finish("logdet_from_chol", out, (chol_l,), bw)


# Dispatch surface over every supported op kind.
OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "pow_const": pow_const,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "relu": relu,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "sum": sum_,
    "mean": mean,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "slice": slice_,
    "concat": concat,
    "broadcast": broadcast_to,
    "pairwise_sqdist": pairwise_sqdist,
    "cholesky": cholesky,
    "triangular_solve": triangular_solve,
    "logdet_from_chol": logdet_from_chol,
}


def forward_op(op_kind: str, *operands, **kwargs) -> Tensor:
    """Apply a named op; raises on unknown kinds or shape mismatches."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind '{op_kind}'") from None
    return fn(*operands, **kwargs)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` for every trainable leaf on ``tape``.

    Returns a map leaf tid -> gradient array with the leaf's shape.  Leaves
    with no path to the loss get zero gradients; a tape without trainable
    leaves yields an empty map.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.tape is tape and loss.tid is not None:
        grads[loss.tid] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_tid, None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for tid, pg in zip(node.parent_tids, parent_grads):
            if tid is None or pg is None:
                continue
            if tid in grads:
                grads[tid] = grads[tid] + pg
            else:
                grads[tid] = pg
    out = {}
    for tid, leaf_tensor in tape.trainable.items():
        out[tid] = grads.get(tid, np.zeros_like(leaf_tensor.data))
    return out


# ---------------------------------------------------------------------------
# Adaptive-moment optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # Global-norm gradient clip; one early objective spike otherwise
    # saturates the second moments and freezes training.  None disables.
    clip_norm: float | None = 10.0


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: AdamState,
                   config: AdamConfig):
    """One Adam update; rejects non-finite gradients naming the parameter.

    ``params`` and ``grads`` are name -> ndarray maps.  Parameters without a
    gradient entry are treated as having zero gradient.  Returns a new params
    dict and the advanced state; inputs are not mutated.
    """
    step = state.step + 1
    new_params = {}
    new_m = {}
    new_v = {}
    bc1 = 1.0 - config.beta1 ** step
    bc2 = 1.0 - config.beta2 ** step
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
    scale = 1.0
    if config.clip_norm is not None:
        sq = sum(float(np.sum(g * g)) for g in grads.values()
                 if g is not None)
        norm = math.sqrt(sq)
        if norm > config.clip_norm:
            scale = config.clip_norm / norm
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        else:
            g = g * scale
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * (g * g)
        update = config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        new_params[name] = value - update
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step=step, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# Parameter checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "trajgp-checkpoint-v1"


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Write a flat name -> array map as JSON; float64 buffers are base64
    encoded little-endian so the round trip is bit exact."""
    payload = {"format": CHECKPOINT_FORMAT, "meta": meta or {}, "params": {}}
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        payload["params"][name] = {
            "shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes(order="C")).decode("ascii"),
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns (params, meta)."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {path}")
    params = {}
    for name, entry in payload["params"].items():
        buf = base64.b64decode(entry["data"])
        params[name] = np.frombuffer(buf, dtype="<f8").reshape(
            entry["shape"]).astype(np.float64)
    return params, payload.get("meta", {})


def lift_params(tape: Tape, params: dict) -> dict[str, Tensor]:
    """Attach every parameter array as a trainable leaf on ``tape``."""
    return {name: tape.leaf(value, trainable=True, name=name)
            for name, value in params.items()}


def grads_by_name(lifted: dict[str, Tensor],
                  grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    """Re-key a backward() result from leaf tid to parameter name."""
    return {name: grads[t.tid] for name, t in lifted.items() if t.tid in grads}
