"""Dense NCHW tensors, the differentiable ops of the network, and
tape-based reverse-mode differentiation.

A ``Tensor`` wraps a contiguous float32 (or float64 inside gradient checks)
ndarray, usually rank 4 in (n, c, h, w) layout; rank 1 is allowed for
per-channel biases.  Ops are free functions that compute eagerly and, when a
``Tape`` is active and any input requires gradients, record a node holding a
backward rule.  ``backward(loss, tape)`` replays the nodes in exact reverse
recording order and accumulates gradients into ``Tensor.grad``.

Determinism contract: every op fixes its per-output-element accumulation
order, so repeated runs produce bit-identical values and gradients.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import backend


class ShapeError(ValueError):
    """Raised when tensor shapes violate an op's contract."""


_PAIRED_DTYPES = (np.float32, np.float64)


class Tensor:
    """Numeric array plus optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _PAIRED_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    output: Tensor
    inputs: tuple
    backward_fn: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of ops; nodes always appear after their inputs' nodes."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


def current_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(out_data: np.ndarray, inputs: Sequence[Optional[Tensor]],
              backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap an op result and register its backward rule on the active tape.

    ``backward_fn`` maps the output gradient to per-input gradient arrays
    (None for inputs that take no gradient).  Returned arrays must be fresh
    or never mutated afterwards; the autograd never writes into them.
    """
    tensors = [t for t in inputs if isinstance(t, Tensor)]
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in tensors))
    tape = current_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append(TapeNode(out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on."""
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward() needs a (1,1,1,1) scalar loss, got shape {loss.shape}")
    loss.grad = np.ones((1, 1, 1, 1), dtype=loss.dtype)
    for node in reversed(tape.nodes):
        gout = node.output.grad
        if gout is None:
            continue
        grads = node.backward_fn(gout)
        for t, g in zip(node.inputs, grads):
            if not isinstance(t, Tensor) or g is None or not t.requires_grad:
                continue
            t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# convolution


def _check_4d(name: str, t: Tensor) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n,c,h,w), got shape {t.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: tuple = (0, 0, 0, 0), dilation: int = 1) -> Tensor:
    """2-D correlation with zero padding given as (top, bottom, left, right)."""
    _check_4d("conv2d input", x)
    _check_4d("conv2d weight", weight)
    if x.dtype != weight.dtype:
        raise ShapeError(f"conv2d dtype mismatch: input {x.dtype} vs weight {weight.dtype}")
    n, cin, h, w = x.shape
    cout, kin, kh, kw = weight.shape
    if cin != kin:
        raise ShapeError(f"conv2d channel mismatch: input has {cin} channels "
                         f"but weight expects {kin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    if stride < 1 or dilation < 1:
        raise ShapeError(f"conv2d stride/dilation must be >= 1, got {stride}/{dilation}")
    pt, pb, pl, pr = padding
    if min(pt, pb, pl, pr) < 0:
        raise ShapeError(f"conv2d padding must be non-negative, got {padding}")
    hp, wp = h + pt + pb, w + pl + pr
    oh = (hp - dilation * (kh - 1) - 1) // stride + 1
    ow = (wp - dilation * (kw - 1) - 1) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be {oh}x{ow} (input {h}x{w}, kernel {kh}x{kw}, "
                         f"padding {padding}, dilation {dilation})")

    K = backend.kernels()
    if pt or pb or pl or pr:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        xp = x.data
    cols_box = [] if (current_tape() is not None and weight.requires_grad) else None
    out = K.conv2d_forward(xp, weight.data, stride, dilation, cols_out=cols_box)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bwd(g: np.ndarray) -> tuple:
        gx = gw = gb = None
        if x.requires_grad:
            gxp = K.conv2d_backward_input(g, weight.data, xp.shape, stride, dilation)
            gx = np.ascontiguousarray(gxp[:, :, pt:pt + h, pl:pl + w])
        if weight.requires_grad:
            gw = K.conv2d_backward_weight(g, xp, kh, kw, stride, dilation,
                                          cols=cols_box[0] if cols_box else None)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return record_op(out, (x, weight, bias), bwd)


def pad_replicate(x: Tensor, padding: tuple) -> Tensor:
    """Edge-replicating pad, (top, bottom, left, right)."""
    _check_4d("pad_replicate input", x)
    pt, pb, pl, pr = padding
    n, c, h, w = x.shape
    out = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)), mode="edge")

    def bwd(g: np.ndarray) -> tuple:
        # Fold replicated rows into the edge rows, then columns likewise;
        # corners land correctly because the row fold runs first.
        g2 = g.copy()
        if pt:
            g2[:, :, pt, :] += g[:, :, :pt, :].sum(axis=2)
        if pb:
            g2[:, :, pt + h - 1, :] += g[:, :, pt + h:, :].sum(axis=2)
        g2 = g2[:, :, pt:pt + h, :]
        g3 = g2.copy()
        if pl:
            g3[:, :, :, pl] += g2[:, :, :, :pl].sum(axis=3)
        if pr:
            g3[:, :, :, pl + w - 1] += g2[:, :, :, pl + w:].sum(axis=3)
        return (np.ascontiguousarray(g3[:, :, :, pl:pl + w]),)

    return record_op(out, (x,), bwd)


# ---------------------------------------------------------------------------
# resampling and pooling


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsample by an integer factor, half-pixel source mapping
    (src = (dst + 0.5)/factor - 0.5, clamped).  factor 1 returns a copy."""
    _check_4d("upsample input", x)
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    K = backend.kernels()
    n, c, h, w = x.shape
    out = K.upsample_bilinear_forward(x.data, factor)

    def bwd(g: np.ndarray) -> tuple:
        return (K.upsample_bilinear_backward(g, factor, h, w),)

    return record_op(out, (x,), bwd)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 window, stride-2 max pool; gradient routes to the first max index."""
    _check_4d("maxpool input", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    K = backend.kernels()
    out, idx = K.maxpool2_forward(x.data)

    def bwd(g: np.ndarray) -> tuple:
        return (K.maxpool2_backward(g, idx, h, w),)

    return record_op(out, (x,), bwd)


# ---------------------------------------------------------------------------
# pointwise ops


def _broadcast_check(a: Tensor, b: Tensor) -> bool:
    """True when b is a 1-channel map broadcast across a's channels."""
    if a.shape == b.shape:
        return False
    sa, sb = a.shape, b.shape
    if len(sa) == 4 and len(sb) == 4 and sb[1] == 1 and sa[0] == sb[0] \
            and sa[2] == sb[2] and sa[3] == sb[3]:
        return True
    raise ShapeError(f"elementwise shapes incompatible: {sa} vs {sb} "
                     "(need equal shapes or a 1-channel second operand)")


def _reduce_to(g: np.ndarray, broadcast: bool) -> np.ndarray:
    return g.sum(axis=1, keepdims=True) if broadcast else g


def add(a: Tensor, b: Tensor) -> Tensor:
    br = _broadcast_check(a, b)
    out = a.data + b.data

    def bwd(g: np.ndarray) -> tuple:
        return g, _reduce_to(g, br)

    return record_op(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    br = _broadcast_check(a, b)
    out = a.data * b.data

    def bwd(g: np.ndarray) -> tuple:
        ga = g * b.data
        gb = _reduce_to(g * a.data, br)
        return ga, gb

    return record_op(out, (a, b), bwd)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise max; the gradient goes to the strictly larger input and is
    split equally on exact ties."""
    br = _broadcast_check(a, b)
    out = np.maximum(a.data, b.data)

    def bwd(g: np.ndarray) -> tuple:
        a_wins = a.data > b.data
        tie = a.data == b.data
        ga = g * (a_wins + 0.5 * tie)
        gb = _reduce_to(g * (~a_wins & ~tie) + g * (0.5 * tie), br)
        return ga.astype(g.dtype), gb.astype(g.dtype)

    return record_op(out, (a, b), bwd)


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    ops = {"add": add, "mul": mul, "max": maximum}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g: np.ndarray) -> tuple:
        return (g * (x.data > 0),)

    return record_op(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function in the overflow-free split form."""
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def bwd(g: np.ndarray) -> tuple:
        return (g * out * (1.0 - out),)

    return record_op(out, (x,), bwd)


def activation(kind: str, x: Tensor) -> Tensor:
    ops = {"relu": relu, "sigmoid": sigmoid}
    if kind not in ops:
        raise ValueError(f"unknown activation kind {kind!r}")
    return ops[kind](x)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    first = parts[0]
    _check_4d("concat part", first)
    for p in parts[1:]:
        _check_4d("concat part", p)
        if (p.shape[0], p.shape[2], p.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise ShapeError(f"concat spatial/batch dims differ: {first.shape} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.shape[1] for p in parts]

    def bwd(g: np.ndarray) -> tuple:
        grads = []
        off = 0
        for c in widths:
            grads.append(np.ascontiguousarray(g[:, off:off + c]))
            off += c
        return tuple(grads)

    return record_op(out, tuple(parts), bwd)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all elements as a (1,1,1,1) scalar tensor."""
    out = np.array(x.data.sum(dtype=x.dtype), dtype=x.dtype).reshape(1, 1, 1, 1)

    def bwd(g: np.ndarray) -> tuple:
        return (np.full(x.shape, g.reshape(-1)[0], dtype=g.dtype),)

    return record_op(out, (x,), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    cv = x.dtype.type(c)
    out = x.data * cv

    def bwd(g: np.ndarray) -> tuple:
        return (g * cv,)

    return record_op(out, (x,), bwd)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Per-input maximum relative error of analytic vs central-difference
    gradients; passes iff the overall max is within tolerance."""
    eps: float
    tol: float
    per_input: list = field(default_factory=list)  # (label, max_rel_error)

    @property
    def max_rel_error(self) -> float:
        return max((e for _, e in self.per_input), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        lines = [f"grad_check eps={self.eps:g} tol={self.tol:g} "
                 f"max={self.max_rel_error:.3e} {'PASS' if self.passed else 'FAIL'}"]
        lines += [f"  {label}: {err:.3e}" for label, err in self.per_input]
        return "\n".join(lines)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps=1e-5, tol: float = 1e-4,
               labels: Optional[Sequence[str]] = None) -> GradCheckReport:
    """Compare tape gradients of the scalar program ``fn(*inputs)`` against
    central finite differences, coordinate by coordinate.

    Inputs must be float64 tensors (the check is only meaningful at 64-bit);
    they are perturbed in place and restored, so ``fn`` may close over them.

    ``eps`` may be a single step or a ladder of steps.  A ladder guards
    against the two intrinsic failure modes of finite differences - roundoff
    noise at small steps (tiny-gradient coordinates) and kink crossing or
    truncation at large ones - by accepting a coordinate when any step
    agrees; a wrong analytic gradient disagrees at every step.  Later steps
    are only evaluated for coordinates the earlier ones rejected.
    """
    ladder = (float(eps),) if np.isscalar(eps) else tuple(float(e) for e in eps)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check inputs must be float64 tensors "
                            "(promote with Tensor.astype(np.float64))")
        t.zero_grad()
        if not t.requires_grad:
            raise ValueError("grad_check inputs must have requires_grad=True")

    with Tape() as tape:
        out = fn(*inputs)
    if not isinstance(out, Tensor) or out.shape != (1, 1, 1, 1):
        raise ShapeError("grad_check requires fn to return a (1,1,1,1) scalar tensor")
    backward(out, tape)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    if labels is None:
        labels = [f"input[{i}]" for i in range(len(inputs))]
    report = GradCheckReport(eps=ladder[0], tol=tol)
    for t, a, label in zip(inputs, analytic, labels):
        flat = t.data.reshape(-1)
        a_flat = a.reshape(-1)
        rels = np.full(flat.size, np.inf)
        for step in ladder:
            pending = np.nonzero(rels > tol)[0]
            if pending.size == 0:
                break
            for j in pending:
                orig = flat[j]
                flat[j] = orig + step
                f_plus = fn(*inputs).item()
                flat[j] = orig - step
                f_minus = fn(*inputs).item()
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                a_j = float(a_flat[j])
                rel = abs(a_j - numeric) / max(1e-8, abs(a_j) + abs(numeric))
                rels[j] = min(rels[j], rel)
        report.per_input.append((label, float(rels.max()) if flat.size else 0.0))
    return report
