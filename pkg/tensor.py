"""Dense tensors with tape-based reverse-mode differentiation and the operator set of the model"""
import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel
from scipy.special import expit
import logging

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-8
PROB_CLAMP = 1e-7

_state = threading.local()


class NumericsError(Exception):
    """Shape errors, non-finite values and misuse of the tape"""
    pass


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextmanager
def float64_mode():
    """Run ops in 64-bit; used for gradient checks"""
    previous = default_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = previous


def _tape_stack() -> List["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    """One recorded op: output, parents and the rule mapping the output grad to parent grads"""
    __slots__ = ("op", "parents", "output", "backward_fn", "tape", "index")

    def __init__(self, op: str, parents: Tuple["Tensor", ...], output: "Tensor",
                 backward_fn: Callable, tape: "Tape", index: int):
        self.op = op
        self.parents = parents
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape
        self.index = index


class Tape:
    """Records ops in execution order while active; one per thread at a time"""

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, parents, output: "Tensor", backward_fn: Callable) -> Node:
        node = Node(op, parents, output, backward_fn, self, len(self.nodes))
        self.nodes.append(node)
        return node


class Tensor:
    """N-d float array with an optional gradient buffer"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._node = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise NumericsError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=default_dtype()))


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result; records a node when a tape is active and any parent needs grad.

    backward_fn maps the output gradient to one gradient (or None) per parent.
    """
    data = np.asarray(data, dtype=default_dtype())
    if not np.isfinite(data).all():
        raise NumericsError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = tape.record(op, tuple(parents), out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every reachable leaf that requires grad"""
    if loss.size != 1:
        raise NumericsError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise NumericsError("loss was not produced on an active tape")

    node = loss._node
    grads = {id(loss): np.ones_like(loss.data)}
    for current in reversed(node.tape.nodes[: node.index + 1]):
        grad_out = grads.pop(id(current.output), None)
        if grad_out is None:
            continue
        parent_grads = current.backward_fn(grad_out)
        for parent, grad in zip(current.parents, parent_grads):
            if grad is None or not parent.requires_grad:
                continue
            grad = np.asarray(grad, dtype=parent.data.dtype).reshape(parent.shape)
            if parent._node is None:
                if not np.isfinite(grad).all():
                    raise NumericsError(f"non-finite gradient flowing out of {current.op}")
                parent.grad = grad.copy() if parent.grad is None else parent.grad + grad
            else:
                key = id(parent)
                grads[key] = grad if key not in grads else grads[key] + grad


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise NumericsError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if (b.data == 0).any():
        raise NumericsError("div: division by zero")
    return make_op(a.data / b.data, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)), "div")


def neg(x: Tensor) -> Tensor:
    return make_op(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant"""
    return make_op(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), _backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise NumericsError(f"reshape: cannot view {x.shape} as {shape}")
    return make_op(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return make_op(np.where(positive, x.data, 0), (x,), lambda g: (g * positive,), "relu")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N, Cin, H, W] with [Cout, Cin, kh, kw], zero padding"""
    if x.ndim != 4 or kernel.ndim != 4:
        raise NumericsError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, channels, height, width = x.shape
    out_channels, kernel_channels, kh, kw = kernel.shape
    if channels != kernel_channels:
        raise NumericsError(f"conv2d: input has {channels} channels, kernel expects {kernel_channels}")
    if bias is not None and bias.shape != (out_channels,):
        raise NumericsError(f"conv2d: bias shape {bias.shape} != ({out_channels},)")
    if stride < 1 or padding < 0:
        raise NumericsError(f"conv2d: invalid stride {stride} or padding {padding}")
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if padded.shape[2] < kh or padded.shape[3] < kw:
        raise NumericsError(f"conv2d: kernel {kh}x{kw} larger than padded input {padded.shape[2:]}")

    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.einsum("nchwij,ocij->nohw", windows, kernel.data, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def _backward(g):
        grad_kernel = np.einsum("nchwij,nohw->ocij", windows, g, optimize=True)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + stride * (out_h - 1) + 1, stride)
                cols = slice(j, j + stride * (out_w - 1) + 1, stride)
                grad_padded[:, :, rows, cols] += np.einsum("nohw,oc->nchw", g, kernel.data[:, :, i, j])
        grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
        grad_bias = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_kernel, grad_bias

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_op(out, parents, _backward, "conv2d")


def interpolation_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Linear sampling weights with half-pixel centers, edges clamped"""
    weights = np.zeros((size_out, size_in), dtype=np.float64)
    src = (np.arange(size_out) + 0.5) * (size_in / size_out) - 0.5
    src = np.clip(src, 0.0, size_in - 1)
    low = np.floor(src).astype(np.int64)
    high = np.minimum(low + 1, size_in - 1)
    frac = src - low
    rows = np.arange(size_out)
    np.add.at(weights, (rows, low), 1.0 - frac)
    np.add.at(weights, (rows, high), frac)
    return weights


def bilinear_resize(x: Tensor, target: Tuple[int, int]) -> Tensor:
    """Resize [N, C, h, w] to [N, C, H, W]"""
    if x.ndim != 4:
        raise NumericsError(f"bilinear_resize: expected 4-d input, got {x.shape}")
    height, width = target
    if height < 1 or width < 1:
        raise NumericsError(f"bilinear_resize: target must be >= 1, got {target}")
    if (height, width) == x.shape[2:]:
        return make_op(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    rows = interpolation_matrix(x.shape[2], height).astype(x.data.dtype)
    cols = interpolation_matrix(x.shape[3], width).astype(x.data.dtype)
    out = np.einsum("Hh,nchw,Ww->ncHW", rows, x.data, cols, optimize=True)
    return make_op(out, (x,),
                   lambda g: (np.einsum("Hh,ncHW,Ww->nchw", rows, g, cols, optimize=True),),
                   "bilinear_resize")


def cosine_similarity_map(features: Tensor, prototype: Tensor) -> Tensor:
    """cos(F(y, x), p) for [d, h, w] features and a [d] prototype; eps added to each norm"""
    if features.ndim != 3 or prototype.ndim != 1 or features.shape[0] != prototype.shape[0]:
        raise NumericsError(
            f"cosine_similarity_map: features {features.shape} and prototype {prototype.shape} disagree"
        )
    f, p = features.data, prototype.data
    p_raw = float(np.sqrt((p * p).sum()))
    if p_raw == 0.0:
        raise NumericsError("cosine_similarity_map: zero prototype")
    f_raw = np.sqrt((f * f).sum(axis=0))
    f_norm = f_raw + COSINE_EPS
    p_norm = p_raw + COSINE_EPS
    dot = np.einsum("dhw,d->hw", f, p)
    cos = dot / (f_norm * p_norm)

    def _backward(g):
        safe_raw = np.where(f_raw > 0, f_raw, 1.0)
        grad_f = g[None] * (p[:, None, None] / (f_norm * p_norm)[None]
                            - (dot / (f_norm ** 2 * p_norm))[None] * f / safe_raw[None])
        grad_p = (np.einsum("hw,dhw->d", g / (f_norm * p_norm), f)
                  - (g * dot / (f_norm * p_norm ** 2)).sum() * p / p_raw)
        return grad_f, grad_p

    return make_op(cos, (features, prototype), _backward, "cosine_similarity_map")


def sigmoid_kappa(z: Tensor, kappa: float) -> Tensor:
    """1 / (1 + exp(-kappa * z))"""
    if not kappa > 0:
        raise NumericsError(f"sigmoid_kappa: kappa must be > 0, got {kappa}")
    s = expit(kappa * z.data)
    return make_op(s, (z,), lambda g: (g * kappa * s * (1.0 - s),), "sigmoid_kappa")


def weighted_bce(pred_fg: Tensor, target_fg: np.ndarray, w_fg: float = 1.0, w_bg: float = 0.1) -> Tensor:
    """Class-weighted binary cross-entropy averaged over all pixels"""
    target = np.asarray(target_fg, dtype=np.float64)
    if target.shape != pred_fg.shape:
        raise NumericsError(f"weighted_bce: prediction {pred_fg.shape} vs target {target.shape}")
    pred = pred_fg.data.astype(np.float64)
    clamped = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    count = target.size
    loss = -(w_bg * (1.0 - target) * np.log(1.0 - clamped) + w_fg * target * np.log(clamped)).sum() / count

    def _backward(g):
        inside = (pred >= PROB_CLAMP) & (pred <= 1.0 - PROB_CLAMP)
        d_pred = -(w_fg * target / clamped - w_bg * (1.0 - target) / (1.0 - clamped)) / count
        return (g * d_pred * inside,)

    return make_op(np.asarray(loss), (pred_fg,), _backward, "weighted_bce")


class GradCheckReport(BaseModel):
    """Analytic vs central-difference gradients, one error per input"""
    errors: List[float]
    names: List[str]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale_ = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale_


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor],
               step: float = 1e-4, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare backward() against central differences in 64-bit.

    Inputs are upcast to float64 in place; fn must rebuild the loss from them on every call.
    """
    with float64_mode():
        for tensor in inputs:
            tensor.data = np.array(tensor.data, dtype=np.float64)
            tensor.grad = None
        with Tape():
            loss = fn()
        backward(loss)
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

        errors = []
        for tensor, grad in zip(inputs, analytic):
            numeric = np.zeros_like(tensor.data)
            flat = tensor.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                plus = fn().item()
                flat[i] = original - step
                minus = fn().item()
                flat[i] = original
                numeric.reshape(-1)[i] = (plus - minus) / (2.0 * step)
            errors.append(_relative_error(grad, numeric))

    names = [t.name or f"input{i}" for i, t in enumerate(inputs)]
    report = GradCheckReport(errors=errors, names=names, tolerance=tolerance)
    logger.debug(f"grad_check max relative error {report.max_error:.3e} over {len(inputs)} inputs")
    return report
