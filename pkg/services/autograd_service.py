"""
Autograd Service Module - Tensors, Gradient Tape and Layer Primitives
Contains the reverse-mode engine the multi-view CNN is trained with:
2D convolution, max pooling, dense layers, activations, binary
cross-entropy and the adaptive-moment optimizer.

All math runs in 64-bit floats. Every primitive accepts an optional
leading batch axis so a minibatch goes through one taped call.
"""
import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from services.errors import ConfigError, DataError, GradientError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64

# clamp applied to probabilities before the log in bce_loss
BCE_EPS = 1e-7

_grad_mode = threading.local()

# process-wide recording order, so entries from several tapes can be merged
_sequence = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Run a block without recording anything on a tape (inference only)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """
    n-dimensional float64 array that can take part in a gradient tape.

    Leaf tensors (parameters) have no tape and accumulate into .grad.
    Tensors produced by a primitive while any operand requires grad carry
    the tape that recorded them.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", copy: bool = True):
        arr = np.array(data, dtype=DTYPE, copy=True) if copy else np.asarray(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional["GradTape"] = None
        self.name = name

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
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self.tape is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"Tensor of shape {self.shape} is not a scalar.")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=DTYPE).reshape(self.data.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class TapeEntry:
    seq: int
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradTape:
    """Ordered record of the primitives run during one forward pass."""

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], backward_fn) -> None:
        self.entries.append(TapeEntry(next(_sequence), op, output, inputs, backward_fn))

    def absorb(self, others: Iterable["GradTape"]) -> None:
        """Take over the entries of other tapes, keeping forward order across all of them."""
        for other in others:
            for entry in other.entries:
                entry.output.tape = self
            self.entries.extend(other.entries)
            other.entries = []
        self.entries.sort(key=lambda entry: entry.seq)

    def backward(self, loss: Tensor) -> None:
        """Replay the entries in exact reverse order, pushing grads to the leaves."""
        pending = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            upstream = pending.pop(id(entry.output), None)
            if upstream is None:
                # not an ancestor of the loss
                continue
            input_grads = entry.backward_fn(upstream)
            for operand, grad in zip(entry.inputs, input_grads):
                if grad is None or not operand.requires_grad:
                    continue
                if operand.is_leaf:
                    operand._accumulate(grad)
                    continue
                key = id(operand)
                if key in pending:
                    pending[key] = pending[key] + grad
                else:
                    pending[key] = grad


def _emit(op: str, out_data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap a primitive's result and record it when any operand needs a grad."""
    out = Tensor(out_data, copy=False)
    if not is_grad_enabled():
        return out
    tracked = [t for t in inputs if t.requires_grad]
    if not tracked:
        return out
    tapes = list({id(t.tape): t.tape for t in tracked if t.tape is not None}.values())
    tape = tapes[0] if tapes else GradTape()
    if len(tapes) > 1:
        # independent branches (one trunk per view) meet here
        tape.absorb(tapes[1:])
    out.requires_grad = True
    out.tape = tape
    tape.record(op, out, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(leaf) into .grad of every reachable leaf that requires grad.

    Grads add up across calls until zero_grad is called.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}.")
    if not loss.requires_grad:
        raise GradientError("Loss does not depend on any tensor that requires grad.")
    if loss.is_leaf:
        loss._accumulate(np.ones_like(loss.data))
        return
    loss.tape.backward(loss)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# elementwise arithmetic

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), grad_fn)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), grad_fn)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), grad_fn)


def tensor_sum(x: Tensor) -> Tensor:
    def grad_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", np.asarray(x.data.sum()), (x,), grad_fn)


def tensor_mean(x: Tensor) -> Tensor:
    n = x.size

    def grad_fn(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _emit("mean", np.asarray(x.data.mean()), (x,), grad_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"Cannot reshape {x.shape} into {shape}.") from exc

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", out, (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor.")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"Cannot concatenate shapes {[t.shape for t in tensors]}.") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tensors, grad_fn)


# activations

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _emit("relu", np.where(mask, x.data, 0.0), (x,), grad_fn)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", out, (x,), grad_fn)


# layers

def _batched(x: Tensor, base_ndim: int, op: str) -> Tuple[np.ndarray, bool]:
    if x.ndim == base_ndim:
        return x.data[None], False
    if x.ndim == base_ndim + 1:
        return x.data, True
    raise ShapeError(f"{op} expects a {base_ndim}-d input (or batched {base_ndim + 1}-d), got shape {x.shape}.")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2D cross-correlation with zero padding.

    Args:
        x: input [C_in,H,W] or [N,C_in,H,W]
        kernels: [C_out,C_in,kH,kW]
        bias: [C_out]
        stride: positive step between receptive fields
        padding: zero-fill added on every spatial border

    Returns:
        Tensor: [C_out,H',W'] (or [N,C_out,H',W']) with
        H' = (H + 2*padding - kH) // stride + 1, same for W'.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    xd, batched = _batched(x, 3, "conv2d")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d kernels must be [C_out,C_in,kH,kW], got {kernels.shape}.")
    n, c_in, h, w = xd.shape
    c_out, k_in, kh, kw = kernels.shape
    if k_in != c_in:
        raise ShapeError(f"conv2d kernels expect {k_in} input channels but input has {c_in}.")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}.")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ShapeError(f"conv2d stride must be a positive int, got {stride}.")
    if not isinstance(padding, (int, np.integer)) or padding < 0:
        raise ShapeError(f"conv2d padding must be a nonnegative int, got {padding}.")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit padded input {h}x{w} (padding {padding}).")

    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    k = kernels.data
    # [N, C_in, H', W', kH, kW] view of every receptive field, no copy
    fields = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]

    def window(arr, i, j):
        return arr[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride]

    out = np.tensordot(fields, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]

    def grad_fn(g):
        gb = g if batched else g[None]
        grad_k = np.tensordot(gb, fields, axes=([0, 2, 3], [0, 2, 3]))
        grad_b = gb.sum(axis=(0, 2, 3))
        grad_x = None
        if x.requires_grad:
            # [N, H', W', C_in, kH, kW], folded back onto the padded input
            cols = np.tensordot(gb, k, axes=([1], [0]))
            grad_xp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    window(grad_xp, i, j)[...] += cols[..., i, j].transpose(0, 3, 1, 2)
            grad_x = grad_xp[:, :, padding:padding + h, padding:padding + w]
            grad_x = grad_x if batched else grad_x[0]
        return grad_x, grad_k, grad_b

    return _emit("conv2d", out if batched else out[0], (x, kernels, bias), grad_fn)


def maxpool2d(x: Tensor, window: int) -> Tensor:
    """
    Non-overlapping max pooling (stride == window).

    The backward pass routes each gradient to the first maximal element of
    its window in row-major order.
    """
    x = as_tensor(x)
    xd, batched = _batched(x, 3, "maxpool2d")
    if not isinstance(window, (int, np.integer)) or window < 1:
        raise ShapeError(f"maxpool2d window must be a positive int, got {window}.")
    n, c, h, w = xd.shape
    if h % window or w % window:
        raise ShapeError(f"maxpool2d window {window} does not divide spatial dims {h}x{w}.")
    oh, ow = h // window, w // window
    blocks = (
        xd.reshape(n, c, oh, window, ow, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, window * window)
    )
    arg = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def grad_fn(g):
        gb = g if batched else g[None]
        routed = np.zeros_like(blocks)
        np.put_along_axis(routed, arg, gb[..., None], axis=-1)
        grad_x = (
            routed.reshape(n, c, oh, ow, window, window)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (grad_x if batched else grad_x[0],)

    return _emit("maxpool2d", out if batched else out[0], (x,), grad_fn)


def global_avg_pool2d(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: [N,C,H,W] -> [N,C]."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool2d expects [C,H,W] or [N,C,H,W], got {x.shape}.")
    h, w = x.shape[-2:]

    def grad_fn(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), x.shape).copy(),)

    return _emit("global_avg_pool2d", x.data.mean(axis=(-2, -1)), (x,), grad_fn)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map output[i] = dot(weights[i], x) + bias[i]; x is [N] or [B,N]."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2:
        raise ShapeError(f"dense weights must be [M,N], got {weights.shape}.")
    m, n_in = weights.shape
    if x.ndim not in (1, 2) or x.shape[-1] != n_in:
        raise ShapeError(f"dense expects input length {n_in}, got shape {x.shape}.")
    if bias.shape != (m,):
        raise ShapeError(f"dense bias must have shape ({m},), got {bias.shape}.")
    out = x.data @ weights.data.T + bias.data

    def grad_fn(g):
        if x.ndim == 1:
            return g @ weights.data, np.outer(g, x.data), g
        return g @ weights.data, g.T @ x.data, g.sum(axis=0)

    return _emit("dense", out, (x, weights, bias), grad_fn)


def bce_loss(prediction: TensorLike, target: TensorLike) -> Tensor:
    """
    Binary cross-entropy, averaged over samples.

    Probabilities are clamped to [BCE_EPS, 1 - BCE_EPS] before the log;
    clamped entries get a zero gradient.
    """
    p = as_tensor(prediction)
    y = np.asarray(target, dtype=DTYPE)
    if y.shape != p.shape:
        try:
            y = np.broadcast_to(y, p.shape)
        except ValueError as exc:
            raise ShapeError(f"bce_loss target shape {y.shape} does not match prediction {p.shape}.") from exc
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DataError("bce_loss targets must be 0 or 1.")
    clamped = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    per_sample = -(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped))
    n = max(p.size, 1)
    inside = (p.data >= BCE_EPS) & (p.data <= 1.0 - BCE_EPS)

    def grad_fn(g):
        local = (-(y / clamped) + (1.0 - y) / (1.0 - clamped)) * inside
        return (g * local / n,)

    return _emit("bce_loss", np.asarray(per_sample.mean()), (p,), grad_fn)


# optimizer

@dataclass
class OptimizerState:
    """Adaptive-moment optimizer state: one moment pair per registered parameter."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)


def init_optimizer(params: Sequence[Tensor], learning_rate: float = 1e-3,
                   betas: Tuple[float, float] = (0.9, 0.999), epsilon: float = 1e-8) -> OptimizerState:
    if learning_rate <= 0:
        raise ConfigError(f"Learning rate must be positive, got {learning_rate}.")
    return OptimizerState(
        learning_rate=learning_rate,
        beta1=betas[0],
        beta2=betas[1],
        epsilon=epsilon,
        first_moment=[np.zeros_like(p.data) for p in params],
        second_moment=[np.zeros_like(p.data) for p in params],
    )


def optimizer_step(params: Sequence[Tensor], state: OptimizerState,
                   grads: Optional[Sequence[Optional[np.ndarray]]] = None) -> None:
    """
    Apply one bias-corrected adaptive-moment update in place.

    Args:
        params: registered parameters, same order as at init_optimizer
        state: moment buffers and step counter (mutated)
        grads: explicit gradients; defaults to each parameter's .grad
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params) or len(state.first_moment) != len(params):
        raise GradientError("Optimizer state, parameters and gradients are not aligned.")
    for index, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise GradientError(f"Parameter {p.name or index} has no gradient.")
        if np.shape(g) != p.shape:
            raise GradientError(f"Gradient for {p.name or index} has shape {np.shape(g)}, expected {p.shape}.")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.data -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar loss with respect to one parameter."""
    approx = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = approx.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = loss_fn().item()
            flat[i] = original - eps
            minus = loss_fn().item()
            flat[i] = original
            out[i] = (plus - minus) / (2.0 * eps)
    return approx
