"""
Reverse-mode differentiation over dense float64 arrays, and the feed-forward
networks built on top of it.

Operations are recorded on the active Tape in the order they run, which is
already a topological order; the reverse pass walks the records backwards and
visits each one exactly once.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import DimensionError, UnsupportedOpError
from .rng import Rng

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu", "softplus")
PRIMITIVES = (
    "add", "sub", "mul", "neg", "affine", "tanh", "relu", "softplus",
    "sum", "mean", "logsumexp", "index_select", "square", "log", "exp",
)

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense n-dimensional float64 array that can take part in a Tape."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._tracked = requires_grad

    @property
    def shape(self) -> List[int]:
        return list(self.data.shape)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self._tracked})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UnsupportedOpError("division by a Tensor is not a supported primitive")
        return mul(self, 1.0 / float(other))

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        dispatch = {np.add: add, np.subtract: sub, np.multiply: mul}
        if method == "__call__" and ufunc in dispatch and not kwargs:
            return dispatch[ufunc](*inputs)
        raise UnsupportedOpError(f"numpy '{ufunc.__name__}' is not a differentiable primitive")


class Tape:
    """Records differentiable operations for a single reverse pass."""

    def __init__(self):
        self.records: List[Tuple[str, Tensor, Tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def record(self, op: str, out: Tensor, parents: Tuple[Tensor, ...], backward: Callable):
        if op not in PRIMITIVES:
            raise UnsupportedOpError(f"'{op}' is not a supported primitive")
        self.records.append((op, out, parents, backward))

    def gradient(self, output: Tensor, wrt: Sequence[Tensor]) -> List[np.ndarray]:
        """Gradients of a scalar output with respect to the given tensors."""
        if output.data.size != 1:
            raise DimensionError(f"reverse pass needs a scalar output, got shape {output.shape}")
        grads = {id(output): np.ones_like(output.data)}
        for _, out, parents, backward in reversed(self.records):
            upstream = grads.pop(id(out), None)
            if upstream is None:
                continue
            for parent, local in zip(parents, backward(upstream)):
                if local is None or not parent._tracked:
                    continue
                key = id(parent)
                grads[key] = grads[key] + local if key in grads else local
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, value: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(value)
    tape = active_tape()
    if tape is not None and any(p._tracked for p in parents):
        out._tracked = True
        tape.record(op, out, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- primitives ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ W^T + b for x of shape [D] or [N, D] and W of shape [H, D]."""
    x = _as_tensor(x)
    value = x.data @ weight.data.T + bias.data

    def backward(g):
        grad_x = g @ weight.data
        if x.data.ndim == 1:
            grad_w = np.outer(g, x.data)
            grad_b = g
        else:
            grad_w = g.T @ x.data
            grad_b = g.sum(axis=0)
        return grad_x, grad_w, grad_b

    return _emit("affine", value, (x, weight, bias), backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    value = np.tanh(x.data)
    return _emit("tanh", value, (x,), lambda g: (g * (1.0 - value * value),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    # subgradient at exactly zero is 0
    mask = (x.data > 0).astype(np.float64)
    return _emit("relu", x.data * mask, (x,), lambda g: (g * mask,))


def softplus(x) -> Tensor:
    x = _as_tensor(x)
    return _emit("softplus", np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    value = np.exp(x.data)
    return _emit("exp", value, (x,), lambda g: (g * value,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x) -> Tensor:
    x = _as_tensor(x)
    return _emit("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sum(x, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _emit("sum", np.sum(x.data, axis=axis), (x,), backward)


def mean(x, axis: Optional[int] = None) -> Tensor:
    x = _as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(x.data.shape, float(g) / count),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape) / count,)

    return _emit("mean", np.mean(x.data, axis=axis), (x,), backward)


def logsumexp(v, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(v))) along an axis, stabilised by subtracting the max."""
    v = _as_tensor(v)
    peak = np.max(v.data, axis=axis, keepdims=True)
    shifted = np.exp(v.data - peak)
    total = np.sum(shifted, axis=axis, keepdims=True)
    value = peak + np.log(total)
    weights = shifted / total

    def backward(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (g * weights,)

    return _emit("logsumexp", value if keepdims else np.squeeze(value, axis=axis), (v,), backward)


def index_select(v, index) -> Tensor:
    """Pick v[i, index[i]] from a [N, K] tensor, or v[index] from a [K] tensor."""
    v = _as_tensor(v)
    index = np.asarray(index, dtype=np.int64)
    if v.data.ndim == 1:
        if index.ndim != 0:
            raise DimensionError("a [K] tensor takes a single class index")
        rows = None
    else:
        if index.shape != (v.data.shape[0],):
            raise DimensionError(f"need one index per row, got {index.shape} for {v.shape}")
        rows = np.arange(v.data.shape[0])
    size = v.data.shape[-1]
    if np.any(index < 0) or np.any(index >= size):
        raise IndexError(f"class index out of range [0, {size})")
    value = v.data[index] if rows is None else v.data[rows, index]

    def backward(g):
        grad = np.zeros_like(v.data)
        if rows is None:
            grad[index] = g
        else:
            grad[rows, index] = g
        return (grad,)

    return _emit("index_select", value, (v,), backward)


def log_softmax(v, axis: int = -1) -> Tensor:
    return sub(v, logsumexp(v, axis=axis, keepdims=True))


# --- networks -----------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One layer: an affine map (in_dim -> out_dim) or an elementwise activation."""
    kind: str
    in_dim: int = 0
    out_dim: int = 0


_ACTIVATION_FNS = {"tanh": tanh, "relu": relu, "softplus": softplus}


class Network:
    """Feed-forward stack of affine layers and elementwise nonlinearities."""

    def __init__(self, layers: Sequence[LayerSpec], parameters: Sequence[Tensor],
                 input_dim: int, num_classes: int):
        self.layers = list(layers)
        self.parameters = list(parameters)
        self.input_dim = input_dim
        self.num_classes = num_classes
        self._validate()

    def _validate(self):
        expected = []
        width = self.input_dim
        for layer in self.layers:
            if layer.kind == "affine":
                if layer.in_dim != width:
                    raise DimensionError(f"affine layer expects {layer.in_dim} inputs, previous width is {width}")
                expected += [(layer.out_dim, layer.in_dim), (layer.out_dim,)]
                width = layer.out_dim
            elif layer.kind not in ACTIVATIONS:
                raise UnsupportedOpError(f"unsupported layer '{layer.kind}'")
        if width != self.num_classes:
            raise DimensionError(f"network ends with width {width}, expected {self.num_classes} logits")
        shapes = [tuple(p.data.shape) for p in self.parameters]
        if shapes != expected:
            raise DimensionError(f"parameter shapes {shapes} do not match layers {expected}")

    @classmethod
    def mlp(cls, input_dim: int, hidden: Sequence[int], num_classes: int,
            activation: str = "softplus", rng: Optional[Rng] = None,
            init_scale: float = 1.0) -> "Network":
        """Affine/activation stack with weights drawn N(0, init_scale^2 / fan_in)."""
        if activation not in ACTIVATIONS:
            raise UnsupportedOpError(f"unsupported activation '{activation}'")
        layers, parameters = [], []
        widths = [input_dim, *hidden, num_classes]
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append(LayerSpec("affine", fan_in, fan_out))
            if rng is None:
                weight = np.zeros((fan_out, fan_in))
            else:
                weight = rng.normal((fan_out, fan_in)) * (init_scale / np.sqrt(fan_in))
            parameters += [Tensor(weight), Tensor(np.zeros(fan_out))]
            if i < len(widths) - 2:
                layers.append(LayerSpec(activation))
        return cls(layers, parameters, input_dim, num_classes)

    def apply(self, x: Tensor, parameters: Optional[Sequence[Tensor]] = None) -> Tensor:
        params = iter(self.parameters if parameters is None else parameters)
        h = x
        for layer in self.layers:
            if layer.kind == "affine":
                h = affine(h, next(params), next(params))
            else:
                h = _ACTIVATION_FNS[layer.kind](h)
        return h

    def copy(self) -> "Network":
        return Network(self.layers, [Tensor(p.data.copy()) for p in self.parameters],
                       self.input_dim, self.num_classes)

    @property
    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters]))


def _check_input(net: Network, x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim not in (1, 2) or x.data.shape[-1] != net.input_dim:
        raise DimensionError(f"input of shape {x.shape} does not match input_dim {net.input_dim}")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("network input contains non-finite values")
    return x


def forward(net: Network, x) -> Tensor:
    """Logits for x of shape [D] -> [K] or [N, D] -> [N, K]."""
    return net.apply(_check_input(net, x))


@dataclass
class Gradients:
    value: float
    params: List[Tensor]
    inputs: List[Tensor]


def backprop(net: Network, inputs: Sequence, loss_fn: Callable[..., Tensor],
             wrt_params: bool = True, wrt_inputs: bool = False) -> Gradients:
    """
    Run the network on each input, feed the logits to loss_fn, and differentiate.

    Args:
        net: Network whose parameters are read but never modified.
        inputs: One or more input arrays; loss_fn receives one logits Tensor per input.
        loss_fn: Builds a scalar Tensor from the logits using diffcore primitives.
        wrt_params: Return gradients for every parameter.
        wrt_inputs: Return gradients for every input.

    Returns:
        Gradients with the scalar value and the requested gradient tensors.
    """
    xs = [Tensor(_check_input(net, x).data, requires_grad=wrt_inputs) for x in inputs]
    params = [Tensor(p.data, requires_grad=wrt_params) for p in net.parameters]
    with Tape() as tape:
        logits = [net.apply(x, params) for x in xs]
        loss = loss_fn(*logits)
        if not isinstance(loss, Tensor):
            raise UnsupportedOpError("loss_fn must return a Tensor built from diffcore primitives")
        wrt = (params if wrt_params else []) + (xs if wrt_inputs else [])
        grads = tape.gradient(loss, wrt)
    grad_params = [Tensor(g) for g in grads[:len(params)]] if wrt_params else []
    grad_inputs = [Tensor(g) for g in grads[len(params) if wrt_params else 0:]] if wrt_inputs else []
    return Gradients(value=loss.item(), params=grad_params, inputs=grad_inputs)


def grad_params(net: Network, x, scalar_loss: Callable[[Tensor], Tensor]) -> List[Tensor]:
    """Exact gradients of scalar_loss(forward(net, x)) for every parameter."""
    return backprop(net, [x], scalar_loss, wrt_params=True).params


def grad_input(net: Network, x, scalar: Callable[[Tensor], Tensor]) -> Tensor:
    """Exact gradient of scalar(forward(net, x)) with respect to x."""
    return backprop(net, [x], scalar, wrt_params=False, wrt_inputs=True).inputs[0]


def numerical_gradient(fn: Callable[[np.ndarray], float], at: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    at = np.array(at, dtype=np.float64)
    grad = np.zeros_like(at)
    flat = at.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = fn(at)
        flat[i] = original - h
        lower = fn(at)
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest |a - n| / max(1, |a|, |n|) over all entries."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0
