"""
Small reverse-mode differentiation toolkit on numpy arrays.

Tensor records the closure that pushes gradients to its parents; backward()
walks the recorded graph in reverse topological order. On top of it:
dense layers, an LSTM cell, squashed-Gaussian policy heads, Adam, soft target
updates and an npz checkpoint format.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "endonav-checkpoint/1"
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


class ShapeError(ValueError):
    """Operand shapes do not match what the operation expects."""


class NonFiniteError(RuntimeError):
    """A loss, parameter or activation became NaN or infinite."""


_grad_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_mode, 'enabled', True)


@contextmanager
def no_grad():
    """Build no graph inside this block (inference, target computation)."""
    previous = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence[float]]


class Tensor:
    __slots__ = ('data', 'grad', 'requires_grad', '_parents', '_backward', 'name')

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[], None]] = None
        self.name = name

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> 'Tensor':
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + g

    def backward(self):
        """Accumulate d(self)/d(leaf) into every leaf's .grad; self must be a scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data) if self.grad is None else self.grad + 1.0
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # operators
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, k: float): return power(self, k)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[Tensor], None]) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = lambda: backward(out)
    return out


# ----------------------------------------------------------------------
# Elementwise and structural ops
# ----------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(out):
        a._accumulate(out.grad)
        b._accumulate(out.grad)
    return _result(a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(out):
        a._accumulate(out.grad)
        b._accumulate(-out.grad)
    return _result(a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(out):
        a._accumulate(out.grad * b.data)
        b._accumulate(out.grad * a.data)
    return _result(a.data * b.data, (a, b), backward)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(out):
        a._accumulate(out.grad / b.data)
        b._accumulate(-out.grad * a.data / (b.data ** 2))
    return _result(a.data / b.data, (a, b), backward)


def power(a: ArrayLike, k: float) -> Tensor:
    a = as_tensor(a)

    def backward(out):
        a._accumulate(out.grad * k * a.data ** (k - 1))
    return _result(a.data ** k, (a,), backward)


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(out):
        a._accumulate(out.grad * 2.0 * a.data)
    return _result(a.data * a.data, (a,), backward)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(out):
        a._accumulate(out.grad @ b.data.T)
        b._accumulate(a.data.T @ out.grad)
    return _result(a.data @ b.data, (a, b), backward)


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(out):
        a._accumulate(out.grad.T)
    return _result(a.data.T, (a,), backward)


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward(out):
        a._accumulate(out.grad * (1.0 - y * y))
    return _result(y, (a,), backward)


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = expit(a.data)

    def backward(out):
        a._accumulate(out.grad * y * (1.0 - y))
    return _result(y, (a,), backward)


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(out):
        a._accumulate(out.grad * (a.data > 0))
    return _result(np.maximum(a.data, 0.0), (a,), backward)


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)

    def backward(out):
        a._accumulate(out.grad * y)
    return _result(y, (a,), backward)


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(out):
        a._accumulate(out.grad / a.data)
    return _result(np.log(a.data), (a,), backward)


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.logaddexp(0.0, a.data)

    def backward(out):
        a._accumulate(out.grad * expit(a.data))
    return _result(y, (a,), backward)


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def backward(out):
        a._accumulate(np.where(take_a, out.grad, 0.0))
        b._accumulate(np.where(take_a, 0.0, out.grad))
    return _result(np.minimum(a.data, b.data), (a, b), backward)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())
    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / count)


def getitem(a: ArrayLike, idx) -> Tensor:
    a = as_tensor(a)

    def backward(out):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        a._accumulate(g)
    return _result(a.data[idx], (a,), backward)


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)

    def backward(out):
        a._accumulate(out.grad.reshape(a.shape))
    return _result(a.data.reshape(shape), (a,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(out):
        for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
            t._accumulate(g)
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(out):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(out.grad, i, axis=axis))
    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    'tanh': tanh,
    'relu': relu,
    'linear': lambda x: x,
    'sigmoid': sigmoid,
}


# ----------------------------------------------------------------------
# Parameters
# ----------------------------------------------------------------------

class ParamStore:
    """Ordered named parameters. Shapes are fixed once a name is added."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.updates = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter '{name}' already exists")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def dense(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(in_dim)
        self.add(f"{name}.W", rng.uniform(-bound, bound, size=(out_dim, in_dim)))
        self.add(f"{name}.b", rng.uniform(-bound, bound, size=(out_dim,)))

    def mlp(self, name: str, sizes: Sequence[int], rng: np.random.Generator):
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.dense(f"{name}.{i}", n_in, n_out, rng)

    def lstm(self, name: str, in_dim: int, hidden: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(hidden)
        self.add(f"{name}.Wx", rng.uniform(-bound, bound, size=(4 * hidden, in_dim)))
        self.add(f"{name}.Wh", rng.uniform(-bound, bound, size=(4 * hidden, hidden)))
        self.add(f"{name}.b", rng.uniform(-bound, bound, size=(4 * hidden,)))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in self.params.items()}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def schema(self) -> Dict[str, Tuple[int, ...]]:
        return {name: t.shape for name, t in self.params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise ShapeError(f"parameter schema mismatch: missing {missing}, unexpected {extra}")
        for name, value in arrays.items():
            if value.shape != self.params[name].shape:
                raise ShapeError(f"'{name}': shape {value.shape} != {self.params[name].shape}")
            self.params[name].data = np.array(value, dtype=np.float64)

    def copy(self) -> 'ParamStore':
        clone = ParamStore()
        for name, t in self.params.items():
            clone.add(name, t.data.copy())
        clone.updates = self.updates
        return clone

    def non_finite(self) -> List[str]:
        return [name for name, t in self.params.items() if not np.all(np.isfinite(t.data))]

    def check_finite(self, context: str = ""):
        bad = self.non_finite()
        if bad:
            raise NonFiniteError(f"{context}non-finite parameters: {bad}")


def parameter_count(store: ParamStore) -> int:
    return int(sum(t.data.size for t in store.params.values()))


# ----------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------

def dense_forward(store: ParamStore, name: str, x: ArrayLike, activation: str = 'linear') -> Tensor:
    """y = act(x W^T + b) for a batch x of shape (B, in)."""
    x = as_tensor(x)
    W, b = store[f"{name}.W"], store[f"{name}.b"]
    if x.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ShapeError(f"{name}: input shape {x.shape} does not match weight {W.shape}")
    return ACTIVATIONS[activation](x @ W.T + b)


def mlp_forward(store: ParamStore, name: str, x: ArrayLike, layers: int,
                activation: str = 'relu', output_activation: str = 'linear') -> Tensor:
    h = as_tensor(x)
    for i in range(layers):
        act = output_activation if i == layers - 1 else activation
        h = dense_forward(store, f"{name}.{i}", h, act)
    return h


@dataclass
class RecurrentState:
    hidden: Tensor
    cell: Tensor

    @classmethod
    def zeros(cls, batch: int, size: int) -> 'RecurrentState':
        return cls(Tensor(np.zeros((batch, size))), Tensor(np.zeros((batch, size))))

    @property
    def size(self) -> int:
        return self.hidden.shape[-1]

    def detach(self) -> 'RecurrentState':
        return RecurrentState(self.hidden.detach(), self.cell.detach())

    def copy(self) -> 'RecurrentState':
        return RecurrentState(Tensor(self.hidden.data.copy()), Tensor(self.cell.data.copy()))


def lstm_step(store: ParamStore, name: str, x: ArrayLike,
              state: RecurrentState) -> Tuple[Tensor, RecurrentState]:
    """One LSTM update; gate order in the stacked weights is input, forget, candidate, output."""
    x = as_tensor(x)
    Wx, Wh, b = store[f"{name}.Wx"], store[f"{name}.Wh"], store[f"{name}.b"]
    H = Wh.shape[1]
    if x.ndim != 2 or x.shape[1] != Wx.shape[1]:
        raise ShapeError(f"{name}: input shape {x.shape} does not match {Wx.shape}")
    if state.hidden.shape != (x.shape[0], H) or state.cell.shape != (x.shape[0], H):
        raise ShapeError(f"{name}: state shape {state.hidden.shape} does not match hidden size {H}")
    z = x @ Wx.T + state.hidden @ Wh.T + b
    i = sigmoid(z[:, 0:H])
    f = sigmoid(z[:, H:2 * H])
    g = tanh(z[:, 2 * H:3 * H])
    o = sigmoid(z[:, 3 * H:4 * H])
    cell = f * state.cell + i * g
    hidden = o * tanh(cell)
    return hidden, RecurrentState(hidden, cell)


# ----------------------------------------------------------------------
# Squashed Gaussian policy head
# ----------------------------------------------------------------------

def bounded_log_std(raw: Tensor) -> Tensor:
    return LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (tanh(raw) + 1.0)


def squashed_gaussian(mean_: Tensor, log_std: Tensor, noise: np.ndarray) -> Tuple[Tensor, Tensor]:
    """
    Reparameterised tanh-Gaussian sample and its log-probability (summed over
    action dimensions). noise is standard normal with the shape of mean_.
    """
    u = mean_ + exp(log_std) * noise
    action = tanh(u)
    gauss = -0.5 * np.square(noise) - 0.5 * math.log(2.0 * math.pi) - log_std
    # log(1 - tanh(u)^2) in a stable form
    squash = 2.0 * (math.log(2.0) - u - softplus(-2.0 * u))
    log_prob = tsum(gauss - squash, axis=-1)
    return action, log_prob


# ----------------------------------------------------------------------
# Optimisation
# ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0


def adam_update(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
                lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
                ) -> Dict[str, np.ndarray]:
    """Bias-corrected Adam step; returns new arrays and advances state in place."""
    state.t += 1
    updated = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"'{name}': gradient shape {g.shape} != parameter shape {p.shape}")
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - beta1 ** state.t)
        v_hat = v / (1.0 - beta2 ** state.t)
        updated[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return updated


class Adam:
    def __init__(self, store: ParamStore, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, names: Optional[Iterable[str]] = None):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.names = list(names) if names is not None else list(store)
        self.state = AdamState({}, {})

    def step(self):
        params = {n: self.store[n].data for n in self.names}
        grads = self.store.grads()
        grads = {n: grads[n] for n in self.names}
        updated = adam_update(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        for name, value in updated.items():
            self.store[name].data = value
        self.store.updates += 1

    def arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {f"{prefix}/t": np.array(self.state.t)}
        for name in self.state.m:
            out[f"{prefix}/m/{name}"] = self.state.m[name]
            out[f"{prefix}/v/{name}"] = self.state.v[name]
        return out

    def load(self, arrays: Dict[str, np.ndarray], prefix: str):
        self.state = AdamState({}, {}, int(arrays[f"{prefix}/t"]))
        for key, value in arrays.items():
            if key.startswith(f"{prefix}/m/"):
                self.state.m[key[len(prefix) + 3:]] = value
            elif key.startswith(f"{prefix}/v/"):
                self.state.v[key[len(prefix) + 3:]] = value


def soft_update(target: ParamStore, source: ParamStore, tau: float) -> ParamStore:
    """target <- (1 - tau) * target + tau * source."""
    if target.schema() != source.schema():
        raise ShapeError("soft_update: target and source schemas differ")
    for name, t in target.items():
        t.data = (1.0 - tau) * t.data + tau * source[name].data
    return target


# ----------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------

def save_checkpoint(path: Path, stores: Dict[str, ParamStore], optimizers: Dict[str, Adam],
                    meta: Optional[dict] = None) -> None:
    """Write named arrays and optimizer moments to an npz file atomically."""
    path = Path(path)
    arrays: Dict[str, np.ndarray] = {}
    for store_name, store in stores.items():
        for name, t in store.items():
            arrays[f"param/{store_name}/{name}"] = t.data
        arrays[f"updates/{store_name}"] = np.array(store.updates)
    for opt_name, opt in optimizers.items():
        arrays.update(opt.arrays(f"opt/{opt_name}"))
    header = {'format': CHECKPOINT_FORMAT, 'meta': meta or {}}
    arrays['__header__'] = np.array(json.dumps(header))
    temp_file = path.with_name(path.name + '.tmp')
    with open(temp_file, 'wb') as f:
        np.savez(f, **arrays)
    temp_file.replace(path)
    logger.debug("checkpoint %s: %d arrays", path, len(arrays))


def load_checkpoint(path: Path) -> Tuple[Dict[str, Dict[str, np.ndarray]], Dict[str, np.ndarray], dict]:
    """Returns ({store: {param: array}}, optimizer arrays, meta)."""
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {key: data[key] for key in data.files}
    header = json.loads(str(arrays.pop('__header__')))
    if header.get('format') != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
    stores: Dict[str, Dict[str, np.ndarray]] = {}
    optim: Dict[str, np.ndarray] = {}
    for key, value in arrays.items():
        if key.startswith('param/'):
            _, store_name, name = key.split('/', 2)
            stores.setdefault(store_name, {})[name] = value
        elif key.startswith('opt/') or key.startswith('updates/'):
            optim[key] = value
    return stores, optim, header.get('meta', {})


def restore(stores: Dict[str, ParamStore], optimizers: Dict[str, Adam],
            saved: Dict[str, Dict[str, np.ndarray]], optim: Dict[str, np.ndarray]):
    for store_name, store in stores.items():
        store.load_arrays(saved[store_name])
        store.updates = int(optim.get(f"updates/{store_name}", 0))
    for opt_name, opt in optimizers.items():
        prefix = f"opt/{opt_name}"
        opt.load({k: v for k, v in optim.items() if k.startswith(prefix + '/')}, prefix)


def check_losses(losses: Dict[str, float], stores: Dict[str, ParamStore]):
    """Raise NonFiniteError listing each loss term and any non-finite parameters."""
    bad_params = {name: store.non_finite() for name, store in stores.items()}
    bad_params = {k: v for k, v in bad_params.items() if v}
    if all(math.isfinite(v) for v in losses.values()) and not bad_params:
        return
    terms = ", ".join(f"{k}={v:.6g}" for k, v in losses.items())
    raise NonFiniteError(f"non-finite update ({terms}); non-finite parameters: {bad_params or 'none'}")
