"""
Graph Core - reverse-mode differentiation over numpy arrays
Per-computation tape, explicit graph cuts, finite-difference oracle
"""

import logging
import threading
from contextlib import contextmanager
from functools import partial
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    """Raised for invalid graph construction; names the op and the shapes involved"""

    def __init__(self, message: str, op: str = None, shapes: Iterable = ()):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        prefix = f"[{op}] " if op else ""
        suffix = f" (shapes: {', '.join(str(list(s)) for s in self.shapes)})" if self.shapes else ""
        super().__init__(f"{prefix}{message}{suffix}")


class GraphValue:
    """
    One node of a differentiation graph

    Leaves carry a name (the parameter path) when they require grad.
    Interior nodes keep their parents and a closure producing the
    vector-Jacobian products for each parent.
    """

    __slots__ = ('data', 'requires_grad', 'name', 'op', 'parents', '_vjp')

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 op: Optional[str] = None, parents: Tuple['GraphValue', ...] = (),
                 vjp: Optional[Callable] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self.parents = parents
        self._vjp = vjp

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = self.name or self.op or 'const'
        return f"GraphValue({label}, shape={list(self.shape)}, requires_grad={self.requires_grad})"

    # Operator sugar, all routed through record()
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)


ValueLike = Union[GraphValue, np.ndarray, float, int]


def constant(data) -> GraphValue:
    """Wrap an array as a value that never receives gradient"""
    return GraphValue(np.array(data, dtype=np.float64))


def leaf(data, name: str) -> GraphValue:
    """Gradient-enabled leaf; its gradient is reported under `name`"""
    if not name:
        raise GraphError("gradient-enabled leaves need a name", 'leaf')
    return GraphValue(np.ascontiguousarray(np.array(data, dtype=np.float64)), requires_grad=True, name=name)


def _as_value(x: ValueLike) -> GraphValue:
    return x if isinstance(x, GraphValue) else constant(x)


# ============================================================================
# NODE COUNTING (thread-local)
# ============================================================================
_local = threading.local()


class NodeCounter:
    """Counts interior nodes recorded on the current thread"""

    def __init__(self):
        self.total = 0


@contextmanager
def count_nodes() -> Iterator[NodeCounter]:
    counter = NodeCounter()
    stack = getattr(_local, 'counters', None)
    if stack is None:
        stack = _local.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _bump_counters():
    for counter in getattr(_local, 'counters', ()):
        counter.total += 1


# ============================================================================
# OP REGISTRY
# ============================================================================
_OPS: Dict[str, Tuple[Callable, Callable]] = {}


def defvjp(op_kind: str, forward: Callable, vjp: Callable):
    """Register an op: forward(*arrays, **attrs) and vjp(g, out, *arrays, **attrs)"""
    _OPS[op_kind] = (forward, vjp)


def registered_ops() -> List[str]:
    return sorted(_OPS)


def record(op_kind: str, inputs: Sequence[ValueLike], **attrs) -> GraphValue:
    """Evaluate op_kind on inputs, keeping parent edges when any input requires grad"""
    if op_kind not in _OPS:
        raise GraphError("unknown op kind", op_kind)
    forward, vjp = _OPS[op_kind]
    values = tuple(_as_value(v) for v in inputs)
    arrays = tuple(v.data for v in values)
    try:
        with np.errstate(over='ignore'):
            out = np.asarray(forward(*arrays, **attrs), dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise GraphError(str(exc), op_kind, [a.shape for a in arrays]) from exc

    if not any(v.requires_grad for v in values):
        return GraphValue(out)

    _bump_counters()
    return GraphValue(out, requires_grad=True, op=op_kind, parents=values,
                      vjp=partial(vjp, out=out, arrays=arrays, attrs=attrs))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise ------------------------------------------------------------
defvjp('add', np.add,
       lambda g, out, arrays, attrs: (_unbroadcast(g, arrays[0].shape), _unbroadcast(g, arrays[1].shape)))
defvjp('sub', np.subtract,
       lambda g, out, arrays, attrs: (_unbroadcast(g, arrays[0].shape), _unbroadcast(-g, arrays[1].shape)))
defvjp('mul', np.multiply,
       lambda g, out, arrays, attrs: (_unbroadcast(g * arrays[1], arrays[0].shape),
                                      _unbroadcast(g * arrays[0], arrays[1].shape)))
defvjp('div', np.divide,
       lambda g, out, arrays, attrs: (_unbroadcast(g / arrays[1], arrays[0].shape),
                                      _unbroadcast(-g * arrays[0] / arrays[1] ** 2, arrays[1].shape)))
defvjp('neg', np.negative, lambda g, out, arrays, attrs: (-g,))
defvjp('exp', np.exp, lambda g, out, arrays, attrs: (g * out,))
defvjp('log', np.log, lambda g, out, arrays, attrs: (g / arrays[0],))
defvjp('tanh', np.tanh, lambda g, out, arrays, attrs: (g * (1.0 - out ** 2),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu_vjp(g, out, arrays, attrs):
    x = arrays[0]
    s = _sigmoid(x)
    return (g * (s + x * s * (1.0 - s)),)


defvjp('silu', lambda x: x * _sigmoid(x), _silu_vjp)
defvjp('clamp', lambda x, lo, hi: np.clip(x, lo, hi),
       lambda g, out, arrays, attrs: (g * ((arrays[0] >= attrs['lo']) & (arrays[0] <= attrs['hi'])),))


# --- linear algebra -----------------------------------------------------------
def _matmul_forward(a, b):
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul needs at least 1-d operands")
    if a.shape[-1] != (b.shape[0] if b.ndim == 1 else b.shape[-2]):
        raise ValueError("inner dimensions differ")
    return np.matmul(a, b)


def _matmul_vjp(g, out, arrays, attrs):
    a, b = arrays
    a2 = a[np.newaxis, :] if a.ndim == 1 else a
    b2 = b[:, np.newaxis] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
    gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
    if a.ndim == 1:
        ga = ga.squeeze(-2)
    if b.ndim == 1:
        gb = gb.squeeze(-1)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


defvjp('matmul', _matmul_forward, _matmul_vjp)


# --- reductions ---------------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    if not keepdims:
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def _reduced_count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[a] for a in axes]))


defvjp('sum', lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
       lambda g, out, arrays, attrs: (
           _expand_reduced(g, arrays[0].shape, attrs.get('axis'), attrs.get('keepdims', False)).copy(),))
defvjp('mean', lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims),
       lambda g, out, arrays, attrs: (
           _expand_reduced(g, arrays[0].shape, attrs.get('axis'), attrs.get('keepdims', False))
           / _reduced_count(arrays[0].shape, attrs.get('axis')),))


def _softmax_forward(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_vjp(g, out, arrays, attrs):
    axis = attrs.get('axis', -1)
    return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)


defvjp('softmax', _softmax_forward, _softmax_vjp)


# --- structure ----------------------------------------------------------------
def _concat_vjp(g, out, arrays, attrs):
    axis = attrs.get('axis', 0)
    sizes = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, sizes, axis=axis))


defvjp('concat', lambda *arrays, axis=0: np.concatenate(arrays, axis=axis), _concat_vjp)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def _slice_vjp(g, out, arrays, attrs):
    grad = np.zeros_like(arrays[0])
    index = attrs["index"]
    if _is_basic_index(index):
        grad[index] += g
    else:
        np.add.at(grad, index, g)
    return (grad,)


defvjp('slice', lambda a, index: a[index], _slice_vjp)


def _take_rows_vjp(g, out, arrays, attrs):
    grad = np.zeros_like(arrays[0])
    np.add.at(grad, attrs['rows'], g)
    return (grad,)


def _take_rows_forward(a, rows):
    if np.any(np.asarray(rows) >= a.shape[0]) or np.any(np.asarray(rows) < 0):
        raise IndexError("row index out of range")
    return a[rows]


defvjp('take_rows', _take_rows_forward, _take_rows_vjp)


def _permute_forward(a, order):
    if a.ndim < 2 or a.shape[-2] != len(order):
        raise ValueError("permutation length differs from token count")
    return np.take(a, order, axis=-2)


defvjp('permute_tokens', _permute_forward,
       lambda g, out, arrays, attrs: (np.take(g, np.argsort(attrs['order']), axis=-2),))
defvjp('reshape', lambda a, shape: np.reshape(a, shape),
       lambda g, out, arrays, attrs: (np.reshape(g, arrays[0].shape),))
defvjp('swap_last', lambda a: np.swapaxes(a, -1, -2),
       lambda g, out, arrays, attrs: (np.swapaxes(g, -1, -2),))
defvjp('broadcast_to', lambda a, shape: np.broadcast_to(a, shape).copy(),
       lambda g, out, arrays, attrs: (_unbroadcast(g, arrays[0].shape),))


# --- similarity and attention -------------------------------------------------
def _cosine_parts(a, b):
    na = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    nb = np.sqrt(np.sum(b * b, axis=-1, keepdims=True))
    denom = na * nb
    safe = np.where(denom > 0, denom, 1.0)
    cos = np.where(denom > 0, np.sum(a * b, axis=-1, keepdims=True) / safe, 0.0)
    return na, nb, denom, safe, cos


def _cosine_forward(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ValueError("feature dimensions differ")
    return _cosine_parts(a, b)[-1][..., 0]


def _cosine_vjp(g, out, arrays, attrs):
    a, b = arrays
    na, nb, denom, safe, cos = _cosine_parts(a, b)
    live = denom > 0
    g = g[..., np.newaxis]
    safe_na = np.where(na > 0, na, 1.0)
    safe_nb = np.where(nb > 0, nb, 1.0)
    ga = np.where(live, g * (b / safe - cos * a / safe_na ** 2), 0.0)
    gb = np.where(live, g * (a / safe - cos * b / safe_nb ** 2), 0.0)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


defvjp('cosine_similarity', _cosine_forward, _cosine_vjp)
defvjp('masked', lambda a, mask: np.where(mask, a, -np.inf),
       lambda g, out, arrays, attrs: (np.where(attrs['mask'], g, 0.0),))


# ============================================================================
# FUNCTIONAL API
# ============================================================================
def add(a, b): return record('add', [a, b])
def sub(a, b): return record('sub', [a, b])
def mul(a, b): return record('mul', [a, b])
def div(a, b): return record('div', [a, b])
def neg(a): return record('neg', [a])
def exp(a): return record('exp', [a])
def log(a): return record('log', [a])
def tanh(a): return record('tanh', [a])
def silu(a): return record('silu', [a])
def matmul(a, b): return record('matmul', [a, b])
def swap_last(a): return record('swap_last', [a])


def clamp(a, lo: float, hi: float) -> GraphValue:
    return record('clamp', [a], lo=lo, hi=hi)


def reduce_sum(a, axis=None, keepdims: bool = False) -> GraphValue:
    return record('sum', [a], axis=axis, keepdims=keepdims)


def reduce_mean(a, axis=None, keepdims: bool = False) -> GraphValue:
    return record('mean', [a], axis=axis, keepdims=keepdims)


def softmax(a, axis: int = -1) -> GraphValue:
    return record('softmax', [a], axis=axis)


def concat(values: Sequence[ValueLike], axis: int = 0) -> GraphValue:
    return record('concat', list(values), axis=axis)


def take_slice(a, index) -> GraphValue:
    return record('slice', [a], index=index)


def take_rows(a, rows) -> GraphValue:
    return record('take_rows', [a], rows=np.asarray(rows, dtype=np.int64))


def permute_tokens(a, order) -> GraphValue:
    return record('permute_tokens', [a], order=np.asarray(order, dtype=np.int64))


def reshape(a, shape) -> GraphValue:
    return record('reshape', [a], shape=tuple(shape))


def broadcast_to(a, shape) -> GraphValue:
    return record('broadcast_to', [a], shape=tuple(shape))


def cosine_similarity(a, b) -> GraphValue:
    """Cosine similarity over the last axis; zero-norm rows give 0"""
    return record('cosine_similarity', [a, b])


def masked(a, mask: np.ndarray) -> GraphValue:
    """Entries where mask is False become -inf (attention masking)"""
    return record('masked', [a], mask=np.asarray(mask, dtype=bool))


def cut(v: GraphValue) -> GraphValue:
    """Same numbers, no parents, no gradient: a stop-gradient"""
    return GraphValue(np.array(v.data))


# ============================================================================
# BACKWARD
# ============================================================================
def _topological_order(root: GraphValue) -> List[GraphValue]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: GraphValue) -> Dict[str, np.ndarray]:
    """
    Gradients of a scalar loss, keyed by leaf name

    Leaves not reachable through uncut edges get no entry at all.
    """
    if loss.shape != ():
        raise GraphError("loss must be a scalar", 'backward', [loss.shape])
    if not loss.requires_grad:
        return {}

    order = _topological_order(loss)
    pending: Dict[int, np.ndarray] = {id(loss): np.ones(())}
    grads: Dict[str, np.ndarray] = {}

    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.name in grads:
                grads[node.name] = grads[node.name] + g
            else:
                grads[node.name] = np.array(g, dtype=np.float64)
            continue
        for parent, parent_grad in zip(node.parents, node._vjp(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    return grads


# ============================================================================
# PARAMETERS
# ============================================================================
class ParamSet:
    """Named gradient-enabled leaves; iteration is lexicographic by path"""

    def __init__(self):
        self._values: Dict[str, GraphValue] = {}

    def add(self, name: str, array) -> GraphValue:
        if name in self._values:
            raise GraphError(f"duplicate parameter name '{name}'", 'ParamSet')
        value = leaf(array, name)
        self._values[name] = value
        return value

    def __getitem__(self, name: str) -> GraphValue:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._values))

    def names(self) -> List[str]:
        return sorted(self._values)

    def items(self) -> List[Tuple[str, GraphValue]]:
        return [(name, self._values[name]) for name in sorted(self._values)]

    def with_prefix(self, prefix: str) -> List[str]:
        return [name for name in self.names() if name.startswith(prefix)]

    def arrays(self) -> Dict[str, np.ndarray]:
        """Snapshot copy of every parameter array"""
        return {name: value.data.copy() for name, value in self.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True):
        """Copy arrays into the existing leaves (shapes must match)"""
        if strict and set(arrays) != set(self._values):
            missing = sorted(set(self._values) - set(arrays))
            extra = sorted(set(arrays) - set(self._values))
            raise GraphError(f"parameter names differ (missing={missing[:5]}, extra={extra[:5]})", 'ParamSet')
        for name, array in arrays.items():
            if name not in self._values:
                continue
            target = self._values[name]
            if target.data.shape != np.shape(array):
                raise GraphError(f"shape mismatch for '{name}'", 'ParamSet', [target.data.shape, np.shape(array)])
            target.data[...] = array

    def copy(self) -> 'ParamSet':
        clone = ParamSet()
        for name, value in self.items():
            clone.add(name, value.data.copy())
        return clone

    def num_scalars(self) -> int:
        return int(np.sum([value.data.size for value in self._values.values()]))


# ============================================================================
# FINITE DIFFERENCES
# ============================================================================
def _scalar_of(result) -> float:
    value = result.data if isinstance(result, GraphValue) else np.asarray(result)
    if np.shape(value) != ():
        raise GraphError("objective must return a scalar", 'finite_diff_grad', [np.shape(value)])
    return float(value)


def finite_diff_grad(f: Callable[[ParamSet], ValueLike], params: ParamSet,
                     epsilon: float = 1e-6, names: Optional[Sequence[str]] = None) -> Dict[str, np.ndarray]:
    """Central differences (f(p+eps) - f(p-eps)) / (2 eps) for every scalar entry"""
    if epsilon <= 0:
        raise GraphError("epsilon must be positive", 'finite_diff_grad')

    grads = {}
    for name in (names if names is not None else params.names()):
        flat = params[name].data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + epsilon
            f_plus = _scalar_of(f(params))
            flat[i] = original - epsilon
            f_minus = _scalar_of(f(params))
            flat[i] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GraphError(f"objective is not finite around '{name}'[{i}]", 'finite_diff_grad')
            g[i] = (f_plus - f_minus) / (2.0 * epsilon)
        grads[name] = g.reshape(params[name].data.shape)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max per-element |a - n| / max(|a|, floor)"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.abs(analytic), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
