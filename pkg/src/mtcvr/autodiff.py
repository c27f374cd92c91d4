"""Small reverse-mode autodiff over float64 numpy arrays.

Only what an embedding table plus a few MLP towers need: elementwise
arithmetic with broadcasting, matmul, reductions, the usual activations,
a sum-pooled embedding lookup and an Adam optimizer.  Every node keeps a
closure that pushes its output gradient to its parents; ``backward``
walks the graph in reverse topological order.
"""

import struct
import json

import numpy as np

from .errors import ContractError, DimensionError, InputError

PROB_EPS = 1e-7


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")
    # make ``ndarray * Tensor`` dispatch to Tensor.__rmul__
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward=None, requires_grad=False, name=None):
        self.value = _as_array(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def item(self):
        return float(self.value)

    def numpy(self):
        return self.value

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}{label})"

    # -- graph traversal -------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.value.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.value.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.value)
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors):
    return any(t.requires_grad or t._backward is not None for t in tensors)


def _node(value, parents, backward):
    if not _tracked(*parents):
        return Tensor(value)
    return Tensor(value, parents=parents, backward=backward)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not chain")
    av, bv = a.value, b.value
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def tsum(a, axis=None):
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.value.sum(axis=axis), (a,), back)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid(a.value)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def softplus(a):
    a = as_tensor(a)
    x = a.value
    return _node(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))


def log(a):
    a = as_tensor(a)
    x = a.value
    return _node(np.log(x), (a,), lambda g: (g / x,))


def square(a):
    a = as_tensor(a)
    x = a.value
    return _node(x * x, (a,), lambda g: (2.0 * g * x,))


def clip(a, lo, hi):
    a = as_tensor(a)
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return _node(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def maximum(a, floor):
    """Elementwise ``max(a, floor)`` against a constant floor."""
    a = as_tensor(a)
    x = a.value
    keep = x >= floor
    return _node(np.maximum(x, floor), (a,), lambda g: (g * keep,))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


class _HeldValues:
    """Record the values passed through :func:`stop`, then replay them."""

    def __init__(self):
        self.values = []
        self.replaying = False
        self.pos = 0

    def take(self, value):
        if not self.replaying:
            self.values.append(value.copy())
            return value
        held = self.values[self.pos]
        self.pos += 1
        return held


_held = None


def stop(a):
    """Numpy value of ``a`` that gradients do not flow through.

    Inside :func:`finite_difference_check` the value from the unperturbed
    pass is replayed, so numeric derivatives see it as the constant that
    backprop assumes.
    """
    value = as_tensor(a).value
    return _held.take(value) if _held is not None else value


def detach(a):
    """Same values, no gradient path."""
    return Tensor(stop(a))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), back)


def embedding_bag(table, ids):
    """Sum-pool rows of ``table`` selected by a padded id matrix.

    ``ids`` is ``(batch, max_len)`` with ``-1`` as padding.
    """
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DimensionError(f"ids must be 2-D (batch, max_len), got shape {ids.shape}")
    mask = ids >= 0
    safe = np.where(mask, ids, 0)
    rows = table.value[safe] * mask[..., None]
    flat_ids = safe[mask]
    rows_per_record = mask.sum(axis=1)

    def back(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, flat_ids, np.repeat(g, rows_per_record, axis=0))
        return (gt,)

    return _node(rows.sum(axis=1), (table,), back)


# -- parameters and optimizer ---------------------------------------------


class ParameterStore:
    """Named leaf tensors with gradient accumulators."""

    def __init__(self):
        self._params = {}

    def add(self, name, value):
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        t.grad = np.zeros_like(t.value)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix=""):
        return [n for n in self._params if n.startswith(prefix)]

    def zero_grad(self):
        for t in self._params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.value)
            else:
                t.grad.fill(0.0)

    def grads(self):
        return {n: t.grad for n, t in self._params.items()}

    def values(self):
        return {n: t.value for n, t in self._params.items()}

    def copy_values(self):
        return {n: t.value.copy() for n, t in self._params.items()}

    def load_values(self, values):
        for name, v in values.items():
            target = self._params[name]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != target.value.shape:
                raise DimensionError(f"{name}: expected shape {target.value.shape}, got {v.shape}")
            target.value[...] = v

    def l2(self, prefix):
        """Sum of squares over every parameter whose name starts with ``prefix``."""
        total = Tensor(0.0)
        for name in self.names(prefix):
            total = total + tsum(square(self._params[name]))
        return total


class Adam:
    """Adam with bias correction; zeroes gradients after each step."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.params.zero_grad()


# -- layers and losses -----------------------------------------------------


def mlp_forward(x, params, prefix, output="sigmoid"):
    """Run the MLP whose layers are ``{prefix}.W0, {prefix}.b0, ...``.

    Hidden layers use ReLU; ``output`` picks the last activation
    (``sigmoid``, ``softplus`` or ``linear``).
    """
    x = as_tensor(x)
    n_layers = 0
    while f"{prefix}.W{n_layers}" in params:
        n_layers += 1
    if n_layers == 0:
        raise DimensionError(f"no layers found under prefix {prefix!r}")
    h = x
    for i in range(n_layers):
        w, b = params[f"{prefix}.W{i}"], params[f"{prefix}.b{i}"]
        if h.shape[-1] != w.shape[0]:
            raise DimensionError(
                f"layer {prefix}.W{i} expects input width {w.shape[0]}, got {h.shape[-1]}")
        h = matmul(h, w) + b
        if i < n_layers - 1:
            h = relu(h)
    if output == "sigmoid":
        return sigmoid(h)
    if output == "softplus":
        return softplus(h)
    if output == "linear":
        return h
    raise ValueError(f"unknown output activation {output!r}")


def _check_probabilities(p):
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise InputError("predictions must lie in [0, 1]")


def binary_cross_entropy(label, prediction):
    """Elementwise -y log p - (1-y) log(1-p) with p clipped to [1e-7, 1-1e-7].

    ``label`` may be soft (any value in [0, 1]).  Accepts tensors or arrays;
    returns a tensor of the broadcast shape.
    """
    pred = as_tensor(prediction)
    _check_probabilities(pred.value)
    y = as_tensor(label)
    p = clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    return -(y * log(p) + (1.0 - y) * log(1.0 - p))


def bce(label, prediction):
    """Plain numpy cross-entropy, same clipping as :func:`binary_cross_entropy`."""
    p = np.asarray(prediction, dtype=np.float64)
    _check_probabilities(p)
    y = np.asarray(label, dtype=np.float64)
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


# -- gradient checking -----------------------------------------------------


def finite_difference_check(loss_fn, params, h=1e-5, tol=1e-4, names=None, floor=1e-6):
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` takes no arguments and rebuilds the graph from the current
    parameter values.  Values that pass through :func:`stop` are held at
    their unperturbed values, matching what backprop differentiates.  Relative error per entry is
    ``|a - n| / max(|a|, |n|, floor)``.  Returns ``{name: max_rel_error}``
    plus an overall ``passed`` flag under the key ``"__passed__"``.
    """
    global _held
    first = loss_fn()
    second = loss_fn()
    if first.value.tobytes() != second.value.tobytes():
        raise ContractError("forward pass is not deterministic")

    held = _HeldValues()
    _held = held
    try:
        params.zero_grad()
        loss_fn().backward()
        analytic = {n: t.grad.copy() for n, t in params.items()}
        params.zero_grad()
        held.replaying = True
        report = _numeric_compare(loss_fn, params, analytic, held, h, names, floor)
    finally:
        _held = None
    report["__passed__"] = all(v < tol for k, v in report.items() if k != "__passed__")
    return report


def _numeric_compare(loss_fn, params, analytic, held, h, names, floor):
    def value():
        held.pos = 0
        return loss_fn().item()

    report = {}
    for name in names if names is not None else list(params):
        p = params[name]
        flat = p.value.reshape(-1)
        numeric = np.zeros(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = value()
            flat[j] = orig - h
            down = value()
            flat[j] = orig
            numeric[j] = (up - down) / (2.0 * h)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        report[name] = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    return report


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"MTCVRCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params, metadata=None):
    """Write parameters to a little-endian binary file.

    Layout: magic, u32 version, u32 metadata length, UTF-8 JSON metadata,
    u32 parameter count, then per parameter: u16 name length, name,
    u8 ndim, u32 dims, float64 values.
    """
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.value.ndim))
            fh.write(struct.pack(f"<{t.value.ndim}I", *t.value.shape))
            fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(values, metadata)`` from a file written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    metadata = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    values = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        values[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return values, metadata
