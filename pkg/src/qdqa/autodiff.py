"""Dense float64 tensors with reverse-mode gradients.

Small tape-based engine: each op records its parents and a backward closure.
Shapes follow numpy broadcasting; gradients of broadcast operands are summed
back to the operand's shape.  Everything runs at double precision so central
finite differences are a meaningful oracle.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- autograd plumbing ------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        return mul(self, power(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    needs = any(
        p.requires_grad or p._backward is not None or p._parents
        for p in parents
    )
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- primitives -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    return _make(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data ** exponent
    return _make(
        data,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul requires at least 1-d operands")
    data = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return (g * bd, g * ad)
        if ad.ndim == 1:
            # (k,) @ (..., k, n) -> (..., n)
            ga = (g[..., None, :] * bd).sum(axis=-1)
            ga = _unbroadcast(ga, ad.shape)
            gb = _unbroadcast(ad[..., :, None] * g[..., None, :], bd.shape)
            return (ga, gb)
        if bd.ndim == 1:
            # (..., m, k) @ (k,) -> (..., m)
            ga = _unbroadcast(g[..., :, None] * bd, ad.shape)
            gb = _unbroadcast((g[..., :, None] * ad).sum(axis=-2), bd.shape)
            return (ga, gb)
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return (ga, gb)

    return _make(data, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1, ax2) -> Tensor:
    a = _as_tensor(a)
    data = np.swapaxes(a.data, ax1, ax2)
    return _make(data, (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    data = a.data[idx]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(data, (a,), backward)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return _make(data, tuple(tensors), backward)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / n)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)
    return _make(data, (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.01) -> Tensor:
    a = _as_tensor(a)
    mask = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),))


def softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (a,), backward)


def log_softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    sm = np.exp(data)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(data, (a,), backward)


def layer_norm(a, eps=1e-6) -> Tensor:
    """Normalize over the last axis (no affine parameters)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = centered * inv
    n = a.data.shape[-1]

    def backward(g):
        gx = g * inv
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * data).mean(axis=-1, keepdims=True)
        return (gx - m1 - data * m2,)

    return _make(data, (a,), backward)


def euclidean_distance(a, b, eps=1e-12) -> Tensor:
    """d(a, b) = sqrt(sum((a - b)^2) + eps); grad is 0 at coincident points."""
    a, b = _as_tensor(a), _as_tensor(b)
    diff = a.data - b.data
    data = np.sqrt((diff ** 2).sum() + eps)

    def backward(g):
        ga = g * diff / data
        return (ga, -ga)

    return _make(data, (a, b), backward)


def embedding_lookup(table, indices) -> Tensor:
    """Row lookup into a [vocab, h] table; indices is an int array."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    data = table.data[idx]

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(data, (table,), backward)


def softmax_cross_entropy(logits, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-d logits vector."""
    logits = _as_tensor(logits)
    k = logits.data.shape[-1]
    if not 0 <= target < k:
        raise IndexError(f"target {target} out of range for {k} classes")
    return mul(log_softmax(logits, axis=-1)[target], -1.0)


def softmax_cross_entropy_batch(logits, targets) -> Tensor:
    """Mean CE over the leading axis of [n, k] logits."""
    logits = _as_tensor(logits)
    n = logits.data.shape[0]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.min() < 0 or targets.max() >= logits.data.shape[-1]:
        raise IndexError("target out of range")
    lp = log_softmax(logits, axis=-1)
    picked = getitem(lp, (np.arange(n), targets))
    return mul(reduce_sum(picked), -1.0 / n)


def gumbel_softmax(logits, temperature=1.0, hard=False, rng=None, noise=None) -> Tensor:
    """Gumbel-softmax over the last axis, optionally straight-through hard.

    `noise` overrides sampling (tests freeze it at 0); otherwise standard
    Gumbel(0,1) draws from `rng`.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = _as_tensor(logits)
    if noise is None:
        if rng is None:
            rng = np.random.default_rng()
        u = rng.uniform(low=np.finfo(float).tiny, high=1.0,
                        size=logits.shape)
        noise = -np.log(-np.log(u))
    noisy = add(logits, np.asarray(noise, dtype=np.float64))
    soft = softmax(mul(noisy, 1.0 / temperature), axis=-1)
    if not hard:
        return soft
    onehot = np.zeros_like(soft.data)
    np.put_along_axis(
        onehot, soft.data.argmax(axis=-1, keepdims=True), 1.0, axis=-1
    )
    # Straight-through: forward one-hot, backward through the soft sample.
    delta = onehot - soft.data
    return _make(soft.data + delta, (soft,), lambda g: (g,))


# -- parameters and optimization ------------------------------------------


class ParamStore:
    """Named trainable tensors with seeded deterministic initialization."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, shape, init="uniform") -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "uniform":
            fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
            bound = 1.0 / np.sqrt(fan_in)
            data = self._rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def linear(self, name: str, in_dim: int, out_dim: int):
        """Weight [in, out] + zero bias [out]."""
        w = self.add(f"{name}.w", (in_dim, out_dim))
        b = self.add(f"{name}.b", (out_dim,), init="zeros")
        return w, b

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # Checkpoints: flat little-endian f64 blob + JSON manifest.

    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        manifest = []
        offset = 0
        with open(path / "params.bin", "wb") as fh:
            for name in sorted(self.params):
                t = self.params[name]
                blob = t.data.astype("<f8").tobytes()
                fh.write(blob)
                manifest.append(
                    {"name": name, "shape": list(t.shape), "offset": offset}
                )
                offset += len(blob)
        meta = {"seed": self.seed, "tensors": manifest}
        (path / "manifest.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "ParamStore":
        path = Path(path)
        meta = json.loads((path / "manifest.json").read_text())
        blob = (path / "params.bin").read_bytes()
        store = cls(seed=meta["seed"])
        for entry in meta["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(
                blob, dtype="<f8", count=count, offset=entry["offset"]
            ).reshape(shape)
            store.params[entry["name"]] = Tensor(
                data.copy(), requires_grad=True
            )
        return store

    def load_values(self, other: "ParamStore"):
        """Copy values by name from another store (shapes must match)."""
        for name, t in other.params.items():
            if name not in self.params:
                raise KeyError(name)
            if self.params[name].shape != t.shape:
                raise ShapeError(f"shape mismatch for {name}")
            self.params[name].data = t.data.copy()


class Adam:
    def __init__(self, store: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {n: np.zeros(p.shape) for n, p in store.params.items()}
        self._v = {n: np.zeros(p.shape) for n, p in store.params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.store.params.items():
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeError(f"gradient shape mismatch for {name}")
            m = self._m[name] = b1 * self._m[name] + (1 - b1) * p.grad
            v = self._v[name] = b2 * self._v[name] + (1 - b2) * p.grad ** 2
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- verification ----------------------------------------------------------


def grad_check(fn, inputs: list[Tensor], epsilon: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central differences.

    `fn(inputs)` must return a scalar Tensor built from the given inputs.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(inputs)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("function returned non-finite value")
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = fn(inputs).item()
            flat[i] = orig - epsilon
            f_minus = fn(inputs).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


# -- transformer encoder layer --------------------------------------------


def init_transformer_params(store: ParamStore, prefix: str, h: int,
                            heads: int = 4):
    if h % heads != 0:
        raise ShapeError(f"hidden size {h} not divisible by {heads} heads")
    for name in ("wq", "wk", "wv", "wo"):
        store.linear(f"{prefix}.{name}", h, h)
    store.linear(f"{prefix}.ff1", h, 4 * h)
    store.linear(f"{prefix}.ff2", 4 * h, h)


def transformer_encoder_layer(query, key, value, store: ParamStore,
                              prefix: str, heads: int = 4) -> Tensor:
    """Post-norm multi-head cross-attention block.

    query [..., n, h] attends over key/value [..., m, h]; output matches the
    query shape.  Leading batch axes broadcast through.
    """
    query, key, value = map(_as_tensor, (query, key, value))
    h = query.shape[-1]
    if key.shape[-1] != h or value.shape[-1] != h:
        raise ShapeError("query/key/value widths differ")
    if key.shape[-2] != value.shape[-2]:
        raise ShapeError("key/value row counts differ")
    if h % heads != 0:
        raise ShapeError(f"hidden size {h} not divisible by {heads} heads")
    hd = h // heads

    def lin(x, name):
        w, b = store[f"{prefix}.{name}.w"], store[f"{prefix}.{name}.b"]
        return add(matmul(x, w), b)

    def split_heads(x):
        # [..., t, h] -> [..., heads, t, hd]
        return swapaxes(reshape(x, x.shape[:-1] + (heads, hd)), -2, -3)

    q = split_heads(lin(query, "wq"))
    k = split_heads(lin(key, "wk"))
    v = split_heads(lin(value, "wv"))
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(hd))
    att = softmax(scores, axis=-1)
    ctx = swapaxes(matmul(att, v), -2, -3)  # [..., n, heads, hd]
    ctx = reshape(ctx, ctx.shape[:-2] + (h,))
    attended = layer_norm(add(query, lin(ctx, "wo")))
    ff = lin(relu(lin(attended, "ff1")), "ff2")
    return layer_norm(add(attended, ff))
