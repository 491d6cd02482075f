"""Dense numeric substrate: tensors, reverse-mode gradients, Adam, layers.

Everything runs on contiguous float64 numpy buffers. Gradients are exact
reverse-mode; every op appends itself to an implicit graph via parent links
and a backward closure. Checkpoints are named parameter tensors (f64,
little-endian) plus a text manifest describing the network.
"""

from __future__ import annotations

import io
import struct

import numpy as np

__all__ = [
    "Tensor",
    "Module",
    "Dense",
    "MLP",
    "LayerNorm",
    "Embedding",
    "GRUCell",
    "AttentionBlock",
    "AdamState",
    "adam_step",
    "gaussian",
    "global_grad_norm",
    "clip_grad_norm",
    "save_checkpoint",
    "load_checkpoint",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array with an optional gradient and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph -------------------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ValueError(f"gradient shape {grad.shape} != tensor shape {self.data.shape}")

        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            if node.name is not None:  # named intermediates also accumulate
                node.grad = g if node.grad is None else node.grad + g

    # -- elementwise arithmetic ---------------------------------------------

    def _coerce(self, other):
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        return Tensor(
            self.data + other.data,
            parents=(self, other),
            backward=lambda g: (_unbroadcast(g, self.data.shape), _unbroadcast(g, other.data.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, parents=(self,), backward=lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        return Tensor(
            self.data * other.data,
            parents=(self, other),
            backward=lambda g: (
                _unbroadcast(g * other.data, self.data.shape),
                _unbroadcast(g * self.data, other.data.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        return Tensor(
            self.data / other.data,
            parents=(self, other),
            backward=lambda g: (
                _unbroadcast(g / other.data, self.data.shape),
                _unbroadcast(-g * self.data / other.data**2, other.data.shape),
            ),
        )

    def __pow__(self, exponent: float):
        return Tensor(
            self.data**exponent,
            parents=(self,),
            backward=lambda g: (g * exponent * self.data ** (exponent - 1),),
        )

    def __matmul__(self, other):
        other = self._coerce(other)
        out = self.data @ other.data

        def backward(g):
            a, b = self.data, other.data
            if a.ndim == 1 and b.ndim == 2:
                return g @ b.T, np.outer(a, g)
            if a.ndim == 2 and b.ndim == 1:
                return np.outer(g, b), a.T @ g
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor(out, parents=(self, other), backward=backward)

    def __getitem__(self, idx):
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor(self.data[idx], parents=(self,), backward=backward)

    # -- unary math ----------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, parents=(self,), backward=lambda g: (g * out,))

    def log(self):
        return Tensor(np.log(self.data), parents=(self,), backward=lambda g: (g / self.data,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor(out, parents=(self,), backward=lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor(out, parents=(self,), backward=lambda g: (g * (1.0 - out**2),))

    def sigmoid(self):
        out = 1.0 / (1.0 + np.exp(-self.data))
        return Tensor(out, parents=(self,), backward=lambda g: (g * out * (1.0 - out),))

    def relu(self):
        mask = self.data > 0
        return Tensor(np.where(mask, self.data, 0.0), parents=(self,), backward=lambda g: (g * mask,))

    def elu(self, alpha: float = 1.0):
        mask = self.data > 0
        ex = alpha * (np.exp(np.minimum(self.data, 0.0)) - 1.0)
        out = np.where(mask, self.data, ex)
        return Tensor(out, parents=(self,), backward=lambda g: (g * np.where(mask, 1.0, ex + alpha),))

    def abs(self):
        sign = np.sign(self.data)
        return Tensor(np.abs(self.data), parents=(self,), backward=lambda g: (g * sign,))

    # -- reductions / shape --------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, self.data.shape).copy(),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, self.data.shape).copy(),)

        return Tensor(out, parents=(self,), backward=backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor(self.data.reshape(shape), parents=(self,), backward=lambda g: (g.reshape(old),))

    def swapaxes(self, a, b):
        return Tensor(np.swapaxes(self.data, a, b), parents=(self,), backward=lambda g: (np.swapaxes(g, a, b),))

    def softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return (out * (g - dot),)

        return Tensor(out, parents=(self,), backward=backward)

    def minimum(self, other):
        other = self._coerce(other)
        mask = self.data <= other.data
        return Tensor(
            np.where(mask, self.data, other.data),
            parents=(self, other),
            backward=lambda g: (
                _unbroadcast(g * mask, self.data.shape),
                _unbroadcast(g * ~mask, other.data.shape),
            ),
        )

    def maximum(self, other):
        other = self._coerce(other)
        mask = self.data >= other.data
        return Tensor(
            np.where(mask, self.data, other.data),
            parents=(self, other),
            backward=lambda g: (
                _unbroadcast(g * mask, self.data.shape),
                _unbroadcast(g * ~mask, other.data.shape),
            ),
        )

    def detach(self):
        return Tensor(self.data)


def concat(tensors, axis=-1):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors), backward=backward)


def stack(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(tensors)))

    return Tensor(np.stack([t.data for t in tensors], axis=axis), parents=tuple(tensors), backward=backward)


# -- modules ------------------------------------------------------------------


class Module:
    """Container of named parameters and submodules."""

    def parameters(self) -> dict:
        out = {}
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[attr] = value
            elif isinstance(value, Module):
                for k, v in value.parameters().items():
                    out[f"{attr}.{k}"] = v
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for k, v in item.parameters().items():
                            out[f"{attr}.{i}.{k}"] = v
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def load_state(self, arrays: dict, prefix: str = ""):
        for name, p in self.parameters().items():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"checkpoint missing parameter {key!r}")
            if arrays[key].shape != p.data.shape:
                raise ValueError(f"parameter {key!r}: shape {arrays[key].shape} != {p.data.shape}")
            p.data = arrays[key].astype(np.float64)

    def state_arrays(self, prefix: str = "") -> dict:
        return {prefix + name: p.data for name, p in self.parameters().items()}


def _init_weight(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Dense(Module):
    def __init__(self, n_in, n_out, rng, act=None):
        self.w = Tensor(_init_weight(rng, n_in, n_out), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w + self.b
        if self.act is not None:
            y = getattr(y, self.act)()
        return y


class MLP(Module):
    def __init__(self, dims, rng, act="elu", out_act=None):
        self.layers = [
            Dense(dims[i], dims[i + 1], rng, act=act if i < len(dims) - 2 else out_act)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = (var + self.eps) ** -0.5
        return centered * inv * self.gain + self.bias


class Embedding(Module):
    def __init__(self, num, dim, rng):
        self.table = Tensor(rng.standard_normal((num, dim)) * 0.02, requires_grad=True)

    def __call__(self, idx) -> Tensor:
        return self.table[np.asarray(idx, dtype=np.intp)]


class GRUCell(Module):
    """Gated recurrent cell; `run` unrolls over the leading time axis."""

    def __init__(self, n_in, n_hidden, rng):
        self.wx = Tensor(_init_weight(rng, n_in, 3 * n_hidden), requires_grad=True)
        self.wh = Tensor(_init_weight(rng, n_hidden, 3 * n_hidden), requires_grad=True)
        self.b = Tensor(np.zeros(3 * n_hidden), requires_grad=True)
        self.n_hidden = n_hidden

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        nh = self.n_hidden
        gx = x @ self.wx + self.b
        gh = h @ self.wh
        z = (gx[..., :nh] + gh[..., :nh]).sigmoid()
        r = (gx[..., nh : 2 * nh] + gh[..., nh : 2 * nh]).sigmoid()
        n = (gx[..., 2 * nh :] + r * gh[..., 2 * nh :]).tanh()
        return (Tensor(1.0) - z) * n + z * h

    def run(self, xs: Tensor, h0=None) -> Tensor:
        """xs: (T, ..., n_in) -> final hidden (..., n_hidden)."""
        steps = xs.shape[0]
        h = h0 if h0 is not None else Tensor(np.zeros(xs.shape[1:-1] + (self.n_hidden,)))
        for t in range(steps):
            h = self(xs[t], h)
        return h


class AttentionBlock(Module):
    """Pre-norm multi-head self-attention followed by a 4x MLP, both residual."""

    def __init__(self, width, n_heads, rng):
        if width % n_heads:
            raise ValueError("width must divide by n_heads")
        self.ln1 = LayerNorm(width)
        self.ln2 = LayerNorm(width)
        self.wqkv = Tensor(_init_weight(rng, width, 3 * width), requires_grad=True)
        self.wo = Tensor(_init_weight(rng, width, width), requires_grad=True)
        self.ff = MLP([width, 4 * width, width], rng, act="elu")
        self.n_heads = n_heads
        self.width = width

    def __call__(self, x: Tensor) -> Tensor:
        # x: (..., T, width)
        w, h = self.width, self.n_heads
        hd = w // h
        qkv = self.ln1(x) @ self.wqkv
        lead = x.shape[:-2]
        seq = x.shape[-2]
        qkv = qkv.reshape(lead + (seq, 3, h, hd))
        qkv = qkv.swapaxes(-4, -3).swapaxes(-3, -2)  # (..., 3, h, T, hd)
        q, k, v = qkv[..., 0, :, :, :], qkv[..., 1, :, :, :], qkv[..., 2, :, :, :]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd))
        attn = scores.softmax(axis=-1) @ v  # (..., h, T, hd)
        attn = attn.swapaxes(-3, -2).reshape(lead + (seq, w))
        x = x + attn @ self.wo
        return x + self.ff(self.ln2(x))


# -- optimizer ----------------------------------------------------------------


class AdamState:
    """Per-parameter first/second moments with the standard bias correction."""

    def __init__(self, params: dict, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict, state: AdamState):
    """One bias-corrected Adam update in place. Missing gradients count as zero."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for key, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.m[key] = b1 * state.m[key] + (1.0 - b1) * g
        state.v[key] = b2 * state.v[key] + (1.0 - b2) * g * g
        m_hat = state.m[key] / corr1
        v_hat = state.v[key] / corr2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def global_grad_norm(params: dict) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad**2).sum())
    return float(np.sqrt(total))


def clip_grad_norm(params: dict, max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def gaussian(rng: np.random.Generator, shape) -> Tensor:
    """I.i.d. standard normals from the given generator (ziggurat transform of
    the seeded PCG64 stream; deterministic per seed)."""
    return Tensor(rng.standard_normal(shape))


# -- checkpoints --------------------------------------------------------------

_CKPT_MAGIC = b"NCKP"
_CKPT_VERSION = 1


def save_checkpoint(path, arrays: dict, manifest: str = ""):
    """Named f64 tensors, little-endian, preceded by a text manifest."""
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<H", _CKPT_VERSION))
    mbytes = manifest.encode("utf-8")
    buf.write(struct.pack("<I", len(mbytes)))
    buf.write(mbytes)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype="<f8")
        nbytes = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nbytes)))
        buf.write(nbytes)
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (arrays, manifest). Raises ValueError on corrupt input."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<H", raw, off)
    off += 2
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    manifest = raw[off : off + mlen].decode("utf-8")
    off += mlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        end = off + 8 * n
        if end > len(raw):
            raise ValueError(f"{path}: truncated payload at offset {off}")
        arrays[name] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).copy()
        off = end
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes after payload")
    return arrays, manifest
