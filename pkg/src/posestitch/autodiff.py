"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators the sequence networks need are provided. Arithmetic
follows numpy broadcasting; gradients are summed back onto the operand
shape, which in practice means bias vectors and per-item timestep
embeddings broadcast over leading batch/frame axes.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

_dtype = np.float32


def default_dtype():
    return _dtype


def set_precision(bits: int) -> None:
    global _dtype
    if bits not in (32, 64):
        raise ValueError("precision must be 32 or 64 bits")
    _dtype = np.float32 if bits == 32 else np.float64


@contextlib.contextmanager
def float64_mode():
    """Verification mode: every new tensor is 64-bit inside the block."""
    global _dtype
    saved = _dtype
    _dtype = np.float64
    try:
        yield
    finally:
        _dtype = saved


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=_dtype)
        if not np.isfinite(arr).all():
            raise FloatingPointError("non-finite value produced in tensor operation")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self):
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``; self must be scalar."""
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data + b.data, _parents=(a, b),
                  _backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data - b.data, _parents=(a, b),
                  _backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data * b.data, _parents=(a, b),
                  _backward=lambda g: (_unbroadcast(g * b.data, a.shape),
                                       _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes batch."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.data @ b.data, _parents=(a,  b), _backward=backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(np.transpose(a.data, axes), _parents=(a,),
                  _backward=lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor(a.data.reshape(shape), _parents=(a,), _backward=lambda g: (g.reshape(old),))


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis),
                  _parents=tuple(parts), _backward=backward)


def total(a: Tensor) -> Tensor:
    return Tensor(a.data.sum(), _parents=(a,), _backward=lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor(a.data.mean(), _parents=(a,),
                  _backward=lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),))


def mean_abs_error(pred: Tensor, target) -> Tensor:
    """Mean of |pred - target| over every element."""
    target = as_tensor(target)
    diff = pred.data - target.data
    n = diff.size
    sign = np.sign(diff)

    def backward(g):
        gp = g * sign / n
        return gp, -gp

    return Tensor(np.abs(diff).mean(), _parents=(pred, target), _backward=backward)


def gelu(a: Tensor) -> Tensor:
    """Gaussian-error linear unit, tanh approximation."""
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return Tensor(out, _parents=(a,), _backward=backward)


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then optionally scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        gx = (inv / n) * (n * g - g.sum(-1, keepdims=True) - xhat * (g * xhat).sum(-1, keepdims=True))
        return (gx,)

    out = Tensor(xhat, _parents=(a,), _backward=backward)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def softmax(a: Tensor, key_mask=None) -> Tensor:
    """Softmax over the last axis; positions where key_mask is True get zero weight."""
    x = a.data
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.all():
            raise ValueError("every key is masked for some query")
        x = np.where(key_mask, -np.inf, x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(-1, keepdims=True)),)

    return Tensor(p, _parents=(a,), _backward=backward)


def attention(queries, keys, values, key_mask=None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``key_mask`` is a boolean vector over keys; True means the key is hidden.
    """
    queries, keys, values = as_tensor(queries), as_tensor(keys), as_tensor(values)
    d = queries.shape[-1]
    if keys.shape[-1] != d or values.shape[-2] != keys.shape[-2]:
        raise ValueError(f"incompatible attention shapes {queries.shape}, {keys.shape}, {values.shape}")
    if key_mask is not None and np.asarray(key_mask, dtype=bool).all():
        raise ValueError("every key is masked for some query")
    nd = keys.data.ndim
    perm = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    scores = mul(matmul(queries, transpose(keys, perm)), 1.0 / math.sqrt(d))
    return matmul(softmax(scores, key_mask), values)


# --- optimizer -------------------------------------------------------------

@dataclass
class OptimizerState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], **hyper) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0, **hyper)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    if params.keys() != grads.keys():
        raise ValueError("parameter and gradient names differ")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.first_moment[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {p.shape} vs {g.shape}")
        m = b1 * state.first_moment[name] + (1.0 - b1) * g
        v = b2 * state.second_moment[name] + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)
        m_new[name] = m.astype(p.dtype)
        v_new[name] = v.astype(p.dtype)
    return new_params, OptimizerState(m_new, v_new, t, state.lr, b1, b2, state.epsilon)


# --- gradient verification -------------------------------------------------

def value_and_grad(fn, params: dict[str, np.ndarray]):
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss = fn(leaves)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return loss.item(), grads


def grad_check(fn, params: dict[str, np.ndarray], probe_count: int = 20, seed: int = 0,
               step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Runs in 64-bit mode. ``fn`` maps a dict of Tensors to a scalar Tensor.
    """
    with float64_mode():
        base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        loss, grads = value_and_grad(fn, base)
        if not math.isfinite(loss):
            raise FloatingPointError("non-finite loss")
        rng = np.random.default_rng(seed)
        names = sorted(base)
        sizes = np.array([base[k].size for k in names])
        worst = 0.0
        for _ in range(probe_count):
            flat = int(rng.integers(sizes.sum()))
            which = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
            name = names[which]
            offset = flat - int(sizes[:which].sum())
            idx = np.unravel_index(offset, base[name].shape)

            def at(delta):
                probe = dict(base)
                arr = base[name].copy()
                arr[idx] += delta
                probe[name] = arr
                out = fn({k: Tensor(v) for k, v in probe.items()}).item()
                if not math.isfinite(out):
                    raise FloatingPointError("non-finite loss")
                return out

            numeric = (at(step) - at(-step)) / (2 * step)
            analytic = float(grads[name][idx])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# --- PARAMS v1 container ---------------------------------------------------

def save_params(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    """Write ``PARAMS 1 <count> <meta count>``, meta lines, one manifest line per
    tensor, then little-endian float32 payload in manifest order."""
    meta = meta or {}
    lines = [f"PARAMS 1 {len(tensors)} {len(meta)}"]
    for key in sorted(meta):
        value = str(meta[key])
        if any(ch.isspace() for ch in key) or "\n" in value:
            raise ValueError(f"invalid meta entry {key!r}")
        lines.append(f"meta {key} {value}")
    names = sorted(tensors)
    for name in names:
        arr = tensors[name]
        lines.append(" ".join([name, str(arr.ndim)] + [str(d) for d in arr.shape]))
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for name in names:
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())


def load_params(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def next_line():
        nonlocal pos
        end = blob.index(b"\n", pos)
        line = blob[pos:end].decode("ascii")
        pos = end + 1
        return line

    head = next_line().split()
    if len(head) != 4 or head[:2] != ["PARAMS", "1"]:
        raise ValueError(f"{path}: not a PARAMS v1 file")
    n_tensors, n_meta = int(head[2]), int(head[3])
    meta = {}
    for _ in range(n_meta):
        _, key, value = next_line().split(" ", 2)
        meta[key] = value
    manifest = []
    for _ in range(n_tensors):
        fields = next_line().split()
        rank = int(fields[1])
        manifest.append((fields[0], tuple(int(d) for d in fields[2:2 + rank])))
    tensors = {}
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after payload")
    return tensors, meta
