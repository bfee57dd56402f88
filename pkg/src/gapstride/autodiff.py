"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Only the primitives the models need are provided. Contractions go through
``np.einsum`` (never BLAS) and reductions over the token axis accumulate
sequentially, so appending zero-weighted padding leaves every forward value
bit-identical.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "gapstride-params"
CHECKPOINT_VERSION = 1


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = ()
        self.vjp = None
        self.op = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = self.name or self.op or "const"
        return f"Tensor({label}, shape={self.shape})"


class Parameter(Tensor):
    """A named leaf tensor with a gradient accumulator of the same shape."""

    __slots__ = ("grad",)

    def __init__(self, name, data):
        super().__init__(data, requires_grad=True, name=name)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"parameter {name!r} has non-finite entries")
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives evaluated outside any tape are not
    recorded, which is how evaluation mode skips the bookkeeping.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)


_TAPES: list[Tape] = []


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, out, parents, vjp):
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"primitive {op!r} produced a non-finite value")
    t = Tensor(out)
    t.op = op
    tape = _TAPES[-1] if _TAPES else None
    if tape is not None and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = parents
        t.vjp = vjp
        tape.nodes.append(t)
    return t


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _seq_sum(x):
    # left-to-right accumulation; trailing zeros cannot change the result
    return np.cumsum(x, axis=-1)[..., -1]


def _leading_sum(g, ndim):
    if ndim == 0:
        return np.sum(g)
    return g.reshape(-1, *g.shape[g.ndim - ndim:]).sum(axis=0)


# --- primitives -----------------------------------------------------------


def contract(subscripts, a, b):
    """Two-operand ``einsum`` with explicit output subscripts."""
    a, b = _as_tensor(a), _as_tensor(b)
    spec = subscripts.replace(" ", "")
    lhs, out = spec.split("->")
    sa, sb = lhs.split(",")
    if not set(sa) <= set(sb) | set(out) or not set(sb) <= set(sa) | set(out):
        raise AutodiffError(f"contract: unsupported subscripts {subscripts!r}")
    try:
        data = np.einsum(spec, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise ShapeError(f"contract {spec}: shape mismatch {a.shape} vs {b.shape}") from exc

    def vjp(g):
        ga = np.einsum(f"{out},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{out},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return _record("contract", data, (a, b), vjp)


def bmm(a, b, transpose_b=False):
    """Batched ``a @ b`` (or ``a @ b^T``) over identical leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    bt = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != bt.shape[-2]:
        raise ShapeError(f"bmm: shape mismatch {a.shape} vs {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(bt, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            if transpose_b:
                gb = np.swapaxes(gb, -1, -2)
        return ga, gb

    return _record("bmm", a.data @ bt, (a, b), vjp)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return contract("ij,jk->ik", a, b)


def linear(x, weight, bias=None):
    """``x @ weight (+ bias)`` over the last axis of ``x``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: shape mismatch {x.shape} vs {weight.shape}")
    letters = "abcdefgh"[: x.ndim - 1]
    y = contract(f"{letters}i,io->{letters}o", x, weight)
    return y if bias is None else add_bias(y, bias)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_bias(x, bias):
    """Add ``bias`` along the trailing axes of ``x``."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if bias.ndim > x.ndim or x.shape[x.ndim - bias.ndim:] != bias.shape:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {bias.shape}")
    nb = bias.ndim
    return _record("add_bias", x.data + bias.data, (x, bias),
                   lambda g: (g, _leading_sum(g, nb)))


def _check_const(op, x, c):
    c = np.asarray(c, dtype=np.float64)
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise ShapeError(f"{op}: shape mismatch {x.shape} vs {c.shape}")
    return c


def scale(x, c):
    """Multiply by a constant (scalar or array broadcastable to ``x``)."""
    x = _as_tensor(x)
    c = _check_const("scale", x, c)
    return _record("scale", x.data * c, (x,), lambda g: (g * c,))


def add_const(x, c):
    x = _as_tensor(x)
    c = _check_const("add_const", x, c)
    return _record("add_const", x.data + c, (x,), lambda g: (g,))


def tanh(x):
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x):
    x = _as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x):
    x = _as_tensor(x)
    on = x.data > 0
    return _record("relu", np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def exp(x):
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _record("exp", y, (x,), lambda g: (g * y,))


def softplus_value(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def softplus(x):
    x = _as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record("softplus", softplus_value(x.data), (x,), lambda g: (g * s,))


def abs_diff(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("abs_diff", a, b)
    sgn = np.sign(a.data - b.data)
    return _record("abs_diff", np.abs(a.data - b.data), (a, b),
                   lambda g: (g * sgn, -g * sgn))


def square(x):
    x = _as_tensor(x)
    xd = x.data
    return _record("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def mean(x):
    x = _as_tensor(x)
    n = x.data.size
    if n == 0:
        raise ShapeError("mean: empty tensor")
    shape = x.shape
    return _record("mean", np.mean(x.data), (x,),
                   lambda g: (np.full(shape, g / n),))


def masked_softmax(x, mask=None):
    """Softmax over the last axis with masked entries forced to weight 0.

    ``mask`` is boolean, True where an entry is valid; it must broadcast to
    ``x``. Every row needs at least one valid entry.
    """
    x = _as_tensor(x)
    if mask is None:
        z = x.data
    else:
        mask = np.asarray(mask, dtype=bool)
        if np.broadcast_shapes(x.shape, mask.shape) != x.shape:
            raise ShapeError(f"masked_softmax: shape mismatch {x.shape} vs {mask.shape}")
        z = np.where(mask, x.data, -np.inf)
    top = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise AutodiffError("masked_softmax: a row has no unmasked entries")
    e = np.exp(z - top)
    p = e / _seq_sum(e)[..., None]

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _record("softmax", p, (x,), vjp)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError(f"layer_norm: shape mismatch {x.shape} vs {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def vjp(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _leading_sum(g * xhat, 1), _leading_sum(g, 1)

    return _record("layer_norm", xhat * gd + beta.data, (x, gamma, beta), vjp)


def embedding(table, ids):
    """Row lookup ``table[ids]`` for an integer index array."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2 or ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding: bad table {table.shape} or ids dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")
    shape = table.shape

    def vjp(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record("embedding", table.data[ids], (table,), vjp)


def dropout(x, rate, rng):
    """Inverted dropout; identity when ``rate`` is 0 or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return _as_tensor(x)
    x = _as_tensor(x)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return scale(x, keep)


# --- reverse pass and optimiser -------------------------------------------


def backward(tape, loss):
    """Accumulate d(loss)/d(param) into every reachable Parameter's ``grad``.

    Returns a dict of the accumulated gradients keyed by parameter name.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    reached = {}
    if not loss.requires_grad:
        return reached
    pending = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if isinstance(parent, Parameter):
                parent.grad = parent.grad + pg
                reached[parent.name] = parent
            else:
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
    return {name: p.grad for name, p in reached.items()}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """One bias-corrected Adam update, in place on ``params``.

    ``state`` maps parameter name to its ``(m, v)`` moment pair and is
    updated in place; missing entries start at zero.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if t < 1:
        raise ValueError(f"step counter must be >= 1, got {t}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        g = grads[p.name]
        m, v = state.get(p.name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state[p.name] = (m, v)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {}
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        grads = {p.name: p.grad for p in self.params}
        adam_step(self.params, grads, self.state, self.lr, self.beta1,
                  self.beta2, self.eps, self.t)


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if max_norm is not None and total > max_norm:
        factor = max_norm / total
        for p in params:
            p.grad = p.grad * factor
    return total


# --- checkpoints ----------------------------------------------------------


def params_to_dict(params, meta=None):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": {
            name: {"shape": list(p.data.shape), "data": p.data.ravel().tolist()}
            for name, p in params.items()
        },
    }


def params_from_dict(blob):
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a gapstride parameter checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    out = {}
    for name, t in blob["tensors"].items():
        data = np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
        out[name] = Parameter(name, data)
    return out, blob.get("meta", {})


def save_params(path, params, meta=None):
    Path(path).write_text(json.dumps(params_to_dict(params, meta)))


def load_params(path):
    return params_from_dict(json.loads(Path(path).read_text()))
