"""Static computation graphs over float64 numpy arrays.

A :class:`Graph` is built once by calling its op methods, each of which
appends a node and returns the node's index. :func:`eval_forward` runs the
graph on a set of named input bindings and caches every node value;
:func:`backward` then walks the cached nodes in reverse order.

Layout conventions: video tensors are channels-last ``(B, T, W, H, C)`` so the
time axis is 1. Shapes are never broadcast implicitly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import _kernels


class GraphError(ValueError):
    """Raised for malformed graphs and bad bindings."""


class ShapeError(GraphError):
    pass


class NonFiniteError(GraphError):
    pass


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None

    def describe(self, index: int) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"node {index} ({self.op}{label})"


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# forward / backward rules
#
# forward(values, attrs) -> value
# backward(gout, values, out, attrs, need) -> list of parent grads (or None)
# --------------------------------------------------------------------------


def _need_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _fwd_add(v, attrs):
    _need_same("add", *v)
    return v[0] + v[1]


def _fwd_sub(v, attrs):
    _need_same("sub", *v)
    return v[0] - v[1]


def _fwd_mul(v, attrs):
    _need_same("mul", *v)
    return v[0] * v[1]


def _fwd_conv3d(v, attrs):
    x, w, b = v
    if x.ndim != 5 or w.ndim != 5 or b.ndim != 1:
        raise ShapeError(f"conv3d: expected 5D input/weight and 1D bias, got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[4] != w.shape[3] or w.shape[4] != b.shape[0]:
        raise ShapeError(f"conv3d: channel mismatch input {x.shape} weight {w.shape} bias {b.shape}")
    if any(k % 2 == 0 for k in w.shape[:3]):
        raise ShapeError(f"conv3d: kernel extents must be odd, got {w.shape[:3]}")
    return _kernels.conv3d_forward(np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(b))


def _bwd_conv3d(g, v, out, attrs, need):
    x, w, _ = v
    gx, gw, gb = _kernels.conv3d_backward(
        np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(g), need[0], need[1] or need[2]
    )
    return [gx, gw, gb]


def _fwd_dense(v, attrs):
    x, w, b = v
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1 or x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"dense: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    return x @ w + b


def _bwd_dense(g, v, out, attrs, need):
    x, w, _ = v
    return [
        g @ w.T if need[0] else None,
        x.T @ g if need[1] else None,
        g.sum(axis=0) if need[2] else None,
    ]


def _fwd_mean_pool(v, attrs):
    (x,) = v
    win = attrs["window"]
    if x.ndim != 5:
        raise ShapeError(f"mean_pool: expected 5D input, got {x.shape}")
    B, T, W, H, C = x.shape
    pt, pw, ph = win
    if T % pt or W % pw or H % ph:
        raise ShapeError(f"mean_pool: window {win} does not tile {x.shape[1:4]}")
    r = x.reshape(B, T // pt, pt, W // pw, pw, H // ph, ph, C)
    return r.mean(axis=(2, 4, 6))


def _bwd_mean_pool(g, v, out, attrs, need):
    (x,) = v
    pt, pw, ph = attrs["window"]
    scale = 1.0 / (pt * pw * ph)
    gx = np.repeat(np.repeat(np.repeat(g, pt, axis=1), pw, axis=2), ph, axis=3) * scale
    return [gx]


def _pool_windows(x, win, op):
    if x.ndim != 5:
        raise ShapeError(f"{op}: expected 5D input, got {x.shape}")
    B, T, W, H, C = x.shape
    pt, pw, ph = win
    if T % pt or W % pw or H % ph:
        raise ShapeError(f"{op}: window {win} does not tile {x.shape[1:4]}")
    r = x.reshape(B, T // pt, pt, W // pw, pw, H // ph, ph, C)
    # (B, T', W', H', C, window)
    return r.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(B, T // pt, W // pw, H // ph, C, pt * pw * ph)


def _fwd_max_pool(v, attrs):
    return _pool_windows(v[0], attrs["window"], "max_pool").max(axis=-1)


def _bwd_max_pool(g, v, out, attrs, need):
    # the gradient goes to the first maximal entry of each window
    (x,) = v
    pt, pw, ph = attrs["window"]
    w = _pool_windows(x, attrs["window"], "max_pool")
    onehot = np.zeros_like(w)
    np.put_along_axis(onehot, w.argmax(axis=-1)[..., None], 1.0, axis=-1)
    gw = onehot * g[..., None]
    B, T2, W2, H2, C, _ = gw.shape
    gx = gw.reshape(B, T2, W2, H2, C, pt, pw, ph).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    return [gx.reshape(x.shape)]


def _fwd_reshape(v, attrs):
    (x,) = v
    shape = tuple(x.shape[0] if s == -1 else s for s in attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


def _fwd_softmax(v, attrs):
    (z,) = v
    if z.ndim != 2:
        raise ShapeError(f"softmax: expected (B, K), got {z.shape}")
    return _softmax(z)


def _bwd_softmax(g, v, out, attrs, need):
    s = out
    return [s * (g - (g * s).sum(axis=-1, keepdims=True))]


def _fwd_xent(v, attrs):
    z, onehot, weights = v
    if z.ndim != 2 or onehot.shape != z.shape or weights.shape != (z.shape[0],):
        raise ShapeError(f"softmax_xent: logits {z.shape}, targets {onehot.shape}, weights {weights.shape}")
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    per_sample = -(onehot * logp).sum(axis=-1)
    return np.array([np.dot(weights, per_sample)])


def _bwd_xent(g, v, out, attrs, need):
    z, onehot, weights = v
    p = _softmax(z)
    gz = g[0] * weights[:, None] * (p * onehot.sum(axis=-1, keepdims=True) - onehot)
    res = [gz, None, None]
    if need[1]:
        shifted = z - z.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        res[1] = -g[0] * weights[:, None] * logp
    if need[2]:
        shifted = z - z.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        res[2] = g[0] * -(onehot * logp).sum(axis=-1)
    return res


def _gru_parts(x, h, wx, wh, b):
    hd = h.shape[1]
    gx = x @ wx + b
    gh = h @ wh[:, : 2 * hd]
    z = _sigmoid(gx[:, :hd] + gh[:, :hd])
    r = _sigmoid(gx[:, hd : 2 * hd] + gh[:, hd:])
    rh = r * h
    n = np.tanh(gx[:, 2 * hd :] + rh @ wh[:, 2 * hd :])
    return z, r, rh, n


def _fwd_gru(v, attrs):
    x, h, wx, wh, b = v
    hd = h.shape[1] if h.ndim == 2 else -1
    if (
        x.ndim != 2
        or h.ndim != 2
        or x.shape[0] != h.shape[0]
        or wx.shape != (x.shape[1], 3 * hd)
        or wh.shape != (hd, 3 * hd)
        or b.shape != (3 * hd,)
    ):
        raise ShapeError(f"gru_cell: incompatible shapes x{x.shape} h{h.shape} wx{wx.shape} wh{wh.shape} b{b.shape}")
    z, r, rh, n = _gru_parts(x, h, wx, wh, b)
    return (1.0 - z) * n + z * h


def _bwd_gru(g, v, out, attrs, need):
    x, h, wx, wh, b = v
    hd = h.shape[1]
    z, r, rh, n = _gru_parts(x, h, wx, wh, b)
    dn = g * (1.0 - z)
    dz = g * (h - n)
    dh = g * z
    an = dn * (1.0 - n * n)  # pre-activation of the candidate
    drh = an @ wh[:, 2 * hd :].T
    dr = drh * h
    dh = dh + drh * r
    az = dz * z * (1.0 - z)
    ar = dr * r * (1.0 - r)
    a_gates = np.concatenate([az, ar], axis=1)
    dh = dh + a_gates @ wh[:, : 2 * hd].T
    a_all = np.concatenate([az, ar, an], axis=1)
    res = [None, dh, None, None, None]
    if need[0]:
        res[0] = a_all @ wx.T
    if need[2]:
        res[2] = x.T @ a_all
    if need[3]:
        res[3] = np.concatenate([h.T @ a_gates, rh.T @ an], axis=1)
    if need[4]:
        res[4] = a_all.sum(axis=0)
    return res


def _fwd_concat(v, attrs):
    axis = attrs["axis"]
    ref = v[0]
    for t in v[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} disagree off axis {axis}")
    return np.concatenate(v, axis=axis)


def _bwd_concat(g, v, out, attrs, need):
    axis = attrs["axis"]
    bounds = np.cumsum([0] + [t.shape[axis] for t in v])
    res = []
    for i in range(len(v)):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        res.append(g[tuple(sl)])
    return res


def _fwd_slice(v, attrs):
    (x,) = v
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice: [{start}, {stop}) out of range for extent {x.shape[axis]}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    return x[tuple(sl)]


def _bwd_slice(g, v, out, attrs, need):
    (x,) = v
    gx = np.zeros_like(x)
    sl = [slice(None)] * x.ndim
    sl[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
    gx[tuple(sl)] = g
    return [gx]


def _fwd_max_abs(v, attrs):
    return np.array([np.abs(v[0]).max()])


def _bwd_max_abs(g, v, out, attrs, need):
    # subgradient: signed unit on the first row-major maximal-magnitude entry
    (x,) = v
    gx = np.zeros_like(x)
    k = int(np.argmax(np.abs(x).ravel()))
    gx.flat[k] = np.sign(x.flat[k]) * g[0]
    return [gx]


def _bwd_l2(g, v, out, attrs, need):
    (x,) = v
    if out[0] == 0.0:
        return [np.zeros_like(x)]
    return [x * (g[0] / out[0])]


_RULES = {
    "add": (_fwd_add, lambda g, v, o, a, n: [g, g]),
    "sub": (_fwd_sub, lambda g, v, o, a, n: [g, -g]),
    "mul": (_fwd_mul, lambda g, v, o, a, n: [g * v[1], g * v[0]]),
    "scale": (lambda v, a: v[0] * a["c"], lambda g, v, o, a, n: [g * a["c"]]),
    "shift": (lambda v, a: v[0] + a["c"], lambda g, v, o, a, n: [g]),
    "relu": (lambda v, a: np.maximum(v[0], 0.0), lambda g, v, o, a, n: [g * (v[0] > 0.0)]),
    "conv3d": (_fwd_conv3d, _bwd_conv3d),
    "dense": (_fwd_dense, _bwd_dense),
    "mean_pool": (_fwd_mean_pool, _bwd_mean_pool),
    "max_pool": (_fwd_max_pool, _bwd_max_pool),
    "reshape": (_fwd_reshape, lambda g, v, o, a, n: [g.reshape(v[0].shape)]),
    "softmax": (_fwd_softmax, _bwd_softmax),
    "softmax_xent": (_fwd_xent, _bwd_xent),
    "gru_cell": (_fwd_gru, _bwd_gru),
    "concat": (_fwd_concat, _bwd_concat),
    "slice": (_fwd_slice, _bwd_slice),
    "sum": (lambda v, a: np.array([v[0].sum()]), lambda g, v, o, a, n: [np.full_like(v[0], g[0])]),
    "l2_norm": (lambda v, a: np.array([np.sqrt(np.sum(v[0] * v[0]))]), _bwd_l2),
    "max_abs": (_fwd_max_abs, _bwd_max_abs),
    "sum_abs": (lambda v, a: np.array([np.abs(v[0]).sum()]), lambda g, v, o, a, n: [np.sign(v[0]) * g[0]]),
}

OPS = tuple(sorted(_RULES))


class Graph:
    """An append-only list of operation records.

    Each builder method returns the integer index of the node it created.
    Parents always precede children, so index order is a topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.outputs: list[int] = []
        self.values: list[np.ndarray] | None = None

    # -- construction -----------------------------------------------------

    def _add(self, op, parents, name=None, **attrs):
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise GraphError(f"{op}: parent {p} does not exist")
        self.nodes.append(Node(op, tuple(parents), attrs, name))
        self.values = None
        return len(self.nodes) - 1

    def input(self, name):
        if name in self.inputs:
            raise GraphError(f"duplicate input '{name}'")
        idx = self._add("input", (), name=name)
        self.inputs[name] = idx
        return idx

    def output(self, node):
        self.outputs.append(node)
        return node

    def add(self, a, b, name=None):
        return self._add("add", (a, b), name)

    def sub(self, a, b, name=None):
        return self._add("sub", (a, b), name)

    def mul(self, a, b, name=None):
        return self._add("mul", (a, b), name)

    def scale(self, a, c, name=None):
        return self._add("scale", (a,), name, c=float(c))

    def shift(self, a, c, name=None):
        return self._add("shift", (a,), name, c=float(c))

    def relu(self, a, name=None):
        return self._add("relu", (a,), name)

    def conv3d(self, x, w, b, name=None):
        return self._add("conv3d", (x, w, b), name)

    def dense(self, x, w, b, name=None):
        return self._add("dense", (x, w, b), name)

    def mean_pool(self, x, window, name=None):
        return self._add("mean_pool", (x,), name, window=tuple(int(k) for k in window))

    def max_pool(self, x, window, name=None):
        return self._add("max_pool", (x,), name, window=tuple(int(k) for k in window))

    def reshape(self, x, shape, name=None):
        return self._add("reshape", (x,), name, shape=tuple(int(s) for s in shape))

    def softmax(self, logits, name=None):
        return self._add("softmax", (logits,), name)

    def softmax_xent(self, logits, onehot, weights, name=None):
        """Weighted cross-entropy ``sum_b weights[b] * CE_b`` as a (1,) tensor."""
        return self._add("softmax_xent", (logits, onehot, weights), name)

    def gru_cell(self, x, h, wx, wh, b, name=None):
        return self._add("gru_cell", (x, h, wx, wh, b), name)

    def concat(self, parts, axis=1, name=None):
        return self._add("concat", tuple(parts), name, axis=int(axis))

    def slice(self, x, start, stop, axis=1, name=None):
        return self._add("slice", (x,), name, axis=int(axis), start=int(start), stop=int(stop))

    def sum(self, x, name=None):
        return self._add("sum", (x,), name)

    def l2_norm(self, x, name=None):
        return self._add("l2_norm", (x,), name)

    def max_abs(self, x, name=None):
        return self._add("max_abs", (x,), name)

    def sum_abs(self, x, name=None):
        return self._add("sum_abs", (x,), name)

    # -- inspection -------------------------------------------------------

    def value(self, node):
        if self.values is None:
            raise GraphError("graph has not been evaluated")
        return self.values[node]

    def find(self, name):
        for i, n in enumerate(self.nodes):
            if n.name == name:
                return i
        raise KeyError(name)

    def __len__(self):
        return len(self.nodes)


def eval_forward(graph: Graph, bindings: dict, output: int | None = None) -> np.ndarray:
    """Evaluate every node and return the value of ``output``.

    ``output`` defaults to the first declared output, or the last node.
    """
    missing = [n for n in graph.inputs if n not in bindings]
    if missing:
        raise GraphError(f"unbound inputs: {', '.join(missing)}")
    values: list[np.ndarray] = []
    for i, node in enumerate(graph.nodes):
        if node.op == "input":
            val = np.asarray(bindings[node.name], dtype=np.float64)
            if not np.isfinite(val).all():
                raise NonFiniteError(f"{node.describe(i)}: binding contains NaN/Inf")
        else:
            fwd = _RULES[node.op][0]
            try:
                val = fwd([values[p] for p in node.parents], node.attrs)
            except ShapeError as exc:
                raise ShapeError(f"{node.describe(i)}: {exc}") from None
            if not np.isfinite(val).all():
                raise NonFiniteError(f"{node.describe(i)}: non-finite value")
        values.append(val)
    graph.values = values
    if output is None:
        output = graph.outputs[0] if graph.outputs else len(values) - 1
    return values[output]


def backward(graph: Graph, scalar_output: int, wrt) -> dict[int, np.ndarray]:
    """Reverse-mode gradients of a (1,)-shaped node with respect to ``wrt``.

    Requested nodes that do not influence the output receive zeros.
    """
    values = graph.values
    if values is None:
        raise GraphError("backward called before eval_forward")
    if values[scalar_output].shape != (1,):
        raise ShapeError(f"backward: output node {scalar_output} has shape {values[scalar_output].shape}, need (1,)")
    wrt = list(wrt)
    n = len(graph.nodes)
    # nodes that depend on a requested node
    depends = [False] * n
    for w in wrt:
        depends[w] = True
    for i, node in enumerate(graph.nodes):
        if not depends[i] and any(depends[p] for p in node.parents):
            depends[i] = True
    grads: dict[int, np.ndarray] = {scalar_output: np.ones(1)}
    for i in range(scalar_output, -1, -1):
        g = grads.get(i)
        node = graph.nodes[i]
        if g is None or node.op == "input" or not depends[i]:
            continue
        need = [depends[p] for p in node.parents]
        parent_grads = _RULES[node.op][1](g, [values[p] for p in node.parents], values[i], node.attrs, need)
        for p, pg, nd in zip(node.parents, parent_grads, need):
            if not nd or pg is None:
                continue
            if p in grads:
                grads[p] = grads[p] + pg
            else:
                grads[p] = pg
    return {w: grads[w] if w in grads else np.zeros_like(values[w]) for w in wrt}


def finite_diff(function, point, step=1e-4):
    """Central-difference gradient of a scalar function at ``point``."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        hi = float(np.asarray(function(x)).reshape(-1)[0])
        flat[k] = orig - step
        lo = float(np.asarray(function(x)).reshape(-1)[0])
        flat[k] = orig
        gflat[k] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0
