"""Small define-then-run reverse-mode differentiation engine on float64 numpy arrays.

A :class:`Graph` is an ordered list of primitive nodes. Input and parameter
nodes are placeholders bound at evaluation time; every other node applies one
primitive to earlier nodes, so the list order is already a topological order.

    g = Graph()
    x = g.input("x")
    w = g.param("w")
    y = g.matmul("y", x, w)
    loss = g.mean("loss", y)
    values = evaluate(g, {"x": ..., "w": ...})
    grads = gradients(g, {"x": ..., "w": ...}, "loss", {"w"})

Tensors are plain ``numpy.ndarray`` objects in float64. Every op checks the
shapes it receives and every intermediate value is checked for NaN/Inf.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Graph",
    "Node",
    "ShapeError",
    "UnboundNodeError",
    "NonFiniteError",
    "evaluate",
    "gradients",
    "value_and_grad",
    "finite_difference_check",
]


class ShapeError(ValueError):
    pass


class UnboundNodeError(KeyError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# primitive ops: forward(args, attrs) -> (value, cache)
#                backward(gout, args, value, cache, attrs, needs) -> tuple of grads


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _add_fwd(args, attrs):
    a, b = args
    _check_broadcast(a, b, "add")
    return a + b, None


def _add_bwd(g, args, out, cache, attrs, needs):
    a, b = args
    return (
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(g, b.shape) if needs[1] else None,
    )


def _mul_fwd(args, attrs):
    a, b = args
    _check_broadcast(a, b, "mul")
    return a * b, None


def _mul_bwd(g, args, out, cache, attrs, needs):
    a, b = args
    return (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    )


def _matmul_fwd(args, attrs):
    a, b = args
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return a @ b, None


def _matmul_bwd(g, args, out, cache, attrs, needs):
    a, b = args
    return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


def _affine_fwd(args, attrs):
    x, w, b = args
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: x{x.shape} w{w.shape} b{b.shape}")
    return x @ w + b, None


def _affine_bwd(g, args, out, cache, attrs, needs):
    x, w, b = args
    return (
        g @ w.T if needs[0] else None,
        x.T @ g if needs[1] else None,
        g.sum(axis=0) if needs[2] else None,
    )


def _conv_pads(kh, kw, padding):
    if padding == "same":
        return (kh - 1) // 2, kh // 2, (kw - 1) // 2, kw // 2
    if padding == "valid":
        return 0, 0, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def _conv2d_fwd(args, attrs):
    # x: [B, H, W, Cin], w: [kh, kw, Cin, Cout], stride 1
    x, w = args
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: x{x.shape} w{w.shape}")
    kh, kw, cin, cout = w.shape
    pt, pb, pl, pr = _conv_pads(kh, kw, attrs.get("padding", "same"))
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x
    bsz, hp, wp, _ = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape[:2]} larger than input {x.shape[1:3]}")
    # [B, ho, wo, Cin, kh, kw] -> [B, ho, wo, kh, kw, Cin]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * cin)
    out = (cols @ w.reshape(-1, cout)).reshape(bsz, ho, wo, cout)
    return out, (cols, xp.shape, (pt, pb, pl, pr))


def _conv2d_bwd(g, args, out, cache, attrs, needs):
    x, w = args
    cols, xp_shape, (pt, pb, pl, pr) = cache
    kh, kw, cin, cout = w.shape
    g2 = g.reshape(-1, cout)
    gw = (cols.T @ g2).reshape(w.shape) if needs[1] else None
    gx = None
    if needs[0]:
        bsz, ho, wo, _ = g.shape
        # one contiguous [B*ho*wo, Cin] block per kernel tap, then scatter-add
        wt = np.ascontiguousarray(w.reshape(kh * kw, cin, cout).transpose(0, 2, 1))
        dcols = np.matmul(g2[None], wt).reshape(kh, kw, bsz, ho, wo, cin)
        dxp = np.zeros(xp_shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + ho, j:j + wo, :] += dcols[i, j]
        gx = dxp[:, pt:xp_shape[1] - pb, pl:xp_shape[2] - pr, :]
    return gx, gw


def _pool_views(x):
    # odd trailing row/column is dropped
    h2, w2 = x.shape[1] // 2, x.shape[2] // 2
    return [x[:, di:2 * h2:2, dj:2 * w2:2, :] for di in (0, 1) for dj in (0, 1)]


def _maxpool_fwd(args, attrs):
    (x,) = args
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2 expects [B, H, W, C], got {x.shape}")
    if x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError(f"maxpool2x2: input {x.shape} too small")
    a, b, c, d = _pool_views(x)
    return np.maximum(np.maximum(a, b), np.maximum(c, d)), None


def _maxpool_bwd(g, args, out, cache, attrs, needs):
    # ties route the gradient to the first maximal element in row-major order
    (x,) = args
    gx = np.zeros(x.shape)
    taken = np.zeros(out.shape, dtype=bool)
    for view, dst in zip(_pool_views(x), _pool_views(gx)):
        hit = view == out
        hit &= ~taken
        taken |= hit
        dst[...] = g * hit
    return (gx,)


def _relu_fwd(args, attrs):
    (x,) = args
    return np.maximum(x, 0.0), None


def _relu_bwd(g, args, out, cache, attrs, needs):
    (x,) = args
    return (np.where(x > 0, g, 0.0),)


def _channel_sums(x):
    # BLAS reduction over all leading axes; much faster than ndarray.sum(axis=...)
    x2 = x.reshape(-1, x.shape[-1])
    return np.ones(x2.shape[0]) @ x2


def _batchnorm_fwd(args, attrs):
    # normalizes over every axis but the last (channel) axis
    eps = attrs.get("eps", 1e-5)
    x, gamma, beta = args[:3]
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: x{x.shape} gamma{gamma.shape} beta{beta.shape}")
    if attrs.get("training", True):
        m = x.size // c
        mean = _channel_sums(x) / m
        centered = x - mean
        var = _channel_sums(centered * centered) / m
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        return gamma * xhat + beta, (xhat, inv_std, mean, var)
    mean, var = args[3], args[4]
    if mean.shape != (c,) or var.shape != (c,):
        raise ShapeError("batchnorm: running statistics shape mismatch")
    inv_std = 1.0 / np.sqrt(var + eps)
    scale = gamma * inv_std
    return x * scale + (beta - mean * scale), (None, inv_std, mean, var)


def _batchnorm_bwd(g, args, out, cache, attrs, needs):
    x, gamma = args[0], args[1]
    xhat, inv_std, mean, _ = cache
    if xhat is None and needs[1]:
        xhat = (x - mean) * inv_std
    ggamma = _channel_sums(g * xhat) if needs[1] else None
    gbeta = _channel_sums(g) if needs[2] else None
    gx = None
    if needs[0]:
        if attrs.get("training", True):
            m = x.size // x.shape[-1]
            dxhat = g * gamma
            gx = (inv_std / m) * (
                m * dxhat - _channel_sums(dxhat) - xhat * _channel_sums(dxhat * xhat)
            )
        else:
            gx = g * (gamma * inv_std)
    rest = (None, None) if len(args) == 5 else ()
    return (gx, ggamma, gbeta) + rest


def _log_softmax(z):
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _softmax_fwd(args, attrs):
    (z,) = args
    if z.ndim != 2:
        raise ShapeError(f"softmax expects [B, K], got {z.shape}")
    return np.exp(_log_softmax(z)), None


def _softmax_bwd(g, args, out, cache, attrs, needs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _softmax_ll_fwd(args, attrs):
    # mean over the batch of -sum_k y_k log softmax(z)_k
    z, y = args
    if z.ndim != 2 or y.shape != z.shape:
        raise ShapeError(f"softmax_ll: logits {z.shape} vs targets {y.shape}")
    logp = _log_softmax(z)
    return np.asarray(-(y * logp).sum() / z.shape[0]), logp


def _softmax_ll_bwd(g, args, out, logp, attrs, needs):
    z, y = args
    bsz = z.shape[0]
    p = np.exp(logp)
    gz = g * (p * y.sum(axis=-1, keepdims=True) - y) / bsz if needs[0] else None
    gy = -g * logp / bsz if needs[1] else None
    return gz, gy


def _reshape_fwd(args, attrs):
    (x,) = args
    shape = tuple(attrs["shape"])
    if shape and shape[0] == "batch":
        shape = (x.shape[0],) + shape[1:]
    try:
        return x.reshape(shape), None
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None


def _reshape_bwd(g, args, out, cache, attrs, needs):
    return (g.reshape(args[0].shape),)


def _mean_fwd(args, attrs):
    (x,) = args
    return np.asarray(x.mean()), None


def _mean_bwd(g, args, out, cache, attrs, needs):
    (x,) = args
    return (np.full(x.shape, g / x.size),)


def _sumsq_fwd(args, attrs):
    (x,) = args
    return np.asarray(attrs.get("scale", 1.0) * np.vdot(x, x)), None


def _sumsq_bwd(g, args, out, cache, attrs, needs):
    (x,) = args
    return (2.0 * attrs.get("scale", 1.0) * g * x,)


def _scale_fwd(args, attrs):
    (x,) = args
    return attrs["factor"] * x, None


def _scale_bwd(g, args, out, cache, attrs, needs):
    return (attrs["factor"] * g,)


_OPS = {
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "affine": (_affine_fwd, _affine_bwd),
    "conv2d": (_conv2d_fwd, _conv2d_bwd),
    "maxpool2x2": (_maxpool_fwd, _maxpool_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "batchnorm": (_batchnorm_fwd, _batchnorm_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "softmax_ll": (_softmax_ll_fwd, _softmax_ll_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "sumsq": (_sumsq_fwd, _sumsq_bwd),
    "scale": (_scale_fwd, _scale_bwd),
}

_LEAVES = ("input", "param")


class Graph:
    """Ordered, append-only list of nodes; names are unique."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._by_name: dict[str, Node] = {}

    def __contains__(self, name):
        return name in self._by_name

    def __getitem__(self, name) -> Node:
        return self._by_name[name]

    def _append(self, name, op, inputs=(), **attrs):
        if name in self._by_name:
            raise ValueError(f"duplicate node name {name!r}")
        for src in inputs:
            if src not in self._by_name:
                raise KeyError(f"node {name!r} refers to unknown input {src!r}")
        node = Node(name, op, tuple(inputs), attrs)
        self.nodes.append(node)
        self._by_name[name] = node
        return name

    def input(self, name):
        return self._append(name, "input")

    def param(self, name):
        return self._append(name, "param")

    @property
    def inputs(self):
        return [n.name for n in self.nodes if n.op == "input"]

    @property
    def params(self):
        return [n.name for n in self.nodes if n.op == "param"]

    def add(self, name, a, b):
        return self._append(name, "add", (a, b))

    def mul(self, name, a, b):
        return self._append(name, "mul", (a, b))

    def matmul(self, name, a, b):
        return self._append(name, "matmul", (a, b))

    def affine(self, name, x, w, b):
        return self._append(name, "affine", (x, w, b))

    def conv2d(self, name, x, w, padding="same"):
        return self._append(name, "conv2d", (x, w), padding=padding)

    def maxpool2x2(self, name, x):
        return self._append(name, "maxpool2x2", (x,))

    def relu(self, name, x):
        return self._append(name, "relu", (x,))

    def batchnorm(self, name, x, gamma, beta, running_mean=None, running_var=None,
                  training=True, eps=1e-5):
        inputs = (x, gamma, beta)
        if not training:
            if running_mean is None or running_var is None:
                raise ValueError("eval-mode batchnorm needs running statistics")
            inputs += (running_mean, running_var)
        return self._append(name, "batchnorm", inputs, training=training, eps=eps)

    def softmax(self, name, logits):
        return self._append(name, "softmax", (logits,))

    def softmax_ll(self, name, logits, targets):
        return self._append(name, "softmax_ll", (logits, targets))

    def reshape(self, name, x, shape):
        """``shape`` may start with the string ``"batch"`` to keep the leading dim."""
        return self._append(name, "reshape", (x,), shape=tuple(shape))

    def mean(self, name, x):
        return self._append(name, "mean", (x,))

    def sumsq(self, name, x, scale=1.0):
        return self._append(name, "sumsq", (x,), scale=scale)

    def scale(self, name, x, factor):
        return self._append(name, "scale", (x,), factor=factor)


def _ancestors(graph, targets):
    keep = set(targets)
    for node in reversed(graph.nodes):
        if node.name in keep:
            keep.update(node.inputs)
    return keep


def _forward(graph, bindings, targets):
    needed = _ancestors(graph, targets)
    values, caches = {}, {}
    for node in graph.nodes:
        if node.name not in needed:
            continue
        if node.op in _LEAVES:
            if node.name not in bindings:
                raise UnboundNodeError(f"no binding for {node.op} node {node.name!r}")
            val = np.asarray(bindings[node.name], dtype=np.float64)
            if not np.isfinite(val).all():
                raise NonFiniteError(f"binding {node.name!r} contains NaN/Inf")
            values[node.name] = val
            continue
        fwd, _ = _OPS[node.op]
        try:
            out, cache = fwd([values[i] for i in node.inputs], node.attrs)
        except ShapeError as exc:
            raise ShapeError(f"node {node.name!r}: {exc}") from None
        if not np.isfinite(out).all():
            raise NonFiniteError(f"node {node.name!r} ({node.op}) produced NaN/Inf")
        values[node.name] = out
        caches[node.name] = cache
        if node.op == "batchnorm" and node.attrs.get("training", True):
            values[node.name + "/batch_mean"] = cache[2]
            values[node.name + "/batch_var"] = cache[3]
    return values, caches


def evaluate(graph, bindings, outputs=None):
    """Evaluate ``outputs`` (default: every node) and return a name -> array map.

    Training-mode batchnorm nodes additionally report ``<name>/batch_mean``
    and ``<name>/batch_var``.
    """
    targets = [n.name for n in graph.nodes] if outputs is None else list(outputs)
    for t in targets:
        if t not in graph:
            raise KeyError(f"unknown output node {t!r}")
    values, _ = _forward(graph, bindings, targets)
    return values


def _backward(graph, values, caches, loss, wrt):
    loss_val = values[loss]
    if loss_val.size != 1:
        raise ShapeError(f"loss node {loss!r} is not scalar (shape {loss_val.shape})")
    # nodes that depend on some wrt node
    depends = set(wrt)
    for node in graph.nodes:
        if any(i in depends for i in node.inputs):
            depends.add(node.name)
    grads = {loss: np.ones_like(loss_val)}
    for node in reversed(graph.nodes):
        if node.name not in values or node.op in _LEAVES:
            continue
        g = grads.pop(node.name, None) if node.name not in wrt else grads.get(node.name)
        if g is None:
            continue
        needs = [i in depends for i in node.inputs]
        if not any(needs):
            continue
        _, bwd = _OPS[node.op]
        args = [values[i] for i in node.inputs]
        in_grads = bwd(g, args, values[node.name], caches[node.name], node.attrs, needs)
        for src, gi, need in zip(node.inputs, in_grads, needs):
            if not need or gi is None:
                continue
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = gi
    out = {}
    for name in wrt:
        g = grads.get(name)
        out[name] = np.zeros_like(values[name]) if g is None else np.asarray(g, dtype=np.float64)
    return out


def value_and_grad(graph, bindings, loss, wrt, outputs=()):
    """Run one forward pass and reverse sweep.

    Returns ``(values, grads)``; ``values`` holds the loss, every ``outputs``
    node and the batch statistics of any training-mode batchnorm.
    Requested nodes that the loss does not depend on get all-zero gradients.
    """
    wrt = list(wrt)
    for name in wrt + [loss] + list(outputs):
        if name not in graph:
            raise KeyError(f"unknown node {name!r}")
    values, caches = _forward(graph, bindings, [loss, *outputs, *wrt])
    grads = _backward(graph, values, caches, loss, set(wrt))
    return values, {name: grads[name] for name in wrt}


def gradients(graph, bindings, loss, wrt):
    """Exact reverse-mode gradients of scalar node ``loss`` w.r.t. each name in ``wrt``."""
    return value_and_grad(graph, bindings, loss, wrt)[1]


def finite_difference_check(graph, bindings, loss, wrt=None, step=1e-5, max_coords=None, rng=None,
                            floor=1e-5):
    """Worst relative discrepancy between reverse-mode and central-difference gradients.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Derivatives that vanish exactly (a conv bias feeding training-mode batch norm)
    leave only round-off of order ``1e-16 / step`` in the estimate; ``floor``
    keeps that noise from reading as a relative error.
    ``max_coords`` caps the number of perturbed coordinates per tensor (chosen
    with ``rng``) for large graphs.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if wrt is None:
        wrt = [n for n in graph.inputs + graph.params if n in bindings]
    analytic = gradients(graph, bindings, loss, wrt)
    base = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    worst = 0.0
    for name in wrt:
        flat = base[name].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = np.random.default_rng(0) if rng is None else rng
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        grad = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = float(evaluate(graph, base, [loss])[loss])
            flat[i] = orig - step
            down = float(evaluate(graph, base, [loss])[loss])
            flat[i] = orig
            est = (up - down) / (2 * step)
            if not np.isfinite(est):
                raise NonFiniteError(f"non-finite difference estimate at {name}[{i}]")
            denom = max(abs(grad[i]), abs(est), floor)
            worst = max(worst, abs(grad[i] - est) / denom)
    return worst
