"""A small float64 tensor type with tape-free reverse-mode differentiation.

Every op builds its output eagerly and, when any input requires a gradient,
stores a closure that maps the output gradient to input gradients. The graph
is the set of such links reachable from the loss; ``backward`` orders it
topologically and replays it once. Graphs share no mutable state, so distinct
graphs may be built and differentiated from different threads.

Only scalar broadcasting is supported.
"""
import contextlib
import threading

import numpy as np

from . import _accel

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # arithmetic sugar -------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("add", elementwise("mul", self, -1.0), other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def abs(self):
        return elementwise("abs", self)

    def square(self):
        return elementwise("square", self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    @property
    def T(self):
        return permute(self, (1, 0))

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# graph traversal

def topological_order(root):
    """Nodes reachable from ``root`` through recorded ops, inputs first."""
    order = []
    seen = set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise

_UNARY = ("abs", "square")
_BINARY = ("add", "sub", "mul")


def elementwise(op_kind, a, b=None):
    """add/sub/mul of equal shapes (or a scalar ``b``), and unary abs/square."""
    a = as_tensor(a)
    if op_kind in _UNARY:
        x = a.data
        if op_kind == "abs":
            return _result(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")
        return _result(x * x, (a,), lambda g: (2.0 * x * g,), "square")
    if op_kind not in _BINARY:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    if b is None:
        raise ValueError(f"{op_kind} needs two operands")
    b = as_tensor(b)
    scalar_b = b.data.ndim == 0 and a.data.ndim != 0
    if not scalar_b and a.shape != b.shape:
        raise ValueError(f"{op_kind}: shape mismatch {a.shape} vs {b.shape}")
    x, y = a.data, b.data

    def reduce_b(gb):
        return np.asarray(gb.sum()) if scalar_b else gb

    if op_kind == "add":
        return _result(x + y, (a, b), lambda g: (g, reduce_b(g)), "add")
    if op_kind == "sub":
        return _result(x - y, (a, b), lambda g: (g, reduce_b(-g)), "sub")
    return _result(x * y, (a, b), lambda g: (g * y, reduce_b(g * x)), "mul")


def tsum(a):
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,),
                   lambda g: (np.full(shape, float(g)),), "sum")


def tmean(a):
    shape, n = a.shape, a.data.size
    return _result(np.asarray(a.data.mean()), (a,),
                   lambda g: (np.full(shape, float(g) / n),), "mean")


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def back(g):
        return (g @ y.T if a.requires_grad else None,
                x.T @ g if b.requires_grad else None)
    return _result(x @ y, (a, b), back, "matmul")


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def permute(a, axes):
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"permute: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def concat_channels(xs):
    """Concatenate [C_i, ...] tensors along the leading (channel) axis."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat_channels: empty input list")
    rest = xs[0].shape[1:]
    for x in xs[1:]:
        if x.shape[1:] != rest:
            raise ValueError(
                f"concat_channels: trailing shapes differ {xs[0].shape} vs {x.shape}")
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))
    return _result(np.concatenate([x.data for x in xs], axis=0), xs, back, "concat")


# ---------------------------------------------------------------------------
# nonlinearities

def softmax_rows(w):
    """Row-wise softmax of a 2-D tensor; ``-inf`` entries get probability 0."""
    w = as_tensor(w)
    if w.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {w.shape}")
    x = w.data
    top = x.max(axis=1, keepdims=True)
    if np.any(np.isneginf(top)):
        raise ValueError("empty attention row: every entry is -inf")
    e = np.exp(x - top)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)
    return _result(p, (w,), back, "softmax")


def causal_mask(w):
    """Set entries above the main diagonal (future keys) to ``-inf``."""
    w = as_tensor(w)
    t, u = w.shape
    keep = np.tril(np.ones((t, u), dtype=bool))
    out = np.where(keep, w.data, -np.inf)
    return _result(out, (w,), lambda g: (np.where(keep, g, 0.0),), "causal_mask")


def prelu(x, slope):
    """Parametric ReLU with one slope per leading-axis channel."""
    x, slope = as_tensor(x), as_tensor(slope)
    if slope.ndim != 1 or slope.shape[0] != x.shape[0]:
        raise ValueError(f"prelu: slope shape {slope.shape} does not match "
                         f"{x.shape[0]} channels of {x.shape}")
    a = slope.data.reshape((-1,) + (1,) * (x.ndim - 1))
    pos = x.data >= 0
    out = np.where(pos, x.data, a * x.data)

    def back(g):
        gx = np.where(pos, g, a * g) if x.requires_grad else None
        ga = None
        if slope.requires_grad:
            ga = np.where(pos, 0.0, g * x.data).reshape(x.shape[0], -1).sum(axis=1)
        return gx, ga
    return _result(out, (x, slope), back, "prelu")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize every slice along the last axis, then scale and shift.

    ``gamma`` and ``beta`` have the length of the last axis and are shared by
    all other positions.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} "
                         f"do not match last axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        flat = g.reshape(-1, n)
        ggamma = (flat * xhat.reshape(-1, n)).sum(axis=0)
        gbeta = flat.sum(axis=0)
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta
    return _result(out, (x, gamma, beta), back, "layer_norm")


# ---------------------------------------------------------------------------
# convolution

PADDING_MODES = ("valid", "same", "causal_time")


def _same_pad(size, k_eff, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k_eff - size, 0)
    before = -(-total // 2)
    return before, total - before


def conv_geometry(in_t, in_l, m, n, stride, padding, dilation):
    """Padding amounts and output extents of a 2-D convolution.

    Returns ``((pt0, pt1), (pl0, pl1), out_t, out_l)``. Dilation applies to the
    time axis only.
    """
    if padding not in PADDING_MODES:
        raise ValueError(f"unknown padding mode {padding!r}")
    r, s = stride
    kt = (m - 1) * dilation + 1
    if padding == "valid":
        pt, pl = (0, 0), (0, 0)
    elif padding == "same":
        pt, pl = _same_pad(in_t, kt, r), _same_pad(in_l, n, s)
    else:
        pt, pl = (kt - 1, 0), _same_pad(in_l, n, s)
    tp, lp = in_t + sum(pt), in_l + sum(pl)
    if tp < kt or lp < n:
        raise ValueError(f"conv2d: kernel {m}x{n} (dilation {dilation}) larger than "
                         f"padded input {tp}x{lp}")
    return pt, pl, (tp - kt) // r + 1, (lp - n) // s + 1


def conv2d(x, kernel, bias=None, stride=(1, 1), padding="same", dilation=1):
    """Multi-channel 2-D cross-correlation of x [Cin, T, L] -> [Cout, T', L']."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(f"conv2d: expected x [C,T,L] and kernel [Co,Ci,m,n], got "
                         f"{x.shape} and {kernel.shape}")
    cout, cin, m, n = kernel.shape
    if x.shape[0] != cin:
        raise ValueError(f"conv2d: input has {x.shape[0]} channels, kernel expects {cin}")
    stride = (int(stride[0]), int(stride[1]))
    pt, pl, out_t, out_l = conv_geometry(x.shape[1], x.shape[2], m, n,
                                         stride, padding, dilation)
    xp = np.pad(x.data, ((0, 0), pt, pl)) if (sum(pt) or sum(pl)) else x.data
    out, ctx = _accel.conv2d_forward(xp, kernel.data, stride, dilation, out_t, out_l)
    if not grad_enabled():
        ctx = None
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None, None]
        parents.append(bias)
    t_in, l_in = x.shape[1], x.shape[2]

    def back(g):
        dxp, dw = _accel.conv2d_backward(xp, kernel.data, g, stride, dilation, ctx)
        dx = dxp[:, pt[0]:pt[0] + t_in, pl[0]:pl[0] + l_in]
        grads = [np.ascontiguousarray(dx), dw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)
    return _result(out, parents, back, "conv2d")


# ---------------------------------------------------------------------------
# framing

def frame(y, frame_len, shift):
    """Chunk a 1-D tensor into ceil(M/shift) zero-padded overlapping frames."""
    y = as_tensor(y)
    if y.ndim != 1 or y.shape[0] < 1:
        raise ValueError(f"frame: need a non-empty 1-D signal, got shape {y.shape}")
    if not (frame_len >= shift >= 1):
        raise ValueError(f"frame: need frame_len >= shift >= 1, got {frame_len}, {shift}")
    length = y.shape[0]
    n_frames = -(-length // shift)
    out = _accel.frame_gather(y.data, frame_len, shift, n_frames)

    def back(g):
        total, _ = _accel.overlap_add_sum(g, shift, length)
        return (total,)
    return _result(out, (y,), back, "frame")


def overlap_add(frames, shift, length):
    """Coverage-normalized overlap-add of [T, L] frames into ``length`` samples."""
    frames = as_tensor(frames)
    if frames.ndim != 2:
        raise ValueError(f"overlap_add: expected [T, L] frames, got {frames.shape}")
    n_frames, frame_len = frames.shape
    total, cover = _accel.overlap_add_sum(frames.data, shift, length)
    if np.any(cover == 0):
        raise ValueError(f"overlap_add: {n_frames} frames of shift {shift} do not "
                         f"cover {length} samples")
    out = total / cover

    def back(g):
        return (_accel.frame_gather(g / cover, frame_len, shift, n_frames),)
    return _result(out, (frames,), back, "overlap_add")
