"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba kernels are used when numba imports cleanly and the environment
variable ``DCNSE_DISABLE_NUMBA`` is unset (or ``0``). ``set_backend`` switches
at runtime, which the tests use to check both paths against each other.

All kernels work on float64 C-contiguous arrays and are deterministic: the
accumulation order depends only on the shapes. Convolutions unfold the input
and hand the contraction to BLAS, except for the shapes where direct loops
are faster.
"""
import os

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_BACKENDS = ("numba", "numpy")


def _default_backend():
    flag = os.environ.get("DCNSE_DISABLE_NUMBA", "").strip().lower()
    if flag not in ("", "0", "false", "no") or not HAVE_NUMBA:
        return "numpy"
    return "numba"


_backend = _default_backend()


def backend():
    return _backend


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}, expected one of {_BACKENDS}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    prev, _backend = _backend, name
    return prev


# --------------------------------------------------------------------------
# numpy reference path

def _im2col(xp, m, n, stride, dilation, out_t, out_l):
    r, s = stride
    d = dilation
    cin = xp.shape[0]
    cols = np.empty((cin, m, n, out_t, out_l))
    for u in range(m):
        for v in range(n):
            cols[:, u, v] = xp[:, u * d:u * d + r * (out_t - 1) + 1:r,
                               v:v + s * (out_l - 1) + 1:s]
    return cols.reshape(cin * m * n, out_t * out_l)


def _conv_fwd_np(xp, w, stride, dilation, out_t, out_l):
    cout, cin, m, n = w.shape
    cols = _im2col(xp, m, n, stride, dilation, out_t, out_l)
    return (w.reshape(cout, -1) @ cols).reshape(cout, out_t, out_l), cols


def _conv_bwd_np(xp, w, gout, stride, dilation, cols=None):
    cout, cin, m, n = w.shape
    _, out_t, out_l = gout.shape
    r, s = stride
    d = dilation
    g2 = gout.reshape(cout, -1)
    if cols is None:
        cols = _im2col(xp, m, n, stride, dilation, out_t, out_l)
    dw = (g2 @ cols.T).reshape(w.shape)
    dcols = (w.reshape(cout, -1).T @ g2).reshape(cin, m, n, out_t, out_l)
    dxp = np.zeros_like(xp)
    for u in range(m):
        for v in range(n):
            dxp[:, u * d:u * d + r * (out_t - 1) + 1:r,
                v:v + s * (out_l - 1) + 1:s] += dcols[:, u, v]
    return dxp, dw


def _frame_np(y, frame_len, shift, n_frames):
    idx = np.arange(n_frames)[:, None] * shift + np.arange(frame_len)[None, :]
    padded = np.zeros(max(int(idx[-1, -1]) + 1, y.shape[0]))
    padded[:y.shape[0]] = y
    return padded[idx]


def _ola_np(frames, shift, length):
    n_frames, frame_len = frames.shape
    idx = np.arange(n_frames)[:, None] * shift + np.arange(frame_len)[None, :]
    keep = idx < length
    total = np.bincount(idx[keep], weights=frames[keep], minlength=length)
    cover = np.bincount(idx[keep], minlength=length).astype(np.float64)
    return total, cover


# --------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, m, n, r, s, d, out_t, out_l):
        cin = xp.shape[0]
        cols = np.empty((cin * m * n, out_t * out_l))
        k = 0
        for ci in range(cin):
            for u in range(m):
                for v in range(n):
                    dst = cols[k]
                    for i in range(out_t):
                        row = xp[ci, r * i + u * d]
                        base = i * out_l
                        for j in range(out_l):
                            dst[base + j] = row[s * j + v]
                    k += 1
        return cols

    @njit(cache=True)
    def _col2im_nb(dcols, cin, tp, lp, m, n, r, s, d, out_t, out_l):
        dxp = np.zeros((cin, tp, lp))
        k = 0
        for ci in range(cin):
            for u in range(m):
                for v in range(n):
                    src = dcols[k]
                    for i in range(out_t):
                        drow = dxp[ci, r * i + u * d]
                        base = i * out_l
                        for j in range(out_l):
                            drow[s * j + v] += src[base + j]
                    k += 1
        return dxp

    @njit(cache=True)
    def _conv_fwd_nb(xp, w, r, s, d, out_t, out_l):
        cout, cin, m, n = w.shape
        out = np.zeros((cout, out_t, out_l))
        for co in range(cout):
            for i in range(out_t):
                o = out[co, i]
                for ci in range(cin):
                    for u in range(m):
                        row = xp[ci, r * i + u * d]
                        for v in range(n):
                            wv = w[co, ci, u, v]
                            if s == 1:
                                for j in range(out_l):
                                    o[j] += wv * row[j + v]
                            else:
                                for j in range(out_l):
                                    o[j] += wv * row[s * j + v]
        return out

    @njit(cache=True)
    def _conv_dx_nb(xp, w, gout, r, s, d):
        cout, cin, m, n = w.shape
        _, out_t, out_l = gout.shape
        dxp = np.zeros_like(xp)
        for ci in range(cin):
            for co in range(cout):
                for u in range(m):
                    for v in range(n):
                        wv = w[co, ci, u, v]
                        for i in range(out_t):
                            g = gout[co, i]
                            drow = dxp[ci, r * i + u * d]
                            if s == 1:
                                for j in range(out_l):
                                    drow[j + v] += wv * g[j]
                            else:
                                for j in range(out_l):
                                    drow[s * j + v] += wv * g[j]
        return dxp

    # reassociation lets LLVM vectorize the reduction; order stays fixed per build
    @njit(cache=True, fastmath={"reassoc", "contract"})
    def _conv_dw_nb(xp, w, gout, r, s, d):
        cout, cin, m, n = w.shape
        _, out_t, out_l = gout.shape
        dw = np.zeros_like(w)
        for co in range(cout):
            for ci in range(cin):
                for u in range(m):
                    for v in range(n):
                        acc = 0.0
                        for i in range(out_t):
                            g = gout[co, i]
                            row = xp[ci, r * i + u * d]
                            if s == 1:
                                for j in range(out_l):
                                    acc += g[j] * row[j + v]
                            else:
                                for j in range(out_l):
                                    acc += g[j] * row[s * j + v]
                        dw[co, ci, u, v] = acc
        return dw

    @njit(cache=True)
    def _frame_nb(y, frame_len, shift, n_frames):
        out = np.zeros((n_frames, frame_len))
        m = y.shape[0]
        for t in range(n_frames):
            base = t * shift
            for k in range(frame_len):
                if base + k < m:
                    out[t, k] = y[base + k]
        return out

    @njit(cache=True)
    def _ola_nb(frames, shift, length):
        n_frames, frame_len = frames.shape
        total = np.zeros(length)
        cover = np.zeros(length)
        for t in range(n_frames):
            base = t * shift
            for k in range(frame_len):
                i = base + k
                if i < length:
                    total[i] += frames[t, k]
                    cover[i] += 1.0
        return total, cover


# --------------------------------------------------------------------------
# dispatch

def _is_pointwise(w, stride, out_t, out_l, xp):
    return (w.shape[2] == 1 and w.shape[3] == 1 and stride == (1, 1)
            and xp.shape[1] == out_t and xp.shape[2] == out_l)


# The direct loops beat unfold + BLAS only for unit stride with long rows and
# a column matrix too big to stay in cache (measured in bench_kernels.py).
DIRECT_MIN_ROW = 48
DIRECT_MIN_COLS = 750_000


def _use_direct(w, stride, out_t, out_l):
    cin, m, n = w.shape[1:]
    return (stride == (1, 1) and out_l >= DIRECT_MIN_ROW
            and cin * m * n * out_t * out_l >= DIRECT_MIN_COLS)


def _unfold_nb(xp, w, stride, dilation, out_t, out_l):
    m, n = w.shape[2:]
    return _im2col_nb(xp, m, n, stride[0], stride[1], dilation, out_t, out_l)


def conv2d_forward(xp, w, stride, dilation, out_t, out_l):
    """Cross-correlate an already padded ``xp`` [Cin, Tp, Lp] with ``w``.

    Returns ``(out, ctx)``: out is [Cout, out_t, out_l] without bias, ctx is
    opaque state to hand back to :func:`conv2d_backward`.
    """
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(w)
    cout, cin = w.shape[:2]
    if _is_pointwise(w, stride, out_t, out_l, xp):
        out = w.reshape(cout, cin) @ xp.reshape(cin, -1)
        return out.reshape(cout, out_t, out_l), None
    if _backend == "numba":
        if _use_direct(w, stride, out_t, out_l):
            return _conv_fwd_nb(xp, w, stride[0], stride[1], dilation, out_t, out_l), None
        cols = _unfold_nb(xp, w, stride, dilation, out_t, out_l)
        return (w.reshape(cout, -1) @ cols).reshape(cout, out_t, out_l), cols
    return _conv_fwd_np(xp, w, stride, dilation, out_t, out_l)


def conv2d_backward(xp, w, gout, stride, dilation, ctx=None):
    """Gradients wrt the padded input and the kernel."""
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(w)
    gout = np.ascontiguousarray(gout)
    cout, cin = w.shape[:2]
    _, out_t, out_l = gout.shape
    if _is_pointwise(w, stride, out_t, out_l, xp):
        g2 = gout.reshape(cout, -1)
        x2 = xp.reshape(cin, -1)
        dw = (g2 @ x2.T).reshape(w.shape)
        return (w.reshape(cout, cin).T @ g2).reshape(xp.shape), dw
    if _backend == "numba":
        r, s = stride
        if _use_direct(w, stride, out_t, out_l):
            return (_conv_dx_nb(xp, w, gout, r, s, dilation),
                    _conv_dw_nb(xp, w, gout, r, s, dilation))
        cols = ctx if ctx is not None else _unfold_nb(xp, w, stride, dilation, out_t, out_l)
        g2 = gout.reshape(cout, -1)
        dw = (g2 @ cols.T).reshape(w.shape)
        dcols = w.reshape(cout, -1).T @ g2
        m, n = w.shape[2:]
        dxp = _col2im_nb(dcols, cin, xp.shape[1], xp.shape[2], m, n, r, s, dilation,
                         out_t, out_l)
        return dxp, dw
    return _conv_bwd_np(xp, w, gout, stride, dilation, ctx)


def frame_gather(y, frame_len, shift, n_frames):
    y = np.ascontiguousarray(y, dtype=np.float64)
    if _backend == "numba":
        return _frame_nb(y, frame_len, shift, n_frames)
    return _frame_np(y, frame_len, shift, n_frames)


def overlap_add_sum(frames, shift, length):
    """Un-normalized overlap-add sum and per-sample coverage counts."""
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    if _backend == "numba":
        return _ola_nb(frames, shift, length)
    return _ola_np(frames, shift, length)
