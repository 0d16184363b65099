"""Time the numba and numpy kernel paths against each other.

    python benchmarks/bench_kernels.py [--repeat N]

Each case is warmed up once per backend (so JIT compilation is excluded),
then timed ``repeat`` times; the median is reported. The outputs of both
paths are also compared so a speedup never hides a wrong answer.
"""
import argparse
import statistics
import time

import numpy as np

from dcnse import _accel
from dcnse import losses as L
from dcnse import model as M
from dcnse.tensor import Tensor


def _conv_case(cin, cout, t, l, m, n, stride, dil):
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((cin, t, l))
    w = rng.standard_normal((cout, cin, m, n))
    out_t = (t - dil * (m - 1) - 1) // stride[0] + 1
    out_l = (l - n) // stride[1] + 1
    gout = rng.standard_normal((cout, out_t, out_l))

    def fwd():
        return _accel.conv2d_forward(xp, w, stride, dil, out_t, out_l)[0]

    def bwd():
        ctx = _accel.conv2d_forward(xp, w, stride, dil, out_t, out_l)[1]
        return np.concatenate([a.ravel() for a in
                               _accel.conv2d_backward(xp, w, gout, stride, dil, ctx)])
    return fwd, bwd


def _framing_case(n_samples, frame_len, shift):
    y = np.random.default_rng(1).standard_normal(n_samples)
    n_frames = -(-n_samples // shift)

    def run():
        fr = _accel.frame_gather(y, frame_len, shift, n_frames)
        total, cover = _accel.overlap_add_sum(fr, shift, n_samples)
        return total / cover
    return run


def _model_case(crop):
    mix = np.random.default_rng(2).standard_normal((2, crop)) * 0.1
    model = M.build_dcn(M.DcnConfig.tiny(), seed=0)
    s, y = Tensor(mix[0]), Tensor(mix[0] + mix[1])

    def run():
        model.zero_grad()
        loss = L.loss_time(s, M.enhance_frames(model, y))
        loss.backward()
        return np.array([loss.item()])
    return run


def cases():
    out = {}
    for label, args in (("conv 3x3 C16 T64 L64", (16, 16, 64, 64, 3, 3, (1, 1), 1)),
                        ("conv 2x3 C40 T64 L64", (40, 8, 65, 66, 2, 3, (1, 1), 1)),
                        ("conv 2x3 dil4 C24 T64", (24, 8, 68, 34, 2, 3, (1, 1), 4)),
                        ("conv down 2x3 s(1,2)", (8, 8, 65, 65, 2, 3, (1, 2), 1))):
        fwd, bwd = _conv_case(*args)
        out[label + " fwd"] = fwd
        out[label + " fwd+bwd"] = bwd
    out["frame+OLA 32000 L512 J256"] = _framing_case(32000, 512, 256)
    out["frame+OLA 32000 L64 J32"] = _framing_case(32000, 64, 32)
    out["tiny DCN fwd+bwd, 4096 samples"] = _model_case(4096)
    return out


def bench(fn, repeat):
    fn()  # warm-up, includes JIT compilation for numba
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'case':42s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max rel diff':>13s}")
    prev = _accel.backend()
    try:
        for label, fn in cases().items():
            res = {}
            for name in ("numpy", "numba"):
                _accel.set_backend(name)
                res[name] = (bench(fn, args.repeat), fn())
            a, b = res["numpy"][1], res["numba"][1]
            diff = float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-300))
            tn, tb = res["numpy"][0], res["numba"][0]
            print(f"{label:42s} {1e3 * tn:10.2f} {1e3 * tb:10.2f} {tn / tb:8.2f} {diff:13.2e}")
    finally:
        _accel.set_backend(prev)


if __name__ == "__main__":
    main()
