import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcnse import signal as sig
from dcnse import tensor as tn
from dcnse.tensor import Tensor

from _util import gradcheck, leaf

RECT = dict(window="rectangular")


# ---------------------------------------------------------------------------
# framing

def test_frame_example():
    fm = sig.frame_signal(np.arange(1.0, 9.0), 4, 2)
    expected = [[1, 2, 3, 4], [3, 4, 5, 6], [5, 6, 7, 8], [7, 8, 0, 0]]
    assert fm.num_frames == 4 and fm.original_len == 8
    assert np.array_equal(fm.frames.data, expected)


def test_frame_index_formula():
    rng = np.random.default_rng(0)
    y = rng.standard_normal(37)
    flen, shift = 10, 4
    fm = sig.frame_signal(y, flen, shift)
    assert fm.num_frames == -(-37 // 4)
    for t in range(fm.num_frames):
        for k in range(flen):
            i = t * shift + k
            assert fm.frames.data[t, k] == (y[i] if i < 37 else 0.0)


def test_frame_tiles_when_no_overlap():
    y = np.arange(12.0)
    assert np.array_equal(sig.frame_signal(y, 3, 3).frames.data.ravel(), y)


def test_frame_zero_signal():
    assert not np.any(sig.frame_signal(np.zeros(50), 8, 4).frames.data)


def test_frame_errors():
    with pytest.raises(ValueError):
        sig.frame_signal(np.zeros(0), 4, 2)
    with pytest.raises(ValueError):
        sig.frame_signal(np.zeros(10), 2, 4)


# ---------------------------------------------------------------------------
# overlap-add

def test_ola_round_trip_reference_case():
    y = np.random.default_rng(1).standard_normal(1000)
    out = sig.overlap_add(sig.frame_signal(y, 512, 256)).data
    assert out.shape == (1000,)
    assert np.max(np.abs(out - y)) < 1e-10


def test_ola_no_overlap_is_concatenation():
    frames = np.arange(12.0).reshape(4, 3)
    fm = sig.FrameMatrix(Tensor(frames), 10, 3, 3)
    assert np.array_equal(sig.overlap_add(fm).data, frames.ravel()[:10])


def test_ola_constant_frames():
    fm = sig.FrameMatrix(Tensor(np.ones((7, 8))), 30, 8, 4)
    assert np.array_equal(sig.overlap_add(fm).data, np.ones(30))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 400), st.integers(1, 64), st.integers(1, 64), st.integers(0, 2**31))
def test_ola_round_trip_property(m, a, b, seed):
    flen, shift = max(a, b), min(a, b)
    y = np.random.default_rng(seed).standard_normal(m)
    out = sig.overlap_add(sig.frame_signal(y, flen, shift)).data
    assert np.max(np.abs(out - y)) < 1e-10


# ---------------------------------------------------------------------------
# STFT

def test_stft_config_validation():
    with pytest.raises(ValueError):
        sig.StftConfig(frame_len=511)
    with pytest.raises(ValueError):
        sig.StftConfig(frame_len=8, hop=9)
    with pytest.raises(ValueError):
        sig.StftConfig(window="hamming")
    assert sig.StftConfig(1024).num_bins == 513


def test_stft_dc_signal():
    cfg = sig.StftConfig(16, 8, **RECT)
    c = 0.75
    coef = sig.stft(np.full(64, c), cfg)
    interior = slice(0, 7)  # the last frame runs into the zero padding
    assert np.allclose(coef.real.data[interior, 0], c * 16, rtol=0, atol=1e-12)
    assert np.allclose(coef.real.data[interior, 1:], 0.0, atol=1e-12)
    assert np.allclose(coef.imag.data[interior], 0.0, atol=1e-12)


def test_stft_cosine_concentrates_in_its_bin():
    n, f0 = 32, 5
    cfg = sig.StftConfig(n, n, **RECT)
    y = np.cos(2 * np.pi * f0 * np.arange(4 * n) / n)
    coef = sig.stft(y, cfg)
    power = coef.real.data ** 2 + coef.imag.data ** 2
    # closed form: a frame-aligned cosine gives N/2 in bin f0 and 0 elsewhere
    assert np.allclose(coef.real.data[:, f0], n / 2, atol=1e-10)
    others = np.delete(power, f0, axis=1)
    assert np.max(others) < 1e-20


def test_stft_zero_imag_at_dc_and_nyquist():
    coef = sig.stft(np.random.default_rng(2).standard_normal(2048))
    assert np.all(coef.imag.data[:, 0] == 0.0) and np.all(coef.imag.data[:, -1] == 0.0)


def test_stft_matches_numpy_fft():
    cfg = sig.StftConfig(64, 16)
    y = np.random.default_rng(3).standard_normal(300)
    coef = sig.stft(y, cfg)
    frames = sig.frame_signal(y, 64, 16).frames.data * sig.window(cfg)
    ref = np.fft.rfft(frames, axis=1)
    assert np.allclose(coef.real.data, ref.real, atol=1e-11)
    assert np.allclose(coef.imag.data, ref.imag, atol=1e-11)


def test_stft_parseval_rectangular():
    n = 64
    cfg = sig.StftConfig(n, n, **RECT)
    y = np.random.default_rng(4).standard_normal(5 * n)
    coef = sig.stft(y, cfg)
    p = coef.real.data ** 2 + coef.imag.data ** 2
    full = p[:, 0] + p[:, -1] + 2 * p[:, 1:-1].sum(axis=1)
    per_frame = n * (y.reshape(5, n) ** 2).sum(axis=1)
    assert np.allclose(full, per_frame, rtol=1e-8)


def test_stft_linearity():
    rng = np.random.default_rng(5)
    x, z = rng.standard_normal(700), rng.standard_normal(700)
    a, b = 1.7, -0.3
    lhs = sig.stft(a * x + b * z)
    cx, cz = sig.stft(x), sig.stft(z)
    assert np.allclose(lhs.real.data, a * cx.real.data + b * cz.real.data, rtol=0, atol=1e-10)
    assert np.allclose(lhs.imag.data, a * cx.imag.data + b * cz.imag.data, rtol=0, atol=1e-10)


def test_stft_gradient_of_abs_real():
    rng = np.random.default_rng(6)
    cfg = sig.StftConfig(16, 8)
    y = leaf(rng.standard_normal(40))
    # piecewise linear in y: central differences are exact while no
    # coefficient changes sign (smallest |real| here is about 1e-2)
    assert np.min(np.abs(sig.stft(y, cfg).real.data)) > 1e-2
    err = gradcheck(lambda: tn.tsum(sig.stft(y, cfg).real.abs()), [y], h=1e-3)
    assert err < 1e-5


# ---------------------------------------------------------------------------
# spectrogram export

def test_spectrogram_silence_is_uniform(tmp_path):
    pgm, csv = sig.export_spectrogram(np.zeros(4000), 32, tmp_path / "s.pgm")
    img = sig.read_pgm(pgm)
    assert img.min() == img.max()
    assert np.all(np.loadtxt(csv, delimiter=",") == 0.0)


def test_spectrogram_chirp_ridge(tmp_path):
    sr = 16000
    t = np.arange(sr) / sr
    f0, f1 = 200.0, 6000.0
    y = np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t ** 2))
    _, csv = sig.export_spectrogram(y, 32, tmp_path / "c.pgm")
    mag = np.loadtxt(csv, delimiter=",")
    ridge = mag[1:-1].argmax(axis=1)  # skip half-empty edge frames
    assert np.all(np.diff(ridge) >= 0)
    assert ridge[-1] > ridge[0] + 100


def test_spectrogram_bin_counts_and_layout(tmp_path):
    y = np.random.default_rng(7).standard_normal(8000)
    p32, c32 = sig.export_spectrogram(y, 32, tmp_path / "a.pgm")
    p64, c64 = sig.export_spectrogram(y, 64, tmp_path / "b.pgm")
    b32 = np.loadtxt(c32, delimiter=",").shape[1]
    b64 = np.loadtxt(c64, delimiter=",").shape[1]
    assert (b32, b64) == (257, 513)
    assert b64 - 1 == 2 * (b32 - 1)  # N/2 + 1 bins each
    img = sig.read_pgm(p64)
    assert img.shape[0] == b64 and img.dtype == np.uint8


def test_spectrogram_low_bins_at_bottom(tmp_path):
    sr = 16000
    y = np.sin(2 * np.pi * 500 * np.arange(sr // 2) / sr)
    p, _ = sig.export_spectrogram(y, 32, tmp_path / "t.pgm")
    img = sig.read_pgm(p).astype(float)
    bright = img.mean(axis=1).argmax()
    assert bright > img.shape[0] * 0.9


def test_spectrogram_bad_args(tmp_path):
    with pytest.raises(ValueError):
        sig.export_spectrogram(np.zeros(100), 48, tmp_path / "x.pgm")
    with pytest.raises(OSError, match="missing"):
        sig.export_spectrogram(np.zeros(2000), 32, tmp_path / "missing" / "x.pgm")


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(8).integers(0, 256, (5, 7)).astype(np.uint8)
    img[0, :3] = [10, 32, 9]  # pixel bytes that look like header whitespace
    sig.write_pgm(tmp_path / "i.pgm", img)
    assert np.array_equal(sig.read_pgm(tmp_path / "i.pgm"), img)
    raw = (tmp_path / "i.pgm").read_bytes()
    assert raw.startswith(b"P5\n7 5\n255\n")
