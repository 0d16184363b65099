"""Waveform framing, overlap-add, a differentiable matrix STFT and spectrogram export."""
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .tensor import Tensor


@dataclass
class FrameMatrix:
    frames: Tensor  # [T, L]
    original_len: int
    frame_len: int
    frame_shift: int

    @property
    def num_frames(self):
        return self.frames.shape[0]


def frame_signal(y, frame_len, frame_shift):
    """Split ``y`` into ceil(M/J) frames of L samples, zero-padding the tail."""
    y = tn.as_tensor(y)
    if y.ndim != 1 or y.shape[0] == 0:
        raise ValueError("frame_signal: empty or non 1-D signal")
    frames = tn.frame(y, frame_len, frame_shift)
    return FrameMatrix(frames, y.shape[0], frame_len, frame_shift)


def overlap_add(fm):
    """Inverse of :func:`frame_signal`: sum frames at their offsets and divide
    each sample by the number of frames covering it."""
    return tn.overlap_add(fm.frames, fm.frame_shift, fm.original_len)


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 512
    hop: int = 256
    window: str = "hann"

    def __post_init__(self):
        if self.frame_len % 2:
            raise ValueError(f"STFT frame length must be even, got {self.frame_len}")
        if not 1 <= self.hop <= self.frame_len:
            raise ValueError(f"STFT hop {self.hop} must lie in [1, {self.frame_len}]")
        if self.window not in ("hann", "rectangular"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def num_bins(self):
        return self.frame_len // 2 + 1


@dataclass
class StftCoefficients:
    real: Tensor  # [T, F]
    imag: Tensor  # [T, F]


def window(cfg):
    n = cfg.frame_len
    if cfg.window == "rectangular":
        return np.ones(n)
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


_basis_cache = {}


def dft_basis(cfg):
    """Windowed real DFT matrices [N, F] (cos, -sin)."""
    key = (cfg.frame_len, cfg.window)
    if key not in _basis_cache:
        n = cfg.frame_len
        k = np.arange(n)[:, None]
        f = np.arange(cfg.num_bins)[None, :]
        # exact integer reduction keeps the phase argument small
        ang = 2.0 * np.pi * ((k * f) % n) / n
        w = window(cfg)[:, None]
        cos_b = w * np.cos(ang)
        sin_b = -w * np.sin(ang)
        sin_b[:, 0] = 0.0
        sin_b[:, -1] = 0.0
        _basis_cache[key] = (cos_b, sin_b)
    return _basis_cache[key]


def stft(y, cfg=StftConfig()):
    """Real and imaginary STFT parts of a 1-D signal; differentiable in ``y``."""
    frames = tn.frame(tn.as_tensor(y), cfg.frame_len, cfg.hop)
    cos_b, sin_b = dft_basis(cfg)
    return StftCoefficients(tn.matmul(frames, Tensor(cos_b)),
                            tn.matmul(frames, Tensor(sin_b)))


def magnitude_spectrogram(y, cfg):
    with tn.no_grad():
        c = stft(np.asarray(y, dtype=np.float64), cfg)
    return np.hypot(c.real.data, c.imag.data)


def write_pgm(path, image):
    """Write a uint8 array as binary PGM (P5)."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(image.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write PGM to {path}: {exc}") from exc


def read_pgm(path):
    raw = Path(path).read_bytes()
    # header: magic, width, height, maxval, then exactly one whitespace byte
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def to_gray(values):
    """Min-max normalize to 0..255; a constant input maps to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round(255.0 * (values - lo) / (hi - lo)).astype(np.uint8)


def export_spectrogram(y, frame_ms, out_path, sample_rate=16000, window="hann"):
    """Write a log-magnitude spectrogram as PGM plus raw magnitudes as CSV.

    The image has time along x and frequency along y with low bins at the
    bottom. The CSV sits next to the image (same stem, ``.csv``) with one row
    per frame and one column per bin. Returns ``(pgm_path, csv_path)``.
    """
    if frame_ms not in (32, 64):
        raise ValueError(f"frame_ms must be 32 or 64, got {frame_ms}")
    n = int(round(sample_rate * frame_ms / 1000.0))
    n += n % 2
    cfg = StftConfig(frame_len=n, hop=n // 2, window=window)
    mag = magnitude_spectrogram(y, cfg)
    log_mag = 20.0 * np.log10(mag + 1e-8)
    out_path = Path(out_path)
    csv_path = out_path.with_suffix(".csv")
    write_pgm(out_path, to_gray(log_mag.T[::-1]))
    try:
        np.savetxt(csv_path, mag, delimiter=",", fmt="%.10g")
    except OSError as exc:
        raise OSError(f"cannot write spectrogram CSV to {csv_path}: {exc}") from exc
    return out_path, csv_path
