"""Training objectives (time MSE, STFT magnitude, their mix, and the
phase-constrained magnitude loss) plus a stripe-artifact diagnostic."""
from dataclasses import dataclass, field

import numpy as np

from . import signal as sig
from . import tensor as tn
from .tensor import Tensor

LOSS_KINDS = ("T", "SM", "TF", "PCM")
DEFAULT_ALPHA = 0.8


@dataclass
class LossConfig:
    kind: str = "T"
    alpha: object = None  # TF only; defaults to DEFAULT_ALPHA there
    stft: sig.StftConfig = field(default_factory=sig.StftConfig)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}, expected one of {LOSS_KINDS}")
        if self.kind != "TF":
            if self.alpha is not None:
                raise ValueError(f"alpha only applies to the TF loss, not {self.kind}")
            return
        if self.alpha is None:
            self.alpha = DEFAULT_ALPHA
        self.alpha = float(self.alpha)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def _pair(s, s_hat):
    s, s_hat = tn.as_tensor(s), tn.as_tensor(s_hat)
    if s.shape != s_hat.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {s_hat.shape}")
    return s, s_hat


def loss_time(s, s_hat):
    """Mean squared error over samples."""
    s, s_hat = _pair(s, s_hat)
    return tn.tmean(tn.elementwise("square", s_hat - s))


def l1_magnitude(c):
    return c.real.abs() + c.imag.abs()


def sm_from_coefficients(ref, est):
    """Mean absolute difference of |Re|+|Im| between two STFTs."""
    return tn.tmean(tn.elementwise("abs", l1_magnitude(ref) - l1_magnitude(est)))


def loss_sm(s, s_hat, stft_cfg=sig.StftConfig()):
    s, s_hat = _pair(s, s_hat)
    return sm_from_coefficients(sig.stft(s, stft_cfg), sig.stft(s_hat, stft_cfg))


def loss_tf(s, s_hat, alpha=DEFAULT_ALPHA, stft_cfg=sig.StftConfig()):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * loss_time(s, s_hat) + (1.0 - alpha) * loss_sm(s, s_hat, stft_cfg)


def loss_pcm(s, s_hat, y, stft_cfg=sig.StftConfig()):
    """Equal-weight magnitude loss on the speech estimate and the implied
    noise estimate ``y - s_hat``."""
    s, s_hat = _pair(s, s_hat)
    y = tn.as_tensor(y)
    if y.shape != s.shape:
        raise ValueError(f"length mismatch: mixture {y.shape} vs speech {s.shape}")
    n = Tensor(y.data - s.data)
    n_hat = y - s_hat
    return 0.5 * loss_sm(s, s_hat, stft_cfg) + 0.5 * loss_sm(n, n_hat, stft_cfg)


def compute_loss(cfg, s, s_hat, y):
    if cfg.kind == "T":
        return loss_time(s, s_hat)
    if cfg.kind == "SM":
        return loss_sm(s, s_hat, cfg.stft)
    if cfg.kind == "TF":
        return loss_tf(s, s_hat, cfg.alpha, cfg.stft)
    return loss_pcm(s, s_hat, y, cfg.stft)


# ---------------------------------------------------------------------------
# single T-F unit geometry

def _bin(z):
    return sig.StftCoefficients(Tensor([[z.real]]), Tensor([[z.imag]]))


MEASURES = ("l1", "l2")


def bin_losses(s_bin, n_bin, s_hat_bin, measure="l1"):
    """SM and PCM loss restricted to one complex T-F coefficient.

    ``measure="l1"`` uses |Re| + |Im|, the magnitude the full losses train
    with; ``"l2"`` uses the Euclidean modulus.
    """
    if measure not in MEASURES:
        raise ValueError(f"measure must be one of {MEASURES}, got {measure!r}")
    y_bin = s_bin + n_bin
    n_hat = y_bin - s_hat_bin
    if measure == "l2":
        sm = abs(abs(s_bin) - abs(s_hat_bin))
        sm_noise = abs(abs(n_bin) - abs(n_hat))
    else:
        sm = sm_from_coefficients(_bin(s_bin), _bin(s_hat_bin)).item()
        sm_noise = sm_from_coefficients(_bin(n_bin), _bin(n_hat)).item()
    return sm, 0.5 * sm + 0.5 * sm_noise


def phase_sweep(s_bin, n_bin, steps=360, measure="l1"):
    """Rotate an estimate around the clean coefficient's magnitude contour.

    The estimate keeps the clean coefficient's magnitude under ``measure``
    (a diamond for l1, a circle for l2) while its phase runs over ``steps``
    equal increments starting at the clean phase. Returns
    ``(phases, sm, pcm)`` arrays.

    Under l1 the PCM zero set is the meeting of two diamonds. When speech and
    noise sit in the same or opposite quadrants their edges are collinear and
    the zero set is an arc rather than two points.
    """
    if measure not in MEASURES:
        raise ValueError(f"measure must be one of {MEASURES}, got {measure!r}")
    phase0 = np.angle(s_bin)
    phases = phase0 + 2.0 * np.pi * np.arange(steps) / steps
    sm = np.empty(steps)
    pcm = np.empty(steps)
    for i, ph in enumerate(phases):
        c, s = np.cos(ph), np.sin(ph)
        if measure == "l2":
            rho = abs(s_bin)
        else:
            rho = (abs(s_bin.real) + abs(s_bin.imag)) / (abs(c) + abs(s))
        est = s_bin if i == 0 else complex(rho * c, rho * s)
        sm[i], pcm[i] = bin_losses(s_bin, n_bin, est, measure)
    return phases, sm, pcm


# ---------------------------------------------------------------------------
# stripe artifact probe

PROBE_FRAME_MS = 64


def artifact_probe(s_hat, sample_rate=16000, min_teeth=4, max_spacing=None):
    """Fraction of long-window spectral energy sitting on a regular comb.

    The time-averaged 64 ms power spectrum is split into a smooth floor
    (running median) and peaky excess. For every bin spacing and offset the
    excess at grid bins that are also local maxima is summed; the best grid
    divided by the total power is the score. Silence scores 0.
    """
    s_hat = np.asarray(s_hat, dtype=np.float64)
    n = int(round(sample_rate * PROBE_FRAME_MS / 1000.0))
    n += n % 2
    if s_hat.ndim != 1 or s_hat.size <= n:
        raise ValueError(f"artifact_probe needs more than {n} samples")
    mag = sig.magnitude_spectrogram(s_hat, sig.StftConfig(n, n // 2, "hann"))
    power = (mag ** 2).mean(axis=0)
    total = power.sum()
    if total <= 0.0:
        return 0.0
    floor = _running_median(power, 9)
    excess = np.maximum(power - floor, 0.0)
    peaks = np.zeros_like(power, dtype=bool)
    peaks[1:-1] = (power[1:-1] >= power[:-2]) & (power[1:-1] >= power[2:])
    excess = np.where(peaks, excess, 0.0)
    # tolerate teeth that land one bin off the integer grid
    pooled = excess.copy()
    pooled[1:] = np.maximum(pooled[1:], excess[:-1])
    pooled[:-1] = np.maximum(pooled[:-1], excess[1:])
    nb = power.size
    max_spacing = max_spacing or nb // min_teeth
    best = 0.0
    for spacing in range(3, max_spacing + 1):
        for offset in range(spacing):
            grid = pooled[offset::spacing]
            if np.count_nonzero(grid) >= min_teeth:
                best = max(best, grid.sum())
    return float(best / total)


def _running_median(x, width):
    half = width // 2
    padded = np.pad(x, half, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, width)
    return np.median(win, axis=1)
