"""SNR-controlled mixing, a synthetic speech/noise corpus, PCM16 WAV I/O and
SNR / SI-SDR metrics."""
import csv
import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

SAMPLE_RATE = 16000
TRAIN_SNRS = (-5, -4, -3, -2, -1, 0)
TEST_SNRS = (-5, 0, 5)
NOISE_KINDS = ("white", "pink", "babble")

# returned by the metrics when the estimate reproduces the reference
PERFECT = math.inf


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioBuffer holds mono audio only")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioBuffer samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return self.samples.size


@dataclass
class Mixture:
    s: np.ndarray
    n: np.ndarray  # scaled noise, y == s + n
    y: np.ndarray
    snr_db: float
    noise_kind: str
    seed: int


def _samples(x):
    return x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)


def mix_at_snr(s, n, snr_db):
    """Scale ``n`` (truncated to ``len(s)``) so the mixture has the requested
    global SNR. Returns ``(y, n_scaled)``."""
    s, n = _samples(s), _samples(n)
    if not math.isfinite(snr_db):
        raise ValueError(f"SNR must be finite, got {snr_db}")
    if n.size < s.size:
        raise ValueError(f"noise ({n.size} samples) shorter than speech ({s.size})")
    n = n[:s.size]
    es, en = float(np.dot(s, s)), float(np.dot(n, n))
    if es == 0.0 or en == 0.0:
        raise ValueError("SNR undefined for silent speech or noise")
    g = math.sqrt(es / (en * 10.0 ** (snr_db / 10.0)))
    n_scaled = g * n
    return s + n_scaled, n_scaled


def measured_snr(s, n):
    s, n = _samples(s), _samples(n)
    return 10.0 * math.log10(float(np.dot(s, s)) / float(np.dot(n, n)))


# ---------------------------------------------------------------------------
# metrics

def snr_metric(s, s_hat):
    """10 log10(|s|^2 / |s - s_hat|^2); ``PERFECT`` when s_hat == s."""
    s, s_hat = _samples(s), _samples(s_hat)
    if s.shape != s_hat.shape:
        raise ValueError(f"length mismatch {s.shape} vs {s_hat.shape}")
    es = float(np.dot(s, s))
    if es == 0.0:
        raise ValueError("reference signal is silent")
    err = s - s_hat
    ee = float(np.dot(err, err))
    if ee == 0.0:
        return PERFECT
    return 10.0 * math.log10(es / ee)


def si_sdr(s, s_hat):
    """Scale-invariant SDR of ``s_hat`` against reference ``s``.

    Returns ``PERFECT`` when the residual after projection is at rounding
    level, e.g. for any nonzero rescaling of ``s``.
    """
    s, s_hat = _samples(s), _samples(s_hat)
    if s.shape != s_hat.shape:
        raise ValueError(f"length mismatch {s.shape} vs {s_hat.shape}")
    es = float(np.dot(s, s))
    if es == 0.0:
        raise ValueError("reference signal is silent")
    eh = float(np.dot(s_hat, s_hat))
    if eh == 0.0:
        raise ValueError("estimate is all zeros")
    target = (float(np.dot(s_hat, s)) / es) * s
    resid = s_hat - target
    et, er = float(np.dot(target, target)), float(np.dot(resid, resid))
    if er <= (64 * np.finfo(float).eps) ** 2 * eh:
        return PERFECT
    if et == 0.0:
        return -PERFECT
    return 10.0 * math.log10(et / er)


# ---------------------------------------------------------------------------
# synthetic corpus

def _speech(rng, n_samples, sr):
    t = np.arange(n_samples) / sr
    s = np.zeros(n_samples)
    for _ in range(rng.integers(2, 5)):
        f = rng.uniform(150.0, 1200.0)
        am = 1.0 + 0.8 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
        s += rng.uniform(0.3, 1.0) * am * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    # glottal-like pulse train with slowly gliding pitch through two resonances
    f0 = rng.uniform(90.0, 220.0) * (1.0 + 0.15 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t))
    phase = np.cumsum(f0) / sr
    pulses = np.diff(np.floor(phase), prepend=0.0)
    voiced = pulses
    for fc, bw in ((rng.uniform(300, 900), 90.0), (rng.uniform(1000, 2500), 150.0)):
        rad = math.exp(-math.pi * bw / sr)
        a = [1.0, -2 * rad * math.cos(2 * math.pi * fc / sr), rad * rad]
        voiced = voiced + sps.lfilter([1.0 - rad], a, pulses)
    s += 2.0 * voiced / (np.max(np.abs(voiced)) + 1e-12)
    # syllable envelope with short pauses
    env = np.zeros(n_samples)
    pos = 0
    while pos < n_samples:
        seg = int(rng.uniform(0.12, 0.35) * sr)
        gap = int(rng.uniform(0.02, 0.12) * sr)
        win = np.hanning(seg)
        env[pos:pos + seg] = win[:max(0, min(seg, n_samples - pos))]
        pos += seg + gap
    s *= env
    return 0.05 * s / (np.sqrt(np.mean(s ** 2)) + 1e-12)


def _noise(rng, kind, n_samples, sr):
    if kind == "white":
        return rng.standard_normal(n_samples)
    if kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n_samples))
        f = np.arange(spec.size, dtype=np.float64)
        f[0] = 1.0
        return np.fft.irfft(spec / np.sqrt(f), n_samples)
    if kind == "babble":
        t = np.arange(n_samples) / sr
        out = np.zeros(n_samples)
        for _ in range(12):
            f = rng.uniform(200.0, 5000.0)
            am = np.abs(np.sin(2 * np.pi * rng.uniform(1.0, 8.0) * t + rng.uniform(0, 2 * np.pi)))
            out += am * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        return out + 0.3 * rng.standard_normal(n_samples)
    raise ValueError(f"unknown noise kind {kind!r}")


def synth_mixture(seed, duration_s=2.0, snr_db=None, noise_kind=None, sample_rate=SAMPLE_RATE,
                  snrs=TRAIN_SNRS):
    rng = np.random.default_rng(seed)
    n_samples = int(round(duration_s * sample_rate))
    s = _speech(rng, n_samples, sample_rate)
    kind = noise_kind or NOISE_KINDS[rng.integers(len(NOISE_KINDS))]
    noise = _noise(rng, kind, n_samples, sample_rate)
    snr = float(snrs[rng.integers(len(snrs))]) if snr_db is None else float(snr_db)
    y, n_scaled = mix_at_snr(s, noise, snr)
    return Mixture(s, n_scaled, y, snr, kind, int(seed))


def synth_dataset(seed, count, duration_s=2.0, snrs=TRAIN_SNRS, sample_rate=SAMPLE_RATE):
    """``count`` deterministic (s, n, y) mixtures, one spawned seed per item."""
    if count < 1:
        raise ValueError("count must be >= 1")
    base = np.random.SeedSequence(seed)
    seeds = [int(c.generate_state(1)[0]) for c in base.spawn(count)]
    return [synth_mixture(sd, duration_s, sample_rate=sample_rate, snrs=snrs) for sd in seeds]


# ---------------------------------------------------------------------------
# WAV I/O

def wav_write(path, audio):
    if not isinstance(audio, AudioBuffer):
        audio = AudioBuffer(audio)
    x = np.clip(audio.samples, -1.0, 1.0 - 1.0 / 32768.0) * 32768.0
    pcm = (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(audio.sample_rate))
        fh.writeframes(pcm.tobytes())


def wav_read(path):
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width = fh.getnchannels(), fh.getsampwidth()
            rate, comp = fh.getframerate(), fh.getcomptype()
            n = fh.getnframes()
            raw = fh.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    if comp != "NONE":
        raise ValueError(f"{path}: compressed WAV ({comp}) not supported")
    if width != 2:
        raise ValueError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if channels != 1:
        raise ValueError(f"{path}: expected mono, got {channels} channels")
    if len(raw) != 2 * n:
        raise ValueError(f"{path}: truncated data chunk ({len(raw)} of {2 * n} bytes)")
    return AudioBuffer(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate)


# ---------------------------------------------------------------------------
# manifests

MANIFEST_FIELDS = ("path_s", "path_n", "path_y", "snr_db", "seed")


def write_dataset(out_dir, mixtures, sample_rate=SAMPLE_RATE):
    """Write s/n/y WAVs and ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, mix in enumerate(mixtures):
        names = {}
        for key, arr in (("s", mix.s), ("n", mix.n), ("y", mix.y)):
            p = out_dir / f"{i:05d}_{key}.wav"
            wav_write(p, AudioBuffer(arr, sample_rate))
            names[key] = p.name
        rows.append(dict(path_s=names["s"], path_n=names["n"], path_y=names["y"],
                         snr_db=f"{mix.snr_db:g}", seed=mix.seed))
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return manifest


def read_manifest(path):
    """Rows with paths resolved relative to the manifest's directory."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        rows = list(reader)
    for row in rows:
        for key in ("path_s", "path_n", "path_y"):
            p = Path(row[key])
            row[key] = p if p.is_absolute() else path.parent / p
    return rows
