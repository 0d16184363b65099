"""Adam, the training loop with a piecewise learning-rate schedule, the
evaluation harness and the ablation grid."""
import csv
import itertools
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as dm
from . import tensor as tn
from .checkpoint import load_model, save_model
from .losses import LossConfig, compute_loss
from .model import DcnConfig, build_dcn, enhance_frames, enhance_utterance
from .signal import StftConfig

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = ((1, 3, 2e-4), (4, 9, 1e-4), (10, 12, 5e-5), (13, 15, 1e-5))


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, state):
    """One bias-corrected Adam update from the ``.grad`` of each parameter.

    Raises :class:`TrainingDiverged` before touching anything if a gradient
    is not finite. Parameters without a gradient are treated as zero-grad.
    """
    named_params = list(named_params)
    grads = {}
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name} at step {state.step + 1}")
        grads[name] = g
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in named_params:
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# configuration

def parse_schedule(text):
    """``"1-3:2e-4,4-9:1e-4"`` -> ((1, 3, 2e-4), (4, 9, 1e-4))."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        span, _, lr = part.partition(":")
        first, _, last = span.partition("-")
        out.append((int(first), int(last or first), float(lr)))
    return tuple(out)


def format_schedule(schedule):
    return ",".join(f"{a}-{b}:{lr:g}" for a, b, lr in schedule)


@dataclass
class TrainConfig:
    model: DcnConfig = field(default_factory=DcnConfig.tiny)
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 4
    epochs: int = 15
    lr_schedule: tuple = DEFAULT_SCHEDULE
    seed: int = 0
    train_count: int = 200
    val_count: int = 40
    duration_s: float = 2.0
    crop_samples: int = 0  # 0 trains on whole utterances
    max_steps: int = 0  # 0 means no cap
    log_val_count: int = 4
    checkpoint_dir: str = "runs/dcn"
    train_manifest: str = ""
    val_manifest: str = ""

    def validate(self):
        self.model.validate()
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        covered = set()
        for first, last, lr in self.lr_schedule:
            if lr <= 0 or first > last:
                raise ValueError(f"bad schedule entry {first}-{last}:{lr}")
            covered.update(range(first, last + 1))
        missing = set(range(1, self.epochs + 1)) - covered
        if missing:
            raise ValueError(f"learning-rate schedule misses epochs {sorted(missing)}")
        return self

    def lr_at(self, epoch):
        for first, last, lr in self.lr_schedule:
            if first <= epoch <= last:
                return lr
        raise ValueError(f"no learning rate scheduled for epoch {epoch}")


_TRAIN_KEYS = {"batch_size": int, "epochs": int, "seed": int, "train_count": int,
               "val_count": int, "duration_s": float, "crop_samples": int,
               "max_steps": int, "log_val_count": int, "checkpoint_dir": str,
               "train_manifest": str, "val_manifest": str}


def config_from_mapping(raw):
    """Build a TrainConfig from flat ``model.*`` / ``loss.*`` / ``train.*`` keys."""
    model_kw, loss_kw, train_kw = {}, {}, {}
    for key, val in raw.items():
        section, _, name = key.partition(".")
        if section == "model":
            model_kw[name] = val
        elif section == "loss":
            loss_kw[name] = val
        elif section == "train":
            if name == "lr_schedule":
                train_kw[name] = parse_schedule(val)
            elif name in _TRAIN_KEYS:
                train_kw[name] = _TRAIN_KEYS[name](val)
            else:
                raise ValueError(f"unknown config key {key!r}")
        else:
            raise ValueError(f"unknown config key {key!r}")
    model = DcnConfig.from_dict({**DcnConfig.tiny().to_dict(), **model_kw})
    stft = StftConfig(int(loss_kw.pop("stft_frame_len", 512)),
                      int(loss_kw.pop("stft_hop", 256)),
                      loss_kw.pop("stft_window", "hann"))
    unknown = set(loss_kw) - {"kind", "alpha"}
    if unknown:
        raise ValueError(f"unknown loss keys {sorted(unknown)}")
    loss = LossConfig(loss_kw.get("kind", "T"), loss_kw.get("alpha"), stft)
    cfg = TrainConfig(model=model, loss=loss, **train_kw)
    env_seed = os.environ.get("DCN_SEED")
    if env_seed:
        cfg.seed = int(env_seed)
    return cfg.validate()


def read_config(path):
    """Parse a ``key=value`` config file (``#`` starts a comment)."""
    raw = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, _, val = line.partition("=")
        raw[key.strip()] = val.strip()
    return config_from_mapping(raw)


def config_to_mapping(cfg):
    out = {f"model.{k}": v for k, v in cfg.model.to_dict().items()}
    out.update({"loss.kind": cfg.loss.kind,
                "loss.stft_frame_len": cfg.loss.stft.frame_len,
                "loss.stft_hop": cfg.loss.stft.hop, "loss.stft_window": cfg.loss.stft.window,
                "train.lr_schedule": format_schedule(cfg.lr_schedule)})
    if cfg.loss.alpha is not None:
        out["loss.alpha"] = cfg.loss.alpha
    out.update({f"train.{k}": getattr(cfg, k) for k in _TRAIN_KEYS})
    return out


# ---------------------------------------------------------------------------
# data

def _load_manifest(path):
    out = []
    for row in dm.read_manifest(path):
        s = dm.wav_read(row["path_s"]).samples
        y = dm.wav_read(row["path_y"]).samples
        out.append(dm.Mixture(s, y - s, y, float(row["snr_db"]), "file", int(row["seed"])))
    return out


def load_corpus(cfg):
    """(train, validation) mixtures from manifests or the synthetic generator."""
    if cfg.train_manifest:
        train = _load_manifest(cfg.train_manifest)
    else:
        train = dm.synth_dataset(cfg.seed, cfg.train_count, cfg.duration_s)
    if cfg.val_manifest:
        val = _load_manifest(cfg.val_manifest)
    elif cfg.val_count:
        val = dm.synth_dataset(cfg.seed + 1_000_003, cfg.val_count, cfg.duration_s)
    else:
        val = []
    if not train:
        raise ValueError("training set is empty")
    return train, val


def _crop(mix, n, rng):
    if not n or n >= mix.s.size:
        return mix.s, mix.y
    start = int(rng.integers(0, mix.s.size - n + 1))
    return mix.s[start:start + n], mix.y[start:start + n]


def mean_improvement(model, mixtures):
    """Mean (SNR_out, SI-SDR_out, SNR_in, SI-SDR_in) over mixtures."""
    rows = []
    for mix in mixtures:
        est = enhance_utterance(model, mix.y)
        rows.append((dm.snr_metric(mix.s, est), dm.si_sdr(mix.s, est),
                     dm.snr_metric(mix.s, mix.y), dm.si_sdr(mix.s, mix.y)))
    return tuple(float(np.mean(col)) for col in zip(*rows)) if rows else (math.nan,) * 4


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: object
    checkpoint: Path
    epochs: list  # per-epoch dict rows
    steps: list  # per-step (step, epoch, loss)


def _state_blobs(state):
    out = {}
    for name in state.m:
        out[f"adam.m/{name}"] = state.m[name]
        out[f"adam.v/{name}"] = state.v[name]
    return out


def save_training_checkpoint(path, model, state, cfg, epoch):
    meta = {"epoch": epoch, "adam_step": state.step, "lr": repr(state.lr),
            "beta1": repr(state.beta1), "beta2": repr(state.beta2), "eps": repr(state.eps)}
    meta.update({f"train.{k}": v for k, v in config_to_mapping(cfg).items()
                 if not k.startswith("model.")})
    return save_model(path, model, meta=meta, extra=_state_blobs(state))


def load_training_checkpoint(path):
    """Returns ``(model, AdamState, epoch)``."""
    model, meta, extra = load_model(path)
    state = AdamState(lr=float(meta.get("lr", 1e-3)), beta1=float(meta.get("beta1", 0.9)),
                      beta2=float(meta.get("beta2", 0.999)), eps=float(meta.get("eps", 1e-8)),
                      step=int(meta.get("adam_step", 0)))
    for key, arr in extra.items():
        kind, _, name = key.partition("/")
        if kind == "adam.m":
            state.m[name] = arr
        elif kind == "adam.v":
            state.v[name] = arr
    return model, state, int(meta.get("epoch", 0))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])


EPOCH_FIELDS = ("epoch", "step", "lr", "train_loss", "val_snr", "val_si_sdr", "seconds")
STEP_FIELDS = ("step", "epoch", "loss")


def _prior_rows(path, done):
    """Rows of an earlier run's CSV log up to and including epoch ``done``."""
    if not done or not Path(path).exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.reader(fh))[1:]


def _rows_through(rows, epoch_col, done):
    return [r for r in rows if r and int(float(r[epoch_col])) <= done]


def train(cfg, resume=None, corpus=None, progress=None):
    """Train per ``cfg``; checkpoints and CSV logs go to ``cfg.checkpoint_dir``.

    ``resume`` is a training checkpoint to continue from; ``corpus`` an
    optional preloaded ``(train, val)`` pair; ``progress`` an optional
    callable receiving each epoch row.
    """
    cfg.validate()
    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set, val_set = corpus if corpus is not None else load_corpus(cfg)
    log_val = val_set[:cfg.log_val_count]
    if resume:
        model, state, done = load_training_checkpoint(resume)
    else:
        model, state, done = build_dcn(cfg.model, seed=cfg.seed), AdamState(), 0
    named = model.named_parameters()
    epochs, steps = [], []
    last_ckpt = Path(resume) if resume else None
    cap = cfg.max_steps or None
    for epoch in range(done + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        state.lr = cfg.lr_at(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train_set))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            if cap and state.step >= cap:
                break
            batch = order[start:start + cfg.batch_size]
            model.zero_grad()
            total = 0.0
            for idx in batch:
                s, y = _crop(train_set[idx], cfg.crop_samples, rng)
                loss = compute_loss(cfg.loss, s, enhance_frames(model, y), y)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"loss became {value} at step {state.step + 1}; last good "
                        f"checkpoint: {last_ckpt}")
                tn.backward(loss)
                total += value
            for _, p in named:
                if p.grad is not None:
                    p.grad /= len(batch)
            adam_step(named, state)
            epoch_losses.append(total / len(batch))
            steps.append((state.step, epoch, total / len(batch)))
        val_snr, val_sisdr = (mean_improvement(model, log_val)[:2] if log_val
                              else (math.nan, math.nan))
        row = dict(epoch=epoch, step=state.step, lr=state.lr,
                   train_loss=float(np.mean(epoch_losses)) if epoch_losses else math.nan,
                   val_snr=val_snr, val_si_sdr=val_sisdr,
                   seconds=time.perf_counter() - t0)
        epochs.append(row)
        last_ckpt = save_training_checkpoint(out_dir / f"epoch{epoch:03d}.dcn", model,
                                             state, cfg, epoch)
        save_training_checkpoint(out_dir / "last.dcn", model, state, cfg, epoch)
        log.info("epoch %d step %d lr %g loss %.6g val SNR %.2f SI-SDR %.2f", epoch,
                 state.step, state.lr, row["train_loss"], val_snr, val_sisdr)
        if progress:
            progress(row)
        if cap and state.step >= cap:
            break
    # a resumed run keeps the log rows of the epochs it continues from
    old_epochs = _rows_through(_prior_rows(out_dir / "epochs.csv", done), 0, done)
    old_steps = _rows_through(_prior_rows(out_dir / "steps.csv", done), 1, done)
    _write_csv(out_dir / "epochs.csv", EPOCH_FIELDS,
               old_epochs + [[r[k] for k in EPOCH_FIELDS] for r in epochs])
    _write_csv(out_dir / "steps.csv", STEP_FIELDS, old_steps + steps)
    return TrainResult(model, out_dir / "last.dcn", epochs, steps)


# ---------------------------------------------------------------------------
# evaluation

SUMMARY_FIELDS = ("snr_db", "count", "errors", "snr_in", "snr_out", "si_sdr_in", "si_sdr_out")


def evaluate(enhance, rows):
    """Score ``enhance(y) -> s_hat`` on manifest rows.

    Returns ``(per_row, summary)``; a row that fails to load or score keeps
    its error message and is excluded from the averages.
    """
    per_row = []
    for row in rows:
        rec = dict(path_y=str(row["path_y"]), snr_db=float(row["snr_db"]), error="")
        try:
            s = dm.wav_read(row["path_s"]).samples
            y = dm.wav_read(row["path_y"]).samples
            if s.shape != y.shape:
                raise ValueError(f"speech/mixture lengths differ ({s.size} vs {y.size})")
            est = np.asarray(enhance(y), dtype=np.float64)
            rec.update(snr_in=dm.snr_metric(s, y), si_sdr_in=dm.si_sdr(s, y),
                       snr_out=dm.snr_metric(s, est), si_sdr_out=dm.si_sdr(s, est))
        except (OSError, ValueError) as exc:
            rec["error"] = str(exc)
            log.warning("evaluation row %s failed: %s", row["path_y"], exc)
        per_row.append(rec)
    summary = []
    for cond in sorted({r["snr_db"] for r in per_row}):
        group = [r for r in per_row if r["snr_db"] == cond]
        ok = [r for r in group if not r["error"]]
        avg = {k: (float(np.mean([r[k] for r in ok])) if ok else math.nan)
               for k in ("snr_in", "snr_out", "si_sdr_in", "si_sdr_out")}
        summary.append(dict(snr_db=cond, count=len(ok), errors=len(group) - len(ok), **avg))
    return per_row, summary


def write_summary(path, summary):
    _write_csv(path, SUMMARY_FIELDS, [[r[k] for k in SUMMARY_FIELDS] for r in summary])


def evaluate_checkpoint(ckpt, manifest, out_csv=None):
    model, _, _ = load_model(ckpt)
    per_row, summary = evaluate(lambda y: enhance_utterance(model, y),
                                dm.read_manifest(manifest))
    if out_csv:
        write_summary(out_csv, summary)
    return per_row, summary


# ---------------------------------------------------------------------------
# ablation grid

ABLATION_AXES = {"m": (1, 2, 3), "dilation": (False, True), "attention": (False, True)}
ABLATION_FIELDS = ("causal", "m", "dilation", "attention", "params", "steps", "final_loss",
                   "finite", "si_sdr_in", "si_sdr_out", "seconds")


def ablation_grid(axes=("m", "dilation", "attention")):
    names = list(axes)
    for name in names:
        if name not in ABLATION_AXES:
            raise ValueError(f"unknown ablation axis {name!r}")
    fixed = {"m": 2, "dilation": False, "attention": True}
    for combo in itertools.product(*(ABLATION_AXES[n] for n in names)):
        point = dict(fixed)
        point.update(zip(names, combo))
        yield point


def run_ablation(axes=("m", "dilation", "attention"), causal=True, steps=100, seed=0,
                 base=None, train_count=8, val_count=2, duration_s=0.5, crop_samples=2048,
                 out_csv=None, progress=None):
    """Train every grid point briefly on a small synthetic set (loss L_T)."""
    base = base or DcnConfig.tiny()
    train_set = dm.synth_dataset(seed, train_count, duration_s)
    val_set = dm.synth_dataset(seed + 1_000_003, val_count, duration_s)
    rows = []
    for point in ablation_grid(axes):
        t0 = time.perf_counter()
        mcfg = replace(base, causal=causal, dense_kernel_time=point["m"],
                       use_dilation=point["dilation"], use_attention=point["attention"])
        model = build_dcn(mcfg, seed=seed)
        named = model.named_parameters()
        state = AdamState(lr=1e-3)
        rng = np.random.default_rng(seed)
        loss_cfg = LossConfig("T")
        value = math.nan
        finite = True
        for _ in range(steps):
            mix = train_set[int(rng.integers(len(train_set)))]
            s, y = _crop(mix, crop_samples, rng)
            model.zero_grad()
            loss = compute_loss(loss_cfg, s, enhance_frames(model, y), y)
            value = loss.item()
            if not math.isfinite(value):
                finite = False
                break
            tn.backward(loss)
            try:
                adam_step(named, state)
            except TrainingDiverged:
                finite = False
                break
        _, sisdr_out, _, sisdr_in = mean_improvement(model, val_set)
        row = dict(causal=causal, m=point["m"], dilation=point["dilation"],
                   attention=point["attention"], params=model.num_parameters(),
                   steps=state.step, final_loss=value, finite=finite,
                   si_sdr_in=sisdr_in, si_sdr_out=sisdr_out,
                   seconds=time.perf_counter() - t0)
        rows.append(row)
        if progress:
            progress(row)
    if out_csv:
        _write_csv(out_csv, ABLATION_FIELDS, [[r[k] for k in ABLATION_FIELDS] for r in rows])
    return rows
