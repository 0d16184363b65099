"""The dense convolutional network (DCN): encoder/decoder assembly,
utterance enhancement and attention-map extraction."""
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import layers as nl
from . import signal as sig
from . import tensor as tn
from .tensor import Tensor


@dataclass
class DcnConfig:
    frame_len: int = 512
    frame_shift: int = 256
    channels: int = 64
    attn_qk_channels: int = 5
    attn_v_channels: int = 32
    dense_kernel_time: int = 2
    causal: bool = True
    use_attention: bool = True
    use_dilation: bool = False
    encoder_depth: int = 6
    downsample_rate: int = 2
    ln_eps: float = 1e-5

    @classmethod
    def tiny(cls, **overrides):
        """Desk-scale configuration used by the tests and toy training runs."""
        base = dict(frame_len=64, frame_shift=32, channels=8, attn_qk_channels=2,
                    attn_v_channels=4, dense_kernel_time=2, encoder_depth=2)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if not 1 <= self.frame_shift <= self.frame_len:
            raise ValueError(f"frame_shift {self.frame_shift} must be in [1, {self.frame_len}]")
        if min(self.channels, self.attn_qk_channels, self.attn_v_channels,
               self.dense_kernel_time, self.downsample_rate) < 1:
            raise ValueError("channel counts, kernel size and rate must be positive")
        if self.encoder_depth < 0:
            raise ValueError("encoder_depth must be >= 0")
        div = self.downsample_rate ** self.encoder_depth
        if self.frame_len % div:
            raise ValueError(f"frame_len {self.frame_len} is not divisible by "
                             f"{self.downsample_rate}^{self.encoder_depth} = {div}")
        return self

    def feat_len(self, level):
        return self.frame_len // self.downsample_rate ** level

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        out = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            val = raw[f.name]
            if f.type in (bool, "bool") and isinstance(val, str):
                val = val.strip().lower() in ("1", "true", "yes", "on")
            elif f.type in (int, "int"):
                val = int(val)
            elif f.type in (float, "float"):
                val = float(val)
            out[f.name] = val
        return cls(**out)


@dataclass
class ReceptiveField:
    lookback_frames: object  # int, or None for the whole past
    lookahead_frames: object  # int, or None for the whole future


def receptive_field(cfg):
    """Frame context of one output frame. Attention makes the context
    unbounded (``None``) on every side it is allowed to look at."""
    m = cfg.dense_kernel_time
    dil = [2 ** i if cfg.use_dilation else 1 for i in range(nl.DENSE_DEPTH)]
    # time kernels along one path: dense blocks at every level, plus the
    # down/up-sampling convolutions
    n_blocks = 1 + 2 * cfg.encoder_depth
    spans = [(m - 1) * d for d in dil] * n_blocks + [m - 1] * (2 * cfg.encoder_depth)
    if cfg.causal:
        back, ahead = sum(spans), 0
    else:
        back = sum(-(-s // 2) for s in spans)
        ahead = sum(s - (-(-s // 2)) for s in spans)
    if cfg.use_attention and cfg.encoder_depth > 0:
        return ReceptiveField(None, 0 if cfg.causal else None)
    return ReceptiveField(back, ahead)


@dataclass
class EncoderLayer:
    down: nl.ConvUnit
    attn: object  # AttentionParams or None
    proj: object  # ConvUnit or None
    block: nl.DenseBlockParams


@dataclass
class DecoderLayer:
    up: nl.UpsampleUnit
    attn: object
    proj: object
    block: nl.DenseBlockParams


class DcnModel:
    def __init__(self, cfg, in_conv, in_block, encoder, decoder, out_conv, audit):
        self.cfg = cfg
        self.in_conv = in_conv
        self.in_block = in_block
        self.encoder = encoder
        self.decoder = decoder
        self.out_conv = out_conv
        self.audit = audit

    def named_parameters(self):
        out = self.in_conv.named("in_conv") + self.in_block.named("in_block")
        for i, layer in enumerate(self.encoder):
            p = f"enc{i + 1}"
            out += layer.down.named(f"{p}.down")
            if layer.attn is not None:
                out += layer.attn.named(f"{p}.attn") + layer.proj.named(f"{p}.proj")
            out += layer.block.named(f"{p}.block")
        for i, layer in enumerate(self.decoder):
            p = f"dec{i + 1}"
            out += layer.up.named(f"{p}.up")
            if layer.attn is not None:
                out += layer.attn.named(f"{p}.attn") + layer.proj.named(f"{p}.proj")
            out += layer.block.named(f"{p}.block")
        return out + self.out_conv.named("out_conv")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def num_parameters(self):
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def attention_modules(self):
        mods = [l.attn for l in self.encoder] + [l.attn for l in self.decoder]
        return [a for a in mods if a is not None]


def build_dcn(cfg, seed=0):
    """Instantiate all parameters deterministically from ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    c, m, eps = cfg.channels, cfg.dense_kernel_time, cfg.ln_eps
    pad = nl.time_padding(cfg.causal)
    rate = cfg.downsample_rate

    def block(level):
        return nl.DenseBlockParams.init(rng, c, cfg.feat_len(level), m, cfg.causal,
                                        dilation=cfg.use_dilation, eps=eps)

    def attention(level):
        if not cfg.use_attention:
            return None, None
        feat = cfg.feat_len(level)
        attn = nl.AttentionParams.init(rng, c, cfg.attn_qk_channels, cfg.attn_v_channels,
                                       feat, cfg.causal, eps=eps)
        proj = nl.ConvUnit.init(rng, c + cfg.attn_v_channels, c, feat, eps=eps)
        return attn, proj

    audit = [dict(layer="in", channels=c, frame_len=cfg.feat_len(0))]
    in_conv = nl.Conv2dParams.init(rng, 1, c)
    in_block = block(0)
    encoder = []
    for level in range(1, cfg.encoder_depth + 1):
        down = nl.ConvUnit.init(rng, c, c, cfg.feat_len(level), m, 3, eps=eps,
                                stride=(1, rate), padding=pad)
        attn, proj = attention(level)
        encoder.append(EncoderLayer(down, attn, proj, block(level)))
        audit.append(dict(layer=f"enc{level}", channels=c, frame_len=cfg.feat_len(level)))
    decoder = []
    for i, level in enumerate(range(cfg.encoder_depth, 0, -1)):
        c_in = c if i == 0 else 2 * c
        sub = nl.SubPixelParams.init(rng, c_in, c, (1, rate), m, 3, causal=cfg.causal)
        up = nl.UpsampleUnit(sub, nl.LayerNormParams.init(cfg.feat_len(level - 1), eps),
                             Tensor(np.full(c, nl.PRELU_INIT), requires_grad=True))
        attn, proj = attention(level - 1)
        decoder.append(DecoderLayer(up, attn, proj, block(level - 1)))
        audit.append(dict(layer=f"dec{i + 1}", channels=c, frame_len=cfg.feat_len(level - 1)))
    out_conv = nl.Conv2dParams.init(rng, 2 * c if cfg.encoder_depth else c, 1)
    audit.append(dict(layer="out", channels=1, frame_len=cfg.feat_len(0)))
    return DcnModel(cfg, in_conv, in_block, encoder, decoder, out_conv, audit)


def _attend(h, attn, proj, maps):
    if attn is None:
        return h
    a = nl.self_attention(h, attn, maps)
    return nl.conv_unit(tn.concat_channels([a, h]), proj)


def _check_junction(name, a, b):
    if a.shape != b.shape:
        raise ValueError(f"skip connection at {name}: shapes {a.shape} and {b.shape} differ")


def forward(model, frames, audit=None, maps=None):
    """Enhance a [T, L] frame matrix (or FrameMatrix); returns [T, L].

    ``audit`` (list) receives ``(layer, shape)`` records; ``maps`` (list)
    receives each attention module's weight matrix in evaluation order.
    """
    cfg = model.cfg
    x = frames.frames if isinstance(frames, sig.FrameMatrix) else tn.as_tensor(frames)
    if x.ndim != 2 or x.shape[1] != cfg.frame_len:
        raise ValueError(f"expected [T, {cfg.frame_len}] frames, got {x.shape}")
    t = x.shape[0]

    def note(name, h):
        if audit is not None:
            audit.append((name, h.shape))

    h = nl.dense_block(nl.conv2d(tn.reshape(x, (1, t, cfg.frame_len)), model.in_conv),
                       model.in_block)
    note("in", h)
    skips = [h]
    for i, layer in enumerate(model.encoder):
        h = nl.conv_unit(h, layer.down)
        h = _attend(h, layer.attn, layer.proj, maps)
        h = nl.dense_block(h, layer.block)
        note(f"enc{i + 1}", h)
        skips.append(h)
    depth = len(model.encoder)
    for i, layer in enumerate(model.decoder):
        if i > 0:
            skip = skips[depth - i]
            _check_junction(f"decoder layer {i + 1}", h, skip)
            h = tn.concat_channels([h, skip])
        h = nl.upsample_unit(h, layer.up)
        h = _attend(h, layer.attn, layer.proj, maps)
        h = nl.dense_block(h, layer.block)
        note(f"dec{i + 1}", h)
    if depth:
        _check_junction("output layer", h, skips[0])
        h = tn.concat_channels([h, skips[0]])
    out = nl.conv2d(h, model.out_conv)
    note("out", out)
    return tn.reshape(out, (t, cfg.frame_len))


def enhance_frames(model, y):
    """Differentiable waveform -> waveform path used for training."""
    cfg = model.cfg
    fm = sig.frame_signal(y, cfg.frame_len, cfg.frame_shift)
    out = forward(model, fm)
    return sig.overlap_add(sig.FrameMatrix(out, fm.original_len, cfg.frame_len,
                                           cfg.frame_shift))


def enhance_utterance(model, y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("enhance_utterance: need a non-empty mono waveform")
    with tn.no_grad():
        return enhance_frames(model, y).data.copy()


def attention_maps(model, y):
    """Row-stochastic [T', T'] weights of every attention module (encoder
    first, then decoder). Row i is the output frame, column j the attended
    frame."""
    if not model.cfg.use_attention or not model.attention_modules():
        raise ValueError("model has no attention modules")
    cfg = model.cfg
    maps = []
    with tn.no_grad():
        fm = sig.frame_signal(np.asarray(y, dtype=np.float64), cfg.frame_len, cfg.frame_shift)
        forward(model, fm, maps=maps)
    return maps
