"""DCN building blocks: convolution units, sub-pixel upsampling, layer norm,
dense blocks and the self-attention module.

Parameter records are plain dataclasses of :class:`Tensor` leaves; the forward
functions are pure and take the record explicitly.
"""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Tensor

PRELU_INIT = 0.25
DENSE_DEPTH = 5


def _uniform_kernel(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class Conv2dParams:
    kernel: Tensor
    bias: Tensor
    stride: tuple = (1, 1)
    padding: str = "same"
    dilation: int = 1

    @classmethod
    def init(cls, rng, c_in, c_out, m=1, n=1, **kw):
        return cls(_uniform_kernel(rng, (c_out, c_in, m, n)),
                   Tensor(np.zeros(c_out), requires_grad=True), **kw)

    def named(self, prefix):
        return [(f"{prefix}.kernel", self.kernel), (f"{prefix}.bias", self.bias)]


def conv2d(x, p):
    return tn.conv2d(x, p.kernel, p.bias, stride=p.stride, padding=p.padding,
                     dilation=p.dilation)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, size, eps=1e-5):
        return cls(Tensor(np.ones(size), requires_grad=True),
                   Tensor(np.zeros(size), requires_grad=True), eps)

    def named(self, prefix):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]


def layer_norm(x, p):
    return tn.layer_norm(x, p.gamma, p.beta, p.eps)


@dataclass
class ConvUnit:
    """conv -> layer norm -> PReLU, the pattern used by every inner convolution."""
    conv: Conv2dParams
    norm: LayerNormParams
    slope: Tensor

    @classmethod
    def init(cls, rng, c_in, c_out, feat_len, m=1, n=1, eps=1e-5, **kw):
        return cls(Conv2dParams.init(rng, c_in, c_out, m, n, **kw),
                   LayerNormParams.init(feat_len, eps),
                   Tensor(np.full(c_out, PRELU_INIT), requires_grad=True))

    def named(self, prefix):
        return (self.conv.named(f"{prefix}.conv") + self.norm.named(f"{prefix}.norm")
                + [(f"{prefix}.prelu", self.slope)])


def conv_unit(x, p):
    return tn.prelu(layer_norm(conv2d(x, p.conv), p.norm), p.slope)


def time_padding(causal):
    return "causal_time" if causal else "same"


# ---------------------------------------------------------------------------
# sub-pixel convolution

@dataclass
class SubPixelParams:
    """r*s kernels stored stacked along the output axis.

    Output channels ``[(i*s + j)*C_out, (i*s + j + 1)*C_out)`` of the stacked
    kernel hold ``K_{i,j}``.
    """
    conv: Conv2dParams
    rate: tuple

    @classmethod
    def init(cls, rng, c_in, c_out, rate, m=1, n=1, causal=False):
        r, s = rate
        return cls(Conv2dParams.init(rng, c_in, r * s * c_out, m, n,
                                     padding=time_padding(causal)), tuple(rate))

    @property
    def out_channels(self):
        r, s = self.rate
        return self.conv.kernel.shape[0] // (r * s)

    def kernel(self, i, j):
        c = self.out_channels
        k = i * self.rate[1] + j
        return self.conv.kernel.data[k * c:(k + 1) * c]

    def named(self, prefix):
        return self.conv.named(f"{prefix}.conv")


def interleave(stacked, rate):
    """[r*s*C, T, L] -> [C, r*T, s*L] with S(i,j) = S_{i%r, j%s}(i//r, j//s)."""
    r, s = rate
    rs_c, t, l = stacked.shape
    c = rs_c // (r * s)
    x = tn.reshape(stacked, (r, s, c, t, l))
    x = tn.permute(x, (2, 3, 0, 4, 1))
    return tn.reshape(x, (c, t * r, l * s))


def subpixel_conv(x, p):
    if p.conv.padding == "valid":
        raise ValueError("sub-pixel convolution needs SAME or causal padding")
    return interleave(conv2d(x, p.conv), p.rate)


@dataclass
class UpsampleUnit:
    sub: SubPixelParams
    norm: LayerNormParams
    slope: Tensor

    def named(self, prefix):
        return (self.sub.named(f"{prefix}.sub") + self.norm.named(f"{prefix}.norm")
                + [(f"{prefix}.prelu", self.slope)])


def upsample_unit(x, p):
    return tn.prelu(layer_norm(subpixel_conv(x, p.sub), p.norm), p.slope)


# ---------------------------------------------------------------------------
# dense block

@dataclass
class DenseBlockParams:
    layers: list = field(default_factory=list)  # ConvUnit per layer
    growth: int = 0

    @classmethod
    def init(cls, rng, channels, feat_len, m, causal, dilation=False,
             depth=DENSE_DEPTH, eps=1e-5):
        layers = []
        for ell in range(depth):
            layers.append(ConvUnit.init(
                rng, (ell + 1) * channels, channels, feat_len, m, 3, eps=eps,
                padding=time_padding(causal), dilation=2 ** ell if dilation else 1))
        return cls(layers, channels)

    @property
    def input_channels(self):
        return [u.conv.kernel.shape[1] for u in self.layers]

    def named(self, prefix):
        out = []
        for i, u in enumerate(self.layers):
            out += u.named(f"{prefix}.{i}")
        return out


def dense_block(x, p, record=None):
    """Each layer sees the concatenation of the block input and all earlier
    layer outputs; the block returns the last layer's C channels."""
    if x.shape[0] != p.growth:
        raise ValueError(f"dense block expects {p.growth} channels, got {x.shape[0]}")
    feats = [x]
    out = x
    for unit in p.layers:
        inp = tn.concat_channels(feats)
        if record is not None:
            record.append(inp.shape[0])
        out = conv_unit(inp, unit)
        feats.append(out)
    return out


def dense_block_param_count(channels, m, feat_len, depth=DENSE_DEPTH):
    """Closed form: convs + biases + layer-norm gamma/beta + PReLU slopes."""
    c = channels
    conv = sum((ell * c) * c * m * 3 + c for ell in range(1, depth + 1))
    return conv + depth * 2 * feat_len + depth * c


# ---------------------------------------------------------------------------
# self-attention

@dataclass
class AttentionParams:
    query: ConvUnit
    key: ConvUnit
    value: ConvUnit
    causal: bool = False

    @classmethod
    def init(cls, rng, c_in, qk_channels, v_channels, feat_len, causal, eps=1e-5):
        return cls(ConvUnit.init(rng, c_in, qk_channels, feat_len, eps=eps),
                   ConvUnit.init(rng, c_in, qk_channels, feat_len, eps=eps),
                   ConvUnit.init(rng, c_in, v_channels, feat_len, eps=eps),
                   causal)

    def named(self, prefix):
        return (self.query.named(f"{prefix}.q") + self.key.named(f"{prefix}.k")
                + self.value.named(f"{prefix}.v"))


def _rows(x):
    """[C, T, L] -> [T, C*L]."""
    c, t, l = x.shape
    return tn.reshape(tn.permute(x, (1, 0, 2)), (t, c * l))


def self_attention(x, p, maps=None):
    """Frame-level attention over [C, T, L]; returns [F, T, L].

    When ``maps`` is a list the row-stochastic weight matrix is appended to it.
    """
    c, t, l = x.shape
    if t == 0:
        raise ValueError("self_attention: no frames")
    q = _rows(conv_unit(x, p.query))
    k = _rows(conv_unit(x, p.key))
    v_maps = conv_unit(x, p.value)
    f = v_maps.shape[0]
    scores = tn.matmul(q, k.T)
    if p.causal:
        scores = tn.causal_mask(scores)
    weights = tn.softmax_rows(scores)
    if maps is not None:
        maps.append(weights.data)
    att = tn.matmul(weights, _rows(v_maps))
    return tn.permute(tn.reshape(att, (t, f, l)), (1, 0, 2))
