"""ResNet-34-style encoder, bilinear summation decoder, and the assembled model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    HcaConfig,
    PaaConfig,
    RappConfig,
    SkipCascade,
    SkipConfig,
    dilation_schedule,
)
from .errors import ConfigurationError, GeometryError
from .layers import (
    AttentionProjection,
    AxialAttention,
    BatchNorm2d,
    Conv2d,
    Module,
    bilinear_resize,
    he_normal,
    max_pool2x2,
)
from .tensor import Tensor, relu, sigmoid

RESNET34_BLOCKS = (3, 4, 6, 3)
RESNET_WIDTHS = (64, 128, 256, 512)


@dataclass
class EncoderSpec:
    in_channels: int = 1
    stem_channels: int = 64
    blocks_per_stage: tuple = RESNET34_BLOCKS
    width: float = 1.0

    def __post_init__(self):
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if len(self.blocks_per_stage) != 4 or min(self.blocks_per_stage) < 1:
            raise ConfigurationError(f"encoder needs 4 stages of >= 1 block, got {self.blocks_per_stage}")
        if self.width <= 0:
            raise ConfigurationError("width multiplier must be positive")

    @property
    def stage_channels(self) -> tuple[int, int, int, int]:
        base = self.stem_channels / RESNET_WIDTHS[0]
        return tuple(max(1, int(round(w * base * self.width))) for w in RESNET_WIDTHS)


@dataclass
class NetConfig:
    """Everything needed to build an :class:`MhitNet`."""

    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    image_size: int = 64
    heads: int = 4
    hca_reduction: int = 4
    paa_downsample: int = 1
    skips: tuple = ((True, True, True),) * 3

    def __post_init__(self):
        if self.image_size % 16:
            raise ConfigurationError(f"image size must be divisible by 16, got {self.image_size}")
        self.skips = tuple(tuple(bool(f) for f in s) for s in self.skips)
        if len(self.skips) != 3 or any(len(s) != 3 for s in self.skips):
            raise ConfigurationError("skips must be three (rapp, paa, hca) flag triples")

    def with_modules(self, rapp: bool, paa: bool, hca: bool) -> "NetConfig":
        """Same network with one module combination applied to every skip."""
        return NetConfig(self.encoder, self.image_size, self.heads, self.hca_reduction,
                         self.paa_downsample, ((rapp, paa, hca),) * 3)


class BasicBlock(Module):
    """Two 3x3 conv/BN pairs with an identity or 1x1 projection shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, rng=None):
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=stride, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.short_conv = Conv2d(in_ch, out_ch, 1, stride=stride, padding=0, bias=False, rng=rng)
            self.short_bn = BatchNorm2d(out_ch)
        else:
            self.short_conv = self.short_bn = None

    def shortcut(self, x: Tensor) -> Tensor:
        if self.short_conv is None:
            return x
        return self.short_bn(self.short_conv(x))

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn2(self.conv2(relu(self.bn1(self.conv1(x)))))
        return relu(y + self.shortcut(x))


class Encoder(Module):
    """Stem (3x3 conv, BN, ReLU, 2x2 max pool) and four residual stages.

    Outputs are at 1/2, 1/4, 1/8 and 1/16 of the input resolution.
    """

    def __init__(self, spec: EncoderSpec, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        chans = spec.stage_channels
        self.stem_conv = Conv2d(spec.in_channels, chans[0], 3, bias=False, rng=rng)
        self.stem_bn = BatchNorm2d(chans[0])
        self.stages = []
        in_ch = chans[0]
        for s, (out_ch, n_blocks) in enumerate(zip(chans, spec.blocks_per_stage)):
            stride = 1 if s == 0 else 2
            blocks = [BasicBlock(in_ch, out_ch, stride, rng)]
            blocks += [BasicBlock(out_ch, out_ch, 1, rng) for _ in range(n_blocks - 1)]
            self.stages.append(_Stage(blocks))
            in_ch = out_ch

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        H, W = x.shape[2:]
        if H % 16 or W % 16:
            raise GeometryError(f"encoder input must be divisible by 16, got {H}x{W}")
        h = max_pool2x2(relu(self.stem_bn(self.stem_conv(x))))
        outs = []
        for stage in self.stages:
            h = stage(h)
            outs.append(h)
        return tuple(outs)


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


def encoder_forward(x: Tensor, encoder: Encoder):
    return encoder(x)


class MhitNet(Module):
    """Encoder, three skip cascades, and a resize + 1x1 projection + sum decoder.

    Skip 1 sits on the highest-resolution stage (stage 1), skip 3 on stage 3;
    stage 4 is the bottleneck where decoding starts.
    """

    def __init__(self, cfg: NetConfig | None = None, seed: int = 0):
        cfg = cfg if cfg is not None else NetConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg.encoder, rng)
        c1, c2, c3, c4 = cfg.encoder.stage_channels
        chans = (c1, c2, c3, c4)
        self.skips = []
        for k, flags in enumerate(cfg.skips, start=1):
            size = cfg.image_size // 2 ** k
            others = tuple(c for i, c in enumerate(chans) if i != k - 1)
            skip_cfg = SkipConfig(
                *flags,
                rapp_cfg=RappConfig(dilation_schedule(k)),
                paa_cfg=PaaConfig(cfg.heads, size, cfg.paa_downsample),
                hca_cfg=HcaConfig(others, cfg.hca_reduction),
            )
            self.skips.append(SkipCascade(chans[k - 1], skip_cfg, rng))
        self.dec_proj3 = Conv2d(c4, c3, 1, rng=rng)
        self.dec_proj2 = Conv2d(c3, c2, 1, rng=rng)
        self.dec_proj1 = Conv2d(c2, c1, 1, rng=rng)
        self.head = Conv2d(c1, 1, 1, rng=rng)
        init_parameters(self, seed)

    def forward(self, x: Tensor, taps: dict | None = None) -> Tensor:
        H, W = x.shape[2:]
        stages = self.encoder(x)
        d = stages[3]
        for k, proj in ((3, self.dec_proj3), (2, self.dec_proj2), (1, self.dec_proj1)):
            skip_in = stages[k - 1]
            others = [s for i, s in enumerate(stages) if i != k - 1]
            skip_taps = {} if taps is not None else None
            skip_out = self.skips[k - 1](skip_in, others, skip_taps)
            if taps is not None:
                taps[f"skip{k}"] = skip_taps.get("paa", skip_out)
            d = proj(bilinear_resize(d, 2 * d.shape[2], 2 * d.shape[3])) + skip_out
        d = bilinear_resize(d, H, W)
        return sigmoid(self.head(d))


def model_forward(x: Tensor, net: MhitNet) -> Tensor:
    return net(x)


def init_parameters(net: Module, seed: int) -> Module:
    """Deterministic initialisation: He-normal convolutions, unit/zero batch
    norm, N(0, 0.02) relative-position tables, zero gate layers."""
    rng = np.random.default_rng(seed)
    for _, mod in net.modules():
        if isinstance(mod, Conv2d):
            k = mod.kernel_size
            if mod.zero_init:
                mod.weight.data[...] = 0
            else:
                fan_in = mod.in_channels * k * k
                mod.weight.data[...] = he_normal(rng, mod.weight.shape, fan_in, mod.weight.dtype)
            if mod.bias is not None:
                mod.bias.data[...] = 0
        elif isinstance(mod, BatchNorm2d):
            mod.gamma.data[...] = 1
            mod.beta.data[...] = 0
            mod.running_mean[...] = 0
            mod.running_var[...] = 1
        elif isinstance(mod, AttentionProjection):
            std = 1.0 / math.sqrt(mod.d_model)
            for w in (mod.w_q, mod.w_k, mod.w_v):
                w.data[...] = rng.standard_normal(w.shape) * std
        elif isinstance(mod, AxialAttention):
            for t in (mod.rel_q, mod.rel_k, mod.rel_v):
                t.data[...] = rng.standard_normal(t.shape) * 0.02
    return net
