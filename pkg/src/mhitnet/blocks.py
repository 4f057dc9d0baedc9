"""Skip-connection modules: residual atrous pyramid pooling (RAPP),
position-sensitive axial attention (PAA) and hierarchical context
attention (HCA), plus the cascade that chains them on one skip path."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .layers import (
    AxialAttention,
    BatchNorm2d,
    Conv2d,
    Module,
    adaptive_avg_pool_1x1,
    bilinear_resize,
)
from .tensor import Tensor, concat, mul, relu, sigmoid

# Rate sets per skip connection, top (highest resolution) to bottom.
DILATION_SCHEDULE = {
    1: (1, 6, 12, 18),
    2: (1, 3, 5, 7),
    3: (0, 1, 2, 4),
}


def dilation_schedule(skip_index: int) -> tuple[int, int, int, int]:
    """Atrous rates for the four dilated branches at ``skip_index`` (1, 2 or 3).

    A rate of 0 denotes a 1x1 convolution branch.
    """
    try:
        return DILATION_SCHEDULE[skip_index]
    except KeyError:
        raise ConfigurationError(f"skip index must be 1, 2 or 3, got {skip_index!r}") from None


@dataclass
class RappConfig:
    dilations: tuple = (1, 6, 12, 18)
    out_channels: int | None = None

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if len(self.dilations) != 4 or any(d < 0 for d in self.dilations):
            raise ConfigurationError(f"RAPP needs exactly 4 non-negative rates, got {self.dilations}")


@dataclass
class PaaConfig:
    heads: int = 4
    span: int = 64
    internal_downsample: int = 1

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigurationError("PAA heads must be >= 1")
        if self.internal_downsample not in (1, 2):
            raise ConfigurationError(f"internal_downsample must be 1 or 2, got {self.internal_downsample}")


@dataclass
class HcaConfig:
    stage_channels: tuple = ()
    reduction: int = 4

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if self.reduction < 1:
            raise ConfigurationError("HCA reduction must be >= 1")


class Rapp(Module):
    """Image-pool branch + four atrous branches, concatenated, fused by a 1x1
    convolution and added back onto the input."""

    def __init__(self, channels: int, cfg: RappConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if cfg.out_channels not in (None, channels):
            raise ConfigurationError("RAPP is residual: out_channels must equal input channels")
        self.channels = channels
        self.dilations = cfg.dilations
        self.pool_conv = Conv2d(channels, channels, 1, rng=rng)
        self.branches = []
        self.branch_norms = []
        for rate in cfg.dilations:
            if rate == 0:
                conv = Conv2d(channels, channels, 1, bias=False, rng=rng)
            else:
                conv = Conv2d(channels, channels, 3, dilation=rate, padding=rate, bias=False, rng=rng)
            self.branches.append(conv)
            self.branch_norms.append(BatchNorm2d(channels))
        self.fuse = Conv2d(5 * channels, channels, 1, rng=rng)

    def branch_outputs(self, x: Tensor) -> list[Tensor]:
        H, W = x.shape[2:]
        pooled = relu(self.pool_conv(adaptive_avg_pool_1x1(x)))
        outs = [bilinear_resize(pooled, H, W)]
        for conv, bn in zip(self.branches, self.branch_norms):
            outs.append(relu(bn(conv(x))))
        return outs

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise DimensionError(f"RAPP expects {self.channels} channels, got {x.shape[1]}")
        return x + self.fuse(concat(self.branch_outputs(x), axis=1))


def rapp_forward(x: Tensor, block: Rapp) -> Tensor:
    return block(x)


class Paa(Module):
    """Double conv, then 1x1 -> height attention -> width attention -> 1x1 with
    a residual, then smoothing and concatenation with the local feature."""

    def __init__(self, channels: int, cfg: PaaConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if channels % cfg.heads:
            raise ConfigurationError(f"PAA channels {channels} not divisible by heads {cfg.heads}")
        self.channels = channels
        self.downsample = cfg.internal_downsample
        span = max(1, cfg.span // cfg.internal_downsample)
        self.conv1 = Conv2d(channels, channels, 3, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 3, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(channels)
        self.proj_in = Conv2d(channels, channels, 1, rng=rng)
        self.attn_height = AxialAttention(channels, cfg.heads, span, rng)
        self.attn_width = AxialAttention(channels, cfg.heads, span, rng)
        self.proj_out = Conv2d(channels, channels, 1, rng=rng)
        self.smooth = Conv2d(channels, channels, 1, rng=rng)
        self.reduce = Conv2d(2 * channels, channels, 1, rng=rng)

    def local_feature(self, x: Tensor) -> Tensor:
        return relu(self.bn2(self.conv2(relu(self.bn1(self.conv1(x))))))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise DimensionError(f"PAA expects {self.channels} channels, got {x.shape[1]}")
        H, W = x.shape[2:]
        z = self.local_feature(x)
        if self.downsample > 1:
            z = bilinear_resize(z, max(1, H // self.downsample), max(1, W // self.downsample))
        a = self.attn_height(self.proj_in(z), "height")
        a = self.proj_out(self.attn_width(a, "width")) + z
        out = self.reduce(concat([self.smooth(a), z], axis=1))
        if self.downsample > 1:
            out = bilinear_resize(out, H, W)
        return out


def paa_forward(x: Tensor, block: Paa) -> Tensor:
    return block(x)


class Hca(Module):
    """Hierarchical context gate.

    Other encoder stages are resized to the skip's resolution, projected to
    its channel count and summed with it into a context map ``c``. A channel
    gate (pooled ``c`` through a bottleneck MLP) and a spatial gate (1x1 conv
    of ``c``) reweight the input: ``x + x * g_c * g_s``.
    """

    def __init__(self, channels: int, cfg: HcaConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if channels % cfg.reduction:
            raise ConfigurationError(f"HCA reduction {cfg.reduction} does not divide {channels} channels")
        self.channels = channels
        self.projections = [Conv2d(c, channels, 1, rng=rng) for c in cfg.stage_channels]
        hidden = channels // cfg.reduction
        self.gate_fc1 = Conv2d(channels, hidden, 1, rng=rng)
        self.gate_fc2 = Conv2d(hidden, channels, 1, rng=rng)
        self.spatial_gate = Conv2d(channels, 1, 1, rng=rng)
        # the layers feeding the sigmoids start at zero, so both gates open at 0.5
        for conv in (self.gate_fc2, self.spatial_gate):
            conv.zero_init = True
            conv.weight.data[...] = 0
            conv.bias.data[...] = 0

    def context(self, x: Tensor, stage_features) -> Tensor:
        if len(stage_features) != len(self.projections):
            raise DimensionError(
                f"HCA built for {len(self.projections)} stage features, got {len(stage_features)}")
        H, W = x.shape[2:]
        c = x
        for feat, proj in zip(stage_features, self.projections):
            p = proj(bilinear_resize(feat, H, W))
            if p.shape != x.shape:
                raise DimensionError(f"HCA internal: projected stage {p.shape} != skip {x.shape}")
            c = c + p
        return c

    def forward(self, x: Tensor, stage_features=()) -> Tensor:
        c = self.context(x, stage_features)
        g_c = sigmoid(self.gate_fc2(relu(self.gate_fc1(adaptive_avg_pool_1x1(c)))))
        g_s = sigmoid(self.spatial_gate(c))
        return x + mul(mul(x, g_c), g_s)


def hca_forward(x: Tensor, stage_features, block: Hca) -> Tensor:
    return block(x, stage_features)


@dataclass
class SkipConfig:
    """Which modules are active on one skip path, plus their settings."""

    rapp: bool = True
    paa: bool = True
    hca: bool = True
    rapp_cfg: RappConfig = field(default_factory=RappConfig)
    paa_cfg: PaaConfig = field(default_factory=PaaConfig)
    hca_cfg: HcaConfig = field(default_factory=HcaConfig)

    @property
    def label(self) -> str:
        enabled = [n.upper() for n in ("rapp", "paa", "hca") if getattr(self, n)]
        return "+".join(["Backbone"] + enabled)


class SkipCascade(Module):
    """RAPP -> PAA -> HCA on one skip path; disabled modules are the identity."""

    def __init__(self, channels: int, cfg: SkipConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.rapp = Rapp(channels, cfg.rapp_cfg, rng) if cfg.rapp else None
        self.paa = Paa(channels, cfg.paa_cfg, rng) if cfg.paa else None
        self.hca = Hca(channels, cfg.hca_cfg, rng) if cfg.hca else None

    def forward(self, x: Tensor, stage_features=(), taps: dict | None = None) -> Tensor:
        if self.rapp is not None:
            x = self.rapp(x)
        if self.paa is not None:
            x = self.paa(x)
            if taps is not None:
                taps["paa"] = x
        if self.hca is not None:
            x = self.hca(x, stage_features)
        return x


def skip_cascade(x: Tensor, stage_features, cascade: SkipCascade) -> Tensor:
    return cascade(x, stage_features)
