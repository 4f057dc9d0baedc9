"""Plain-text ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Unknown keys and invalid values
are rejected when the file is loaded, so a run never starts half-configured.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .blocks import SkipConfig
from .data import SyntheticSpec
from .errors import ConfigurationError
from .metrics import EvalConfig
from .network import EncoderSpec, NetConfig
from .training import AdamConfig, LossConfig

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}
MODULES = ("rapp", "paa", "hca")


def _parse_bool(text: str) -> bool:
    t = text.lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_blocks(text: str) -> tuple:
    return tuple(int(p) for p in text.replace(" ", "").split(","))


@dataclass
class RunConfig:
    # model
    width: float = 0.25
    blocks: tuple = (3, 4, 6, 3)
    heads: int = 4
    hca_reduction: int = 4
    paa_downsample: int = 1
    skip1_rapp: bool = True
    skip1_paa: bool = True
    skip1_hca: bool = True
    skip2_rapp: bool = True
    skip2_paa: bool = True
    skip2_hca: bool = True
    skip3_rapp: bool = True
    skip3_paa: bool = True
    skip3_hca: bool = True
    # data
    image_size: int = 64
    n_train: int = 200
    n_val: int = 50
    noise_sigma: float = 0.05
    contrast: float = 0.5
    data_seed: int = 0
    data_dir: str = ""
    # training
    batch_size: int = 8
    epochs: int = 30
    lr0: float = 1e-3
    bce_weight: float = 1.0
    dice_weight: float = 1.0
    flips: bool = False
    seed: int = 0
    # evaluation
    confidence_threshold: float = 0.4
    iou_threshold: float = 0.5
    out_dir: str = "runs"

    _PARSERS = {bool: _parse_bool, int: int, float: float, str: str, tuple: _parse_blocks}

    def __post_init__(self):
        self.validate()

    # keys in files use dots for the per-skip flags: skip2.paa = false
    @staticmethod
    def _attr(key: str) -> str:
        return key.strip().replace(".", "_")

    @staticmethod
    def _key(attr: str) -> str:
        if attr.startswith("skip") and attr[4:5].isdigit():
            return attr.replace("_", ".", 1)
        return attr

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = (value, lineno)
        return cls.from_pairs(values, source)

    @classmethod
    def from_pairs(cls, pairs: dict, source: str = "<config>") -> "RunConfig":
        types = {f.name: type(f.default) for f in fields(cls)}
        kwargs = {}
        for key, item in pairs.items():
            value, where = item if isinstance(item, tuple) else (item, None)
            loc = f"{source}:{where}" if where else source
            attr = cls._attr(key)
            if attr not in types:
                raise ConfigurationError(f"{loc}: unknown key {key!r}")
            try:
                kwargs[attr] = cls._PARSERS[types[attr]](value)
            except ValueError as exc:
                raise ConfigurationError(f"{loc}: bad value for {key!r}: {exc}") from None
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(), str(path))

    def override(self, assignments: list[str]) -> "RunConfig":
        """Apply ``key=value`` strings on top of this config."""
        pairs = {}
        for a in assignments:
            if "=" not in a:
                raise ConfigurationError(f"override must be key=value, got {a!r}")
            k, v = a.split("=", 1)
            pairs[k.strip()] = v.strip()
        merged = {self._key(f.name): _format(getattr(self, f.name)) for f in fields(self)}
        merged.update(pairs)
        return RunConfig.from_pairs(merged, "--set")

    def to_text(self) -> str:
        return "".join(f"{self._key(f.name)} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigurationError(msg)

        need(self.width > 0, "width must be positive")
        need(len(self.blocks) == 4 and min(self.blocks) >= 1, "blocks must be four positive integers")
        need(self.heads >= 1, "heads must be >= 1")
        need(self.hca_reduction >= 1, "hca_reduction must be >= 1")
        need(self.paa_downsample in (1, 2), "paa_downsample must be 1 or 2")
        need(self.image_size >= 16 and self.image_size % 16 == 0, "image_size must be a positive multiple of 16")
        need(self.n_train >= 1 and self.n_val >= 0, "n_train must be >= 1 and n_val >= 0")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.epochs >= 1, "epochs must be >= 1")
        need(self.lr0 > 0, "lr0 must be positive")
        need(self.noise_sigma >= 0 and self.contrast > 0, "noise_sigma must be >= 0 and contrast > 0")
        LossConfig(self.bce_weight, self.dice_weight)
        EvalConfig(self.confidence_threshold, self.iou_threshold)
        # every channel count the model will build must split evenly over the heads
        for ch in EncoderSpec(width=self.width).stage_channels[:3]:
            need(ch % self.heads == 0, f"stage width {ch} is not divisible by heads={self.heads}")

    # ---- derived objects -------------------------------------------------

    def skip_flags(self) -> tuple:
        return tuple(tuple(getattr(self, f"skip{k}_{m}") for m in MODULES) for k in (1, 2, 3))

    def with_modules(self, rapp: bool, paa: bool, hca: bool) -> "RunConfig":
        flags = {f"skip{k}_{m}": v for k in (1, 2, 3) for m, v in zip(MODULES, (rapp, paa, hca))}
        return replace(self, **flags)

    def net_config(self) -> NetConfig:
        return NetConfig(EncoderSpec(blocks_per_stage=self.blocks, width=self.width), self.image_size,
                         self.heads, self.hca_reduction, self.paa_downsample, self.skip_flags())

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(image_size=self.image_size, n_train=self.n_train, n_val=self.n_val,
                             noise_sigma=self.noise_sigma, contrast=self.contrast, seed=self.data_seed)

    def adam_config(self) -> AdamConfig:
        return AdamConfig(lr0=self.lr0)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.bce_weight, self.dice_weight)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(self.confidence_threshold, self.iou_threshold)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def ablation_label(flags) -> str:
    """Row label for a (rapp, paa, hca) triple, e.g. ``Backbone+RAPP+HCA``."""
    return SkipConfig(*flags).label
