"""Encoder-decoder segmentation with residual atrous pooling, position-sensitive
axial attention and hierarchical context gates on the skip connections,
built on a small numpy autograd engine."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import SyntheticSpec, generate_synthetic, read_pgm, write_pgm
from .errors import MhitError
from .network import EncoderSpec, MhitNet, NetConfig
from .tensor import Tensor, backward, no_grad
from .training import AdamConfig, fit

__all__ = [
    "AdamConfig", "EncoderSpec", "MhitError", "MhitNet", "NetConfig", "RunConfig",
    "SyntheticSpec", "Tensor", "backward", "fit", "generate_synthetic", "load_checkpoint",
    "no_grad", "read_pgm", "save_checkpoint", "write_pgm",
]

__version__ = "0.1.0"
