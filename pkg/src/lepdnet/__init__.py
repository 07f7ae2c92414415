"""Location-embedded pairwise-distance network for urinary-stone patch diagnosis."""

from .dataio import LABELS, ORGANS, PatchRecord, encode_location, load_dataset
from .model import LEPDNet, Switches, load_checkpoint, save_checkpoint
from .nets import NetConfig
from .synthgen import SynthSpec, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "LABELS", "ORGANS", "LEPDNet", "NetConfig", "PatchRecord", "Switches", "SynthSpec",
    "encode_location", "generate_dataset", "load_checkpoint", "load_dataset", "save_checkpoint",
]
