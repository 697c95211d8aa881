"""Checkpoint exporter: community tensor files in, engine checkpoints out."""

__version__ = "0.1.0"

from .convert import export_checkpoint
from .errors import ValidationError
from .namemap import TensorNameMap, community_default_map, load_name_map
from .parity import parity_report
from .reference import reference_last_logits

__all__ = [
    "TensorNameMap",
    "ValidationError",
    "__version__",
    "community_default_map",
    "export_checkpoint",
    "load_name_map",
    "parity_report",
    "reference_last_logits",
]
