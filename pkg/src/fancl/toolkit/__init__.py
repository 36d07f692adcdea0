"""File formats, manifests, the synthetic generator and the CLI."""

from fancl.toolkit.manifest import Record, load_split, read_manifest, write_manifest
from fancl.toolkit.synthetic import SyntheticConfig, generate_synthetic
from fancl.toolkit.tensorfile import read_container, read_tensor, write_container, write_tensor

__all__ = [
    "Record", "load_split", "read_manifest", "write_manifest",
    "SyntheticConfig", "generate_synthetic",
    "read_container", "read_tensor", "write_container", "write_tensor",
]
