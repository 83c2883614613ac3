"""Python bindings for the cafpn C++ core."""

from ._cafpn import (
    ConfigError,
    IoError,
    Model,
    NumericError,
    gradcheck,
    learning_rate,
    presets,
    set_num_threads,
    split,
    tile_grid,
    val_count,
)

VARIANTS = ("fpn", "fpn-ca", "fpn-srr", "fpn-srr-ca")

__all__ = [
    "ConfigError",
    "IoError",
    "Model",
    "NumericError",
    "VARIANTS",
    "gradcheck",
    "learning_rate",
    "presets",
    "set_num_threads",
    "split",
    "tile_grid",
    "val_count",
]
