"""Fusion-block auto-discovery registry.

Scans all .py modules in this package, finds non-abstract FusionBlock
subclasses and indexes them by their config name.
"""

from __future__ import annotations

import importlib
import inspect
import pkgutil

from ..errors import ConfigError
from .base import FRAME_LEVEL, VIDEO_LEVEL, BlockInput, BlockOutput, FrameBatch, FusionBlock

__all__ = [
    "FRAME_LEVEL",
    "VIDEO_LEVEL",
    "BlockInput",
    "BlockOutput",
    "FrameBatch",
    "FusionBlock",
    "block_class",
    "discover_blocks",
]

_registry: dict[str, type[FusionBlock]] | None = None


def _all_subclasses(cls: type) -> set[type]:
    result = set()
    for sub in cls.__subclasses__():
        if not inspect.isabstract(sub):
            result.add(sub)
        result.update(_all_subclasses(sub))
    return result


def discover_blocks() -> dict[str, type[FusionBlock]]:
    """Return ``{name: class}`` for every selectable fusion block.

    ``name`` is an instance property returning a constant, so it is read
    through ``fget`` without building a block.
    """
    global _registry  # noqa: PLW0603
    if _registry is not None:
        return _registry

    for _finder, module_name, _is_pkg in pkgutil.iter_modules(__path__):
        if module_name == "base":
            continue
        importlib.import_module(f".{module_name}", __name__)

    found: dict[str, type[FusionBlock]] = {}
    # Sorted by class name: subclass discovery goes through a set.
    for cls in sorted(_all_subclasses(FusionBlock), key=lambda c: c.__name__):
        if not cls.selectable:
            continue
        name = cls.name.fget(None)  # type: ignore[attr-defined]
        if name in found:
            raise RuntimeError(
                f"Duplicate fusion block name {name!r}: "
                f"{found[name].__name__} and {cls.__name__}"
            )
        found[name] = cls
    _registry = found
    return found


def block_class(name: str) -> type[FusionBlock]:
    """Look up a block by config name; unknown names are a config error."""
    blocks = discover_blocks()
    if name not in blocks:
        raise ConfigError(f"unknown fusion block {name!r}; choose from {sorted(blocks)}")
    return blocks[name]
