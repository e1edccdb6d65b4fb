"""Benchmark presets: input scaling and window geometry per dataset.

Every preset slides a 336 px window; the shorter image side and the stride
vary by dataset. voc20 alone uses the dense 112 px stride. Presets whose
class list opens with a dedicated background class are flagged so the
vocabulary check and refinement skip logic can key off it.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class Preset:
    name: str
    short_side: int
    window: int
    stride: int
    patch: int = 16
    with_background: bool = False


PRESETS: dict[str, Preset] = {
    p.name: p
    for p in (
        Preset("voc20", 336, 336, 112),
        Preset("voc21", 448, 336, 224, with_background=True),
        Preset("object", 448, 336, 224, with_background=True),
        Preset("stuff", 448, 336, 224),
        Preset("context59", 576, 336, 224),
        Preset("context60", 576, 336, 224, with_background=True),
        Preset("ade", 576, 336, 224),
        Preset("city", 688, 336, 224),
    )
}

PRESET_NAMES = tuple(PRESETS)


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset '{name}'; valid presets: {', '.join(PRESET_NAMES)}"
        ) from None
