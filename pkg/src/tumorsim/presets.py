"""Organ presets for sample generation.

brain: one tumor per sample, ratio r in (1.0, 3.0).
liver: K ~ U{1..15} tumors per sample, ratio r in (1/8, 1/2).
"""
from dataclasses import replace

from .composer import GenerationConfig
from .shape import NoiseParams, ShapeParams
from .texture import TextureParams

BRAIN = GenerationConfig(
    shape=ShapeParams(radius_range_mm=(4.0, 10.0), noise=NoiseParams()),
    texture=TextureParams(ratio_range=(1.0, 3.0)),
    k_range=(1, 1),
    alpha_range=(0.5, 1.0),
)

LIVER = GenerationConfig(
    shape=ShapeParams(radius_range_mm=(2.0, 6.0), noise=NoiseParams()),
    texture=TextureParams(ratio_range=(1.0 / 8.0, 1.0 / 2.0)),
    k_range=(1, 15),
    alpha_range=(0.5, 1.0),
)

CUSTOM = GenerationConfig()

PRESETS = {"brain": BRAIN, "liver": LIVER, "custom": CUSTOM}


def get_preset(name, overrides=None):
    """Preset config with optional overrides ``{"shape": {...}, "texture": {...}, ...}``."""
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if not overrides:
        return base
    ov = dict(overrides)
    kw = {}
    if "shape" in ov:
        doc = base.shape.to_dict()
        doc.update(ov.pop("shape"))
        kw["shape"] = ShapeParams.from_dict(doc)
    if "texture" in ov:
        doc = base.texture.to_dict()
        doc.update(ov.pop("texture"))
        kw["texture"] = TextureParams.from_dict(doc)
    for key in ("k_range", "alpha_range"):
        if key in ov:
            kw[key] = tuple(ov.pop(key))
    if "allow_self_donation" in ov:
        kw["allow_self_donation"] = bool(ov.pop("allow_self_donation"))
    if ov:
        raise ValueError(f"unknown override keys: {sorted(ov)}")
    return replace(base, **kw)
