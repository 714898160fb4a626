"""Ablation variants as switch settings over the adaptation modules.

AL adversarial alignment, PL target pseudo labels, SRT centroid consistence,
QT transferability gate, SP superpixel voting inside pseudo-labelling.
"""

from __future__ import annotations

SWITCHES = ("adapt.al", "adapt.pl", "adapt.srt", "adapt.qt", "adapt.sp", "adapt.target_cls")


def _flags(al=False, pl=False, srt=False, qt=False, sp=False, target_cls=True) -> dict:
    return dict(zip(SWITCHES, (al, pl, srt, qt, sp, target_cls)))


VARIANTS: dict[str, dict] = {
    "BL": _flags(target_cls=False),
    "BL+AL": _flags(al=True),
    "BL+AL+PL": _flags(al=True, pl=True, sp=True),
    "BL+AL+SRT": _flags(al=True, srt=True),
    "BL+PL+SRT": _flags(pl=True, srt=True, sp=True),
    "BL+AL+PL+QT": _flags(al=True, pl=True, qt=True, sp=True),
    "BL+AL+SRT+QT": _flags(al=True, srt=True, qt=True),
    "BL+PL+SRT+QT": _flags(pl=True, srt=True, qt=True, sp=True),
    "Ours-woSP": _flags(al=True, pl=True, srt=True, qt=True),
    "Ours": _flags(al=True, pl=True, srt=True, qt=True, sp=True),
}

EXTRA_VARIANTS: dict[str, dict] = {
    "Ours-woCB": dict(VARIANTS["Ours"], **{"pl.class_balanced": False}),
    "Ours-woSS": dict(VARIANTS["Ours"], **{"pl.weighted": False}),
}


def variant_flags(name: str) -> dict:
    if name in VARIANTS:
        return dict(VARIANTS[name])
    if name in EXTRA_VARIANTS:
        return dict(EXTRA_VARIANTS[name])
    raise KeyError(f"unknown variant {name!r}; known: {', '.join(list(VARIANTS) + list(EXTRA_VARIANTS))}")


def apply_variant(cfg, name: str):
    return cfg.update(variant_flags(name))
