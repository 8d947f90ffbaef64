"""Procedural "places": seeded layered images on a planar grid.

Each place owns a pattern (two-colour gradient, a few coloured rectangles
and a faint stripe texture) drawn from ``hash(seed, "place", k)``. A view
re-renders that pattern under a small seeded similarity transform drawn
from ``hash(seed, "view", k, j)``, and sits within 8 m of the place anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._seeding import rng_for
from .errors import DataError
from .geo import DomainTag, PlanarPoint
from .store import ImageRecord, Manifest

MAX_VIEW_OFFSET_M = 8.0
N_RECTS = 5


@dataclass(frozen=True)
class SynthConfig:
    n_places: int = 100
    views_per_place: int = 4
    image_size: int = 32
    jitter: float = 0.5
    spacing_m: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.n_places < 1 or self.views_per_place < 1 or self.image_size < 1:
            raise DataError("n_places, views_per_place and image_size must be positive")
        if not 0.0 <= self.jitter <= 1.0:
            raise DataError("jitter must be in [0, 1]")
        if not self.spacing_m > 50.0:
            raise DataError("spacing_m must exceed 50 m")


def place_anchor(k: int, cfg: SynthConfig) -> PlanarPoint:
    side = math.ceil(math.sqrt(cfg.n_places))
    return PlanarPoint((k % side) * cfg.spacing_m, (k // side) * cfg.spacing_m)


def _place_pattern(seed: int, place: int) -> dict:
    rng = rng_for(seed, "place", place)
    return {
        "bg": rng.uniform(0.15, 0.95, (2, 3)),
        "bg_angle": rng.uniform(0, 2 * np.pi),
        "centers": rng.uniform(0.1, 0.9, (N_RECTS, 2)),
        "halves": rng.uniform(0.06, 0.22, (N_RECTS, 2)),
        "colors": rng.uniform(0.0, 1.0, (N_RECTS, 3)),
        "stripe_freq": rng.uniform(2.0, 6.0),
        "stripe_angle": rng.uniform(0, np.pi),
        "stripe_tint": rng.uniform(-1.0, 1.0, 3),
    }


def render_view(seed: int, place: int, view: int, size: int = 32, jitter: float = 0.5) -> np.ndarray:
    """Render view ``view`` of place ``place`` as a size x size x 3 float32 image."""
    pat = _place_pattern(seed, place)
    rng = rng_for(seed, "view", place, view)
    shift = jitter * rng.uniform(-0.08, 0.08, 2)
    scale = 1.0 + jitter * rng.uniform(-0.1, 0.1)
    rect_jit = jitter * rng.uniform(-0.02, 0.02, (N_RECTS, 2))

    c = (np.arange(size) + 0.5) / size
    v, u = np.meshgrid(c, c, indexing="ij")
    u = (u - 0.5) / scale + 0.5 - shift[0]
    v = (v - 0.5) / scale + 0.5 - shift[1]

    a = pat["bg_angle"]
    t = np.clip(0.5 + (u - 0.5) * np.cos(a) + (v - 0.5) * np.sin(a), 0.0, 1.0)[..., None]
    img = (1 - t) * pat["bg"][0] + t * pat["bg"][1]
    for (cu, cv), (hu, hv), col, (du, dv) in zip(pat["centers"], pat["halves"], pat["colors"], rect_jit):
        inside = (np.abs(u - cu - du) <= hu) & (np.abs(v - cv - dv) <= hv)
        img[inside] = col
    sa = pat["stripe_angle"]
    phase = 2 * np.pi * pat["stripe_freq"] * (u * np.cos(sa) + v * np.sin(sa))
    img = img + 0.08 * np.sin(phase)[..., None] * pat["stripe_tint"]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_ref(cfg: SynthConfig, place: int, view: int) -> str:
    return f"synth:{cfg.seed}:{place}:{view}:{cfg.image_size}:{cfg.jitter!r}"


def render_ref(ref: str) -> np.ndarray:
    try:
        _, seed, place, view, size, jitter = ref.split(":")
        return render_view(int(seed), int(place), int(view), int(size), float(jitter))
    except ValueError:
        raise DataError(f"malformed synthetic image reference {ref!r}") from None


def view_position(cfg: SynthConfig, place: int, view: int) -> PlanarPoint:
    anchor = place_anchor(place, cfg)
    rng = rng_for(cfg.seed, "pos", place, view)
    r = MAX_VIEW_OFFSET_M * math.sqrt(rng.uniform())
    th = rng.uniform(0, 2 * math.pi)
    return PlanarPoint(anchor.x_m + r * math.cos(th), anchor.y_m + r * math.sin(th))


def generate(cfg: SynthConfig):
    """Build the manifest and the images for ``cfg``.

    Returns ``(manifest, images)`` with images aligned to manifest records.
    Image references are inline ``synth:`` seeds, so the manifest alone is
    enough to regenerate every image.
    """
    records, images = [], []
    for k in range(cfg.n_places):
        for j in range(cfg.views_per_place):
            records.append(ImageRecord(
                id=f"p{k}_v{j}",
                image=synth_ref(cfg, k, j),
                position=view_position(cfg, k, j),
                label=k,
                domain=DomainTag.DAY,
            ))
            images.append(render_view(cfg.seed, k, j, cfg.image_size, cfg.jitter))
    return Manifest("planar", records), images
