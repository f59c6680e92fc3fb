"""Deterministic rasterizer and ground-truth image verifier.

Images are (H, W, 3) float arrays in [0, 1], default 32x32, over a fixed
gray background. Each category renders as a fixed glyph shape with
anti-aliasing disabled; the entity's state selects a fill-density pattern
(solid / speckled / striped / dotted keep 1, 3/4, 1/2, 1/4 of the glyph's
pixels), so both attributes are measurable from pixels.

The verifier reports one boolean per compositional dimension. Checks are
conditioned on glyph presence: an entity whose box shows no foreground is
skipped by the attribute and relation checks, so single-dimension
perturbations flip exactly their own dimension.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ShapeError
from .grammar import (
    DEFAULT_CONFIG,
    Box,
    Entity,
    GrammarConfig,
    SceneSpec,
)

BACKGROUND = (0.5, 0.5, 0.5)

COLOR_RGB: Dict[str, Tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}

STATE_DENSITY: Dict[str, float] = {
    "solid": 1.0,
    "speckled": 0.75,
    "striped": 0.5,
    "dotted": 0.25,
}

CATEGORY_GLYPH: Dict[str, str] = {
    "dog": "hbar",
    "cat": "diamond",
    "bird": "triangle_up",
    "fish": "triangle_down",
    "cube": "square",
    "ball": "disk",
    "tree": "vbar",
    "star": "plus",
}

DEFAULT_HEIGHT = 32
DEFAULT_WIDTH = 32
REFERENCE_SIZE = 32
REFERENCE_FILL = 0.75  # glyph side as a fraction of the reference canvas


@dataclass(frozen=True)
class VerifyParams:
    """Pinned detector thresholds; acceptance runs use these defaults."""

    fg_threshold: float = 0.25      # max-channel deviation from background
    presence_min: float = 0.05      # min foreground fraction inside a box
    empty_max: float = 0.05         # max foreground fraction outside all boxes
    dead_zone_px: float = 2.0       # tie margin for spatial predicates
    near_threshold: float = 0.7     # near/far split, fraction of min(H, W)


@dataclass(frozen=True)
class VerifyResult:
    attribute_ok: bool
    position_ok: bool
    relation_ok: bool

    def as_dict(self):
        return {
            "attribute_ok": self.attribute_ok,
            "position_ok": self.position_ok,
            "relation_ok": self.relation_ok,
        }

    @property
    def all_ok(self):
        return self.attribute_ok and self.position_ok and self.relation_ok


@dataclass(frozen=True)
class ReferenceCollage:
    image: np.ndarray
    entity_masks: Tuple[np.ndarray, ...]


def background_canvas(height=DEFAULT_HEIGHT, width=DEFAULT_WIDTH) -> np.ndarray:
    canvas = np.empty((height, width, 3), dtype=np.float64)
    canvas[:] = BACKGROUND
    return canvas


def pixel_box(box: Box, height: int, width: int) -> Tuple[int, int, int, int]:
    """Half-open pixel bounds (r0, r1, c0, c1): a pixel is inside iff its
    center falls in [x0, x1) x [y0, y1). Exact for 64-grid boxes."""
    r0 = max(0, ceil(box.y0 * height - 0.5))
    r1 = min(height, ceil(box.y1 * height - 0.5))
    c0 = max(0, ceil(box.x0 * width - 0.5))
    c1 = min(width, ceil(box.x1 * width - 0.5))
    return r0, r1, c0, c1


def glyph_mask(category: str, box_h: int, box_w: int) -> np.ndarray:
    """Boolean glyph footprint inside a box_h x box_w pixel box."""
    shape = CATEGORY_GLYPH.get(category)
    if shape is None:
        raise KeyError(f"no glyph registered for category {category!r}")
    v = (np.arange(box_h, dtype=np.float64)[:, None] + 0.5) / box_h
    u = (np.arange(box_w, dtype=np.float64)[None, :] + 0.5) / box_w
    if shape == "square":
        return np.ones((box_h, box_w), dtype=bool)
    if shape == "disk":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if shape == "triangle_up":
        return np.abs(u - 0.5) <= 0.5 * v
    if shape == "triangle_down":
        return np.abs(u - 0.5) <= 0.5 * (1.0 - v)
    if shape == "diamond":
        return np.abs(u - 0.5) + np.abs(v - 0.5) <= 0.5
    if shape == "plus":
        return (np.abs(u - 0.5) <= 0.25) | (np.abs(v - 0.5) <= 0.25)
    if shape == "hbar":
        return np.broadcast_to(np.abs(v - 0.5) <= 0.25, (box_h, box_w)).copy()
    if shape == "vbar":
        return np.broadcast_to(np.abs(u - 0.5) <= 0.25, (box_h, box_w)).copy()
    raise KeyError(shape)


def state_pattern(mask: np.ndarray, state: str) -> np.ndarray:
    """Apply the state's fill-density pattern to a glyph mask (box-local)."""
    r = np.arange(mask.shape[0])[:, None]
    c = np.arange(mask.shape[1])[None, :]
    if state == "solid":
        keep = np.ones_like(mask)
    elif state == "speckled":
        keep = ~((r % 2 == 1) & (c % 2 == 1))
    elif state == "striped":
        keep = np.broadcast_to(r % 2 == 0, mask.shape)
    elif state == "dotted":
        keep = (r % 2 == 0) & (c % 2 == 0)
    else:
        raise KeyError(f"no pattern registered for state {state!r}")
    return mask & keep


def entity_support(entity: Entity, height: int, width: int,
                   config: GrammarConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Full-image boolean mask of the entity's painted pixels."""
    r0, r1, c0, c1 = pixel_box(entity.box(config), height, width)
    out = np.zeros((height, width), dtype=bool)
    if r1 <= r0 or c1 <= c0:
        return out
    patch = state_pattern(glyph_mask(entity.category, r1 - r0, c1 - c0), entity.state)
    out[r0:r1, c0:c1] = patch
    return out


def render_scene(scene: SceneSpec, height=DEFAULT_HEIGHT, width=DEFAULT_WIDTH,
                 config: GrammarConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Rasterize a scene; pixels outside every glyph are exactly background."""
    canvas = background_canvas(height, width)
    for entity in scene.entities:
        support = entity_support(entity, height, width, config)
        canvas[support] = COLOR_RGB[entity.color]
    return canvas


def render_entity_reference(entity: Entity, size: int = REFERENCE_SIZE) -> np.ndarray:
    """Tight, centered rendering of one entity on the reference canvas."""
    canvas = background_canvas(size, size)
    side = round(REFERENCE_FILL * size)
    r0 = (size - side) // 2
    patch = state_pattern(glyph_mask(entity.category, side, side), entity.state)
    region = canvas[r0:r0 + side, r0:r0 + side]
    region[patch] = COLOR_RGB[entity.color]
    return canvas


def resize_nearest(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Deterministic nearest-neighbor resize (pixel-center mapping)."""
    src_h, src_w = image.shape[:2]
    rows = np.floor((np.arange(out_h) + 0.5) * src_h / out_h).astype(int).clip(0, src_h - 1)
    cols = np.floor((np.arange(out_w) + 0.5) * src_w / out_w).astype(int).clip(0, src_w - 1)
    return image[rows[:, None], cols[None, :]]


def compose_collage(scene: SceneSpec, height=DEFAULT_HEIGHT, width=DEFAULT_WIDTH,
                    config: GrammarConfig = DEFAULT_CONFIG) -> ReferenceCollage:
    """Paste scaled per-entity references into their boxes over background.

    Each entity mask's support is exactly the entity's quantized box.
    """
    canvas = background_canvas(height, width)
    masks: List[np.ndarray] = []
    for entity in scene.entities:
        r0, r1, c0, c1 = pixel_box(entity.box(config), height, width)
        mask = np.zeros((height, width), dtype=bool)
        if r1 > r0 and c1 > c0:
            ref = render_entity_reference(entity)
            canvas[r0:r1, c0:c1] = resize_nearest(ref, r1 - r0, c1 - c0)
            mask[r0:r1, c0:c1] = True
        masks.append(mask)
    return ReferenceCollage(canvas, tuple(masks))


# ---------------------------------------------------------------------------
# verification


def _nearest_color(mean_rgb: np.ndarray) -> str:
    names = sorted(COLOR_RGB)
    dists = [np.sum((mean_rgb - np.array(COLOR_RGB[n])) ** 2) for n in names]
    return names[int(np.argmin(dists))]


def _state_matches(observed_count: int, category: str, box_h: int, box_w: int,
                   stated: str) -> bool:
    """True when the stated state is a nearest-count explanation of the
    observed foreground pixel count (exact per-glyph support sizes, so the
    check is exact on clean renders and count-based on noisy ones)."""
    glyph = glyph_mask(category, box_h, box_w)
    dists = {
        name: abs(observed_count - int(state_pattern(glyph, name).sum()))
        for name in STATE_DENSITY
    }
    return dists[stated] == min(dists.values())


def _pixel_predicate(predicate, subj_c, obj_c, height, width, params) -> bool:
    dz = params.dead_zone_px
    sy, sx = subj_c
    oy, ox = obj_c
    if predicate == "left_of":
        return ox - sx > dz
    if predicate == "right_of":
        return sx - ox > dz
    if predicate == "above":
        return oy - sy > dz
    if predicate == "below":
        return sy - oy > dz
    dist = float(np.hypot(sx - ox, sy - oy))
    ref = params.near_threshold * min(height, width)
    if predicate == "near":
        return dist <= ref - dz
    if predicate == "far_from":
        return dist > ref + dz
    raise KeyError(predicate)


def verify_image(scene: SceneSpec, image: np.ndarray,
                 config: GrammarConfig = DEFAULT_CONFIG,
                 params: VerifyParams = VerifyParams(),
                 expected_hw: Optional[Tuple[int, int]] = None) -> VerifyResult:
    """Per-dimension ground-truth check of an image against a scene.

    attribute_ok: every detected entity's foreground has the stated
        dominant color and nearest fill density (state).
    position_ok: every box contains foreground, and the region outside all
        boxes is foreground-free (up to empty_max).
    relation_ok: detected foreground centroids satisfy every stated
        spatial predicate, with a dead zone around ties.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got {image.shape}")
    if expected_hw is not None and image.shape[:2] != tuple(expected_hw):
        raise ShapeError(f"image dims {image.shape[:2]} do not match config {expected_hw}")
    height, width = image.shape[:2]

    fg = np.abs(image - np.array(BACKGROUND)).max(axis=2) > params.fg_threshold

    boxes = [pixel_box(e.box(config), height, width) for e in scene.entities]
    inside_any = np.zeros((height, width), dtype=bool)
    present: List[bool] = []
    centroids: List[Optional[Tuple[float, float]]] = []
    attr_ok = True
    for entity, (r0, r1, c0, c1) in zip(scene.entities, boxes):
        inside_any[r0:r1, c0:c1] = True
        box_fg = np.zeros((height, width), dtype=bool)
        box_fg[r0:r1, c0:c1] = fg[r0:r1, c0:c1]
        area = max(1, (r1 - r0) * (c1 - c0))
        count = int(box_fg.sum())
        is_present = count / area >= params.presence_min
        present.append(is_present)
        if not is_present:
            centroids.append(None)
            continue
        rows, cols = np.nonzero(box_fg)
        centroids.append((float(rows.mean() + 0.5), float(cols.mean() + 0.5)))
        mean_rgb = image[box_fg].mean(axis=0)
        if _nearest_color(mean_rgb) != entity.color:
            attr_ok = False
        if not _state_matches(count, entity.category, r1 - r0, c1 - c0, entity.state):
            attr_ok = False

    outside = ~inside_any
    n_outside = int(outside.sum())
    empty_ok = True
    if n_outside:
        empty_ok = float(fg[outside].sum()) / n_outside <= params.empty_max
    position_ok = all(present) and empty_ok

    spatial = set(config.spatial_predicates)
    relation_ok = True
    for rel in scene.relations:
        if rel.predicate not in spatial:
            continue
        sc = centroids[rel.subject]
        oc = centroids[rel.object]
        if sc is None or oc is None:
            continue
        if not _pixel_predicate(rel.predicate, sc, oc, height, width, params):
            relation_ok = False

    return VerifyResult(attribute_ok=attr_ok, position_ok=position_ok, relation_ok=relation_ok)
