"""Closed scene grammar: generation, captioning, parsing, perturbation.

Scenes live in a small discrete space so that captions and scenes are
mutually recoverable: every entity sits at one of nine named grid cells
with one of three named sizes, and its box is the canonical rectangle for
that (cell, size) snapped to a 64x64 coordinate grid. The caption encodes
exactly the scene, so parse_caption(render_caption(s)) == s.

Caption shape, as whitespace-free token sequences:

    a <size> <color> <state> <category> at <cell>
        [and <entity clause> ...]
        [and the <category> is <predicate> the <category> ...]

Categories are unique within a scene, so relation clauses can reference
entities by category token alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

from .errors import (
    ConfigError,
    ExhaustionError,
    ParseError,
    PlacementError,
    VocabularyError,
)
from .rng import check_seed, generator

GRID = 64  # box coordinates are snapped to multiples of 1/GRID

ATTRIBUTE_CHANGE = "attribute_change"
POSITION_CHANGE = "position_change"
RELATION_CHANGE = "relation_change"
ADD_ENTITY = "add_entity"
REMOVE_ENTITY = "remove_entity"
REGENERATE = "regenerate"

PERTURBATION_KINDS = (
    ATTRIBUTE_CHANGE,
    POSITION_CHANGE,
    RELATION_CHANGE,
    ADD_ENTITY,
    REMOVE_ENTITY,
    REGENERATE,
)

# paper-style grouping used by dataset mixes
MODIFICATION_KINDS = (ATTRIBUTE_CHANGE, POSITION_CHANGE, RELATION_CHANGE)

DIRECTIONAL = ("left_of", "right_of", "above", "below")
DISTANCE = ("near", "far_from")


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class GrammarConfig:
    categories: Tuple[str, ...] = ("dog", "cat", "bird", "fish", "cube", "ball", "tree", "star")
    colors: Tuple[str, ...] = ("red", "green", "blue", "yellow", "white", "black")
    states: Tuple[str, ...] = ("solid", "speckled", "striped", "dotted")
    sizes: Tuple[Tuple[str, float], ...] = (("small", 0.18), ("medium", 0.24), ("large", 0.30))
    cells: Tuple[Tuple[str, Tuple[float, float]], ...] = (
        ("upper_left", (1 / 6, 1 / 6)),
        ("upper_middle", (1 / 2, 1 / 6)),
        ("upper_right", (5 / 6, 1 / 6)),
        ("middle_left", (1 / 6, 1 / 2)),
        ("center", (1 / 2, 1 / 2)),
        ("middle_right", (5 / 6, 1 / 2)),
        ("lower_left", (1 / 6, 5 / 6)),
        ("lower_middle", (1 / 2, 5 / 6)),
        ("lower_right", (5 / 6, 5 / 6)),
    )
    spatial_predicates: Tuple[str, ...] = ("left_of", "right_of", "above", "below", "near", "far_from")
    interactive_predicates: Tuple[str, ...] = ("chasing", "watching", "holding", "touching")
    # predicates whose argument swap preserves semantics; swap-only
    # relation changes are forbidden for these
    whitelist: Tuple[str, ...] = ("near", "far_from", "touching")
    min_entities: int = 1
    max_entities: int = 4
    iou_threshold: float = 0.1
    max_place_attempts: int = 1000
    p_interactive: float = 0.5
    near_threshold: float = 0.7  # center distance separating near from far_from

    def __post_init__(self):
        if not self.categories or not self.colors or not self.states:
            raise ConfigError("grammar vocabulary must be non-empty")
        if not 1 <= self.min_entities <= self.max_entities:
            raise ConfigError("need 1 <= min_entities <= max_entities")
        if self.max_entities > len(self.cells):
            raise ConfigError("max_entities exceeds available cells")
        if self.max_entities > len(self.categories):
            raise ConfigError("max_entities exceeds category vocabulary")
        names = [t for t, _ in self.sizes] + [c for c, _ in self.cells]
        names += list(self.categories) + list(self.colors) + list(self.states)
        names += list(self.spatial_predicates) + list(self.interactive_predicates)
        names += list(self.structural_tokens())
        if len(set(names)) != len(names):
            raise ConfigError("grammar tokens must be globally unique")
        unknown = set(self.whitelist) - set(self.spatial_predicates) - set(self.interactive_predicates)
        if unknown:
            raise ConfigError(f"whitelisted predicates not in vocabulary: {sorted(unknown)}")

    @staticmethod
    def structural_tokens() -> Tuple[str, ...]:
        return ("a", "the", "is", "at", "and")

    @property
    def size_map(self) -> Dict[str, float]:
        return dict(self.sizes)

    @property
    def cell_map(self) -> Dict[str, Tuple[float, float]]:
        return dict(self.cells)

    def vocabulary(self) -> Tuple[str, ...]:
        """All caption tokens, sorted, for encoder/diffusion embeddings."""
        toks = set(self.structural_tokens())
        toks |= set(self.categories) | set(self.colors) | set(self.states)
        toks |= {t for t, _ in self.sizes} | {c for c, _ in self.cells}
        toks |= set(self.spatial_predicates) | set(self.interactive_predicates)
        return tuple(sorted(toks))

    def to_json_dict(self) -> dict:
        return {
            "categories": list(self.categories),
            "colors": list(self.colors),
            "states": list(self.states),
            "sizes": [[n, s] for n, s in self.sizes],
            "cells": [[n, list(c)] for n, c in self.cells],
            "spatial_predicates": list(self.spatial_predicates),
            "interactive_predicates": list(self.interactive_predicates),
            "whitelist": list(self.whitelist),
            "min_entities": self.min_entities,
            "max_entities": self.max_entities,
            "iou_threshold": self.iou_threshold,
            "max_place_attempts": self.max_place_attempts,
            "p_interactive": self.p_interactive,
            "near_threshold": self.near_threshold,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "GrammarConfig":
        known = set(cls.to_json_dict(cls()))
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown grammar config keys: {sorted(extra)}")
        kwargs = dict(data)
        if "sizes" in kwargs:
            kwargs["sizes"] = tuple((n, float(s)) for n, s in kwargs["sizes"])
        if "cells" in kwargs:
            kwargs["cells"] = tuple((n, (float(c[0]), float(c[1]))) for n, c in kwargs["cells"])
        for key in ("categories", "colors", "states", "spatial_predicates",
                    "interactive_predicates", "whitelist"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path) -> "GrammarConfig":
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


DEFAULT_CONFIG = GrammarConfig()


# ---------------------------------------------------------------------------
# data model


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def center(self):
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    def iou(self, other: "Box") -> float:
        ix = max(0.0, min(self.x1, other.x1) - max(self.x0, other.x0))
        iy = max(0.0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = ix * iy
        if inter == 0.0:
            return 0.0
        union = self.width * self.height + other.width * other.height - inter
        return inter / union

    def as_list(self):
        return [self.x0, self.y0, self.x1, self.y1]


def canonical_box(cell: str, size: str, config: GrammarConfig = DEFAULT_CONFIG) -> Box:
    """Box for an entity at `cell` with `size`, snapped to the 64-grid."""
    cx, cy = config.cell_map[cell]
    side = config.size_map[size]

    def snap(v):
        return round(v * GRID) / GRID

    return Box(snap(cx - side / 2), snap(cy - side / 2), snap(cx + side / 2), snap(cy + side / 2))


@dataclass(frozen=True)
class Entity:
    id: int
    category: str
    color: str
    state: str
    size: str
    cell: str

    @property
    def attributes(self) -> Dict[str, str]:
        return {"color": self.color, "state": self.state}

    def box(self, config: GrammarConfig = DEFAULT_CONFIG) -> Box:
        return canonical_box(self.cell, self.size, config)

    def local_caption(self) -> Tuple[str, ...]:
        # regenerable from (category, attributes) alone
        return ("a", self.color, self.state, self.category)


@dataclass(frozen=True)
class Relation:
    subject: int
    predicate: str
    object: int


@dataclass(frozen=True)
class SceneSpec:
    entities: Tuple[Entity, ...]
    relations: Tuple[Relation, ...] = ()

    def entity_by_category(self, category: str) -> Entity:
        for e in self.entities:
            if e.category == category:
                return e
        raise KeyError(category)

    def boxes(self, config: GrammarConfig = DEFAULT_CONFIG) -> List[Box]:
        return [e.box(config) for e in self.entities]


@dataclass(frozen=True)
class Perturbation:
    kind: str
    target: object = None  # entity id, (entity ids), or relation index
    payload: dict = field(default_factory=dict)

    def to_json_dict(self):
        return {"kind": self.kind, "target": self.target, "payload": dict(self.payload)}


# ---------------------------------------------------------------------------
# geometry and relation semantics


def predicate_holds(predicate: str, subj_center, obj_center, config: GrammarConfig = DEFAULT_CONFIG) -> bool:
    """Truth of a spatial predicate between two centers in [0,1]^2 coords."""
    sx, sy = subj_center
    ox, oy = obj_center
    if predicate == "left_of":
        return sx < ox
    if predicate == "right_of":
        return sx > ox
    if predicate == "above":
        return sy < oy
    if predicate == "below":
        return sy > oy
    dist = ((sx - ox) ** 2 + (sy - oy) ** 2) ** 0.5
    if predicate == "near":
        return dist <= config.near_threshold
    if predicate == "far_from":
        return dist > config.near_threshold
    raise VocabularyError(f"not a spatial predicate: {predicate}")


def derive_spatial_relation(scene_entities, i: int, j: int, config: GrammarConfig) -> Relation:
    """Canonical stated relation for the entity pair (i, j), subject first.

    Dominant-axis rule: horizontal or vertical predicate by larger center
    offset; exact diagonal ties fall back to near/far_from by distance.
    """
    ci = canonical_box(scene_entities[i].cell, scene_entities[i].size, config).center
    cj = canonical_box(scene_entities[j].cell, scene_entities[j].size, config).center
    dx = cj[0] - ci[0]
    dy = cj[1] - ci[1]
    if abs(dx) > abs(dy):
        return Relation(i, "left_of" if dx > 0 else "right_of", j)
    if abs(dy) > abs(dx):
        return Relation(i, "above" if dy > 0 else "below", j)
    dist = (dx * dx + dy * dy) ** 0.5
    return Relation(i, "near" if dist <= config.near_threshold else "far_from", j)


def _rederive_pairs(entities, relations, pairs_to_rederive, config):
    """Replace stated spatial relations for the given consecutive pairs."""
    pairs = {tuple(sorted(p)) for p in pairs_to_rederive}
    spatial = set(config.spatial_predicates)
    kept = []
    for rel in relations:
        if rel.predicate in spatial and tuple(sorted((rel.subject, rel.object))) in pairs:
            continue
        kept.append(rel)
    derived = [derive_spatial_relation(entities, i, j, config) for i, j in sorted(pairs)]
    # stated spatial relations come first, in pair order, then interactive
    spatial_rels = [r for r in kept if r.predicate in spatial] + derived
    spatial_rels.sort(key=lambda r: tuple(sorted((r.subject, r.object))))
    other = [r for r in kept if r.predicate not in spatial]
    return tuple(spatial_rels) + tuple(other)


# ---------------------------------------------------------------------------
# validation


def validate_scene(scene: SceneSpec, config: GrammarConfig = DEFAULT_CONFIG) -> None:
    """Raise ValueError unless all SceneSpec structural invariants hold."""
    ents = scene.entities
    if not 1 <= len(ents) <= config.max_entities:
        raise ValueError(f"entity count {len(ents)} outside [1, {config.max_entities}]")
    if [e.id for e in ents] != list(range(len(ents))):
        raise ValueError("entity ids must be 0..k-1 in order")
    cats = [e.category for e in ents]
    if len(set(cats)) != len(cats):
        raise ValueError("entity categories must be unique within a scene")
    for e in ents:
        if e.category not in config.categories:
            raise VocabularyError(f"unknown category {e.category!r}")
        if e.color not in config.colors:
            raise VocabularyError(f"unknown color {e.color!r}")
        if e.state not in config.states:
            raise VocabularyError(f"unknown state {e.state!r}")
        if e.size not in config.size_map:
            raise VocabularyError(f"unknown size {e.size!r}")
        if e.cell not in config.cell_map:
            raise VocabularyError(f"unknown cell {e.cell!r}")
        box = e.box(config)
        if not (box.width > 0 and box.height > 0):
            raise ValueError("box must have positive width and height")
        if not (0.0 <= box.x0 and box.x1 <= 1.0 and 0.0 <= box.y0 and box.y1 <= 1.0):
            raise ValueError("box must lie within [0,1]^2")
    cells = [e.cell for e in ents]
    if len(set(cells)) != len(cells):
        raise ValueError("entities must occupy distinct cells")
    boxes = scene.boxes(config)
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            iou = boxes[i].iou(boxes[j])
            if iou > config.iou_threshold:
                raise ValueError(f"boxes {i},{j} overlap with IoU {iou:.3f}")
    known = set(config.spatial_predicates) | set(config.interactive_predicates)
    for rel in scene.relations:
        if rel.predicate not in known:
            raise VocabularyError(f"unknown predicate {rel.predicate!r}")
        for eid in (rel.subject, rel.object):
            if not 0 <= eid < len(ents):
                raise ValueError(f"relation references missing entity {eid}")
        if rel.subject == rel.object:
            raise ValueError("relation subject equals object")


def is_consistent(scene: SceneSpec, config: GrammarConfig = DEFAULT_CONFIG) -> bool:
    """True when every stated spatial relation holds geometrically."""
    spatial = set(config.spatial_predicates)
    for rel in scene.relations:
        if rel.predicate not in spatial:
            continue
        s = scene.entities[rel.subject].box(config).center
        o = scene.entities[rel.object].box(config).center
        if not predicate_holds(rel.predicate, s, o, config):
            return False
    return True


def canonical_form(scene: SceneSpec, config: GrammarConfig = DEFAULT_CONFIG):
    """Hashable semantic form: compares equal iff scenes mean the same.

    Entities are keyed by category (unique); relations referencing
    whitelisted symmetric predicates are normalized to sorted endpoints.
    """
    ents = frozenset(
        (e.category, e.color, e.state, e.size, e.cell) for e in scene.entities
    )
    wl = set(config.whitelist)
    rels = set()
    for rel in scene.relations:
        s = scene.entities[rel.subject].category
        o = scene.entities[rel.object].category
        if rel.predicate in wl:
            s, o = sorted((s, o))
        rels.add((s, rel.predicate, o))
    return ents, frozenset(rels)


# ---------------------------------------------------------------------------
# generation


def generate_scene(rng_seed, config: GrammarConfig = DEFAULT_CONFIG,
                   n_entities: int | None = None) -> SceneSpec:
    """Deterministically sample a valid SceneSpec from the grammar."""
    check_seed(rng_seed)
    rng = generator(rng_seed, "scene")
    if n_entities is None:
        n = int(rng.integers(config.min_entities, config.max_entities + 1))
    else:
        n = n_entities
        if not 1 <= n <= config.max_entities:
            raise ValueError(f"n_entities {n} outside [1, {config.max_entities}]")
    cats = [str(c) for c in rng.choice(config.categories, size=n, replace=False)]
    cell_names = [name for name, _ in config.cells]
    size_names = [name for name, _ in config.sizes]

    for _ in range(config.max_place_attempts):
        ents = []
        for i in range(n):
            ents.append(Entity(
                id=i,
                category=cats[i],
                color=str(rng.choice(config.colors)),
                state=str(rng.choice(config.states)),
                size=str(rng.choice(size_names)),
                cell=str(rng.choice(cell_names)),
            ))
        scene = SceneSpec(tuple(ents))
        try:
            validate_scene(scene, config)
        except ValueError:
            continue
        break
    else:
        raise PlacementError(
            f"could not place {n} boxes in {config.max_place_attempts} attempts"
        )

    relations = [derive_spatial_relation(scene.entities, i, i + 1, config) for i in range(n - 1)]
    if n >= 2 and rng.random() < config.p_interactive:
        s, o = rng.choice(n, size=2, replace=False)
        pred = str(rng.choice(config.interactive_predicates))
        relations.append(Relation(int(s), pred, int(o)))
    scene = SceneSpec(tuple(scene.entities), tuple(relations))
    validate_scene(scene, config)
    return scene


# ---------------------------------------------------------------------------
# captions


def render_caption(scene: SceneSpec, config: GrammarConfig = DEFAULT_CONFIG) -> Tuple[str, ...]:
    """Token sequence for a scene; deterministic and parseable."""
    validate_scene(scene, config)
    chunks = []
    for e in scene.entities:
        chunks.append(["a", e.size, e.color, e.state, e.category, "at", e.cell])
    for rel in scene.relations:
        s = scene.entities[rel.subject].category
        o = scene.entities[rel.object].category
        chunks.append(["the", s, "is", rel.predicate, "the", o])
    tokens: List[str] = []
    for i, chunk in enumerate(chunks):
        if i:
            tokens.append("and")
        tokens.extend(chunk)
    return tuple(tokens)


def parse_caption(tokens: Sequence[str], config: GrammarConfig = DEFAULT_CONFIG) -> SceneSpec:
    """Inverse of render_caption; raises ParseError with token position."""
    tokens = list(tokens)
    if not tokens:
        raise ParseError("empty caption", 0)
    vocab = set(config.vocabulary())
    for pos, tok in enumerate(tokens):
        if tok not in vocab:
            raise ParseError(f"unknown token {tok!r}", pos)

    # split on top-level "and"
    chunks: List[Tuple[int, List[str]]] = []
    start = 0
    for pos, tok in enumerate(tokens + ["and"]):
        if tok == "and":
            if pos == start:
                raise ParseError("empty clause", pos)
            chunks.append((start, tokens[start:pos]))
            start = pos + 1

    size_names = set(config.size_map)
    cell_names = set(config.cell_map)
    preds = set(config.spatial_predicates) | set(config.interactive_predicates)
    entities: List[Entity] = []
    raw_relations: List[Tuple[int, str, str, str]] = []

    for base, chunk in chunks:
        if chunk[0] == "a":
            if len(chunk) != 7:
                raise ParseError("entity clause must have 7 tokens", base)
            _, size, color, state, category, at_tok, cell = chunk
            expectations = [
                (1, size, size_names, "size"),
                (2, color, set(config.colors), "color"),
                (3, state, set(config.states), "state"),
                (4, category, set(config.categories), "category"),
                (6, cell, cell_names, "cell"),
            ]
            for off, tok, allowed, what in expectations:
                if tok not in allowed:
                    raise ParseError(f"expected {what}, got {tok!r}", base + off)
            if at_tok != "at":
                raise ParseError(f"expected 'at', got {at_tok!r}", base + 5)
            entities.append(Entity(
                id=len(entities), category=category, color=color, state=state,
                size=size, cell=cell,
            ))
        elif chunk[0] == "the":
            if len(chunk) != 6:
                raise ParseError("relation clause must have 6 tokens", base)
            _, subj, is_tok, pred, the2, obj = chunk
            if is_tok != "is":
                raise ParseError(f"expected 'is', got {is_tok!r}", base + 2)
            if pred not in preds:
                raise ParseError(f"expected predicate, got {pred!r}", base + 3)
            if the2 != "the":
                raise ParseError(f"expected 'the', got {the2!r}", base + 4)
            raw_relations.append((base, subj, pred, obj))
        else:
            raise ParseError(f"clause must start with 'a' or 'the', got {chunk[0]!r}", base)

    if not entities:
        raise ParseError("caption has no entity clause", 0)
    cats = [e.category for e in entities]
    if len(set(cats)) != len(cats):
        raise ParseError("duplicate entity category", 0)
    by_cat = {e.category: e.id for e in entities}
    relations = []
    for base, subj, pred, obj in raw_relations:
        if subj not in by_cat:
            raise ParseError(f"relation references unknown entity {subj!r}", base + 1)
        if obj not in by_cat:
            raise ParseError(f"relation references unknown entity {obj!r}", base + 5)
        if subj == obj:
            raise ParseError("relation subject equals object", base + 1)
        relations.append(Relation(by_cat[subj], pred, by_cat[obj]))
    scene = SceneSpec(tuple(entities), tuple(relations))
    validate_scene(scene, config)
    return scene


# ---------------------------------------------------------------------------
# perturbations


def _attribute_candidates(scene, config):
    out = []
    for e in scene.entities:
        for value in config.colors:
            if value != e.color:
                out.append((e.id, "color", value))
        for value in config.states:
            if value != e.state:
                out.append((e.id, "state", value))
    return out


def _free_cells(scene, config):
    used = {e.cell for e in scene.entities}
    return [name for name, _ in config.cells if name not in used]


def _apply_position(scene, eid, cell, config):
    ents = list(scene.entities)
    ents[eid] = replace(ents[eid], cell=cell)
    pairs = [(eid - 1, eid), (eid, eid + 1)]
    pairs = [p for p in pairs if 0 <= p[0] and p[1] < len(ents)]
    rels = _rederive_pairs(ents, scene.relations, pairs, config)
    return SceneSpec(tuple(ents), rels)


def _relation_candidates(scene, config):
    """(index, action, payload) triples for every legal relation rewrite."""
    wl = set(config.whitelist)
    directional = set(DIRECTIONAL) & set(config.spatial_predicates)
    out = []
    for idx, rel in enumerate(scene.relations):
        if rel.predicate in config.interactive_predicates:
            if rel.predicate not in wl:
                out.append((idx, "swap_args", None))
            for p in config.interactive_predicates:
                if p != rel.predicate:
                    out.append((idx, "replace_predicate", p))
        elif rel.predicate in directional:
            # swapping subject and object also swaps their cells so the
            # perturbed scene stays geometrically consistent
            out.append((idx, "swap_args_and_boxes", None))
    return out


def _apply_relation_change(scene, idx, action, payload, config):
    rels = list(scene.relations)
    rel = rels[idx]
    if action == "swap_args":
        rels[idx] = Relation(rel.object, rel.predicate, rel.subject)
        return SceneSpec(scene.entities, tuple(rels))
    if action == "replace_predicate":
        rels[idx] = Relation(rel.subject, payload, rel.object)
        return SceneSpec(scene.entities, tuple(rels))
    if action == "swap_args_and_boxes":
        s, o = rel.subject, rel.object
        ents = list(scene.entities)
        ents[s] = replace(ents[s], cell=scene.entities[o].cell)
        ents[o] = replace(ents[o], cell=scene.entities[s].cell)
        swapped = Relation(o, rel.predicate, s)
        # re-derive every consecutive pair touching s or o except (s, o)
        pairs = []
        for i in (s, o):
            for pair in ((i - 1, i), (i, i + 1)):
                if 0 <= pair[0] and pair[1] < len(ents) and set(pair) != {s, o}:
                    pairs.append(pair)
        rest = [r for i, r in enumerate(rels) if i != idx]
        new_rels = _rederive_pairs(ents, rest, pairs, config)
        spatial = set(config.spatial_predicates)
        spatial_rels = sorted(
            [r for r in new_rels if r.predicate in spatial] + [swapped],
            key=lambda r: tuple(sorted((r.subject, r.object))),
        )
        other = [r for r in new_rels if r.predicate not in spatial]
        return SceneSpec(tuple(ents), tuple(spatial_rels) + tuple(other))
    raise ValueError(action)


def perturb(scene: SceneSpec, kind: str, rng_seed,
            config: GrammarConfig = DEFAULT_CONFIG) -> Tuple[Perturbation, SceneSpec]:
    """Apply one seeded perturbation of `kind`; returns (record, new scene).

    Raises ExhaustionError when no valid perturbation of the kind exists.
    """
    validate_scene(scene, config)
    check_seed(rng_seed)
    rng = generator(rng_seed, "perturb", kind)

    if kind == REGENERATE:
        pert = Perturbation(REGENERATE, None, {"variant_seed": int(rng_seed)})
        return pert, scene

    if kind == ATTRIBUTE_CHANGE:
        cands = _attribute_candidates(scene, config)
        if not cands:
            raise ExhaustionError("no attribute change available")
        eid, fld, value = cands[int(rng.integers(len(cands)))]
        ents = list(scene.entities)
        old = getattr(ents[eid], fld)
        ents[eid] = replace(ents[eid], **{fld: value})
        new = SceneSpec(tuple(ents), scene.relations)
        pert = Perturbation(ATTRIBUTE_CHANGE, eid, {"field": fld, "old": old, "new": value})
        return pert, new

    if kind == POSITION_CHANGE:
        free = _free_cells(scene, config)
        cands = [(e.id, c) for e in scene.entities for c in free]
        if not cands:
            raise ExhaustionError("no position change available")
        eid, cell = cands[int(rng.integers(len(cands)))]
        old = scene.entities[eid].cell
        new = _apply_position(scene, eid, cell, config)
        validate_scene(new, config)
        pert = Perturbation(POSITION_CHANGE, eid, {"old_cell": old, "new_cell": cell})
        return pert, new

    if kind == RELATION_CHANGE:
        cands = _relation_candidates(scene, config)
        if not cands:
            raise ExhaustionError("no relation change available")
        idx, action, payload = cands[int(rng.integers(len(cands)))]
        new = _apply_relation_change(scene, idx, action, payload, config)
        validate_scene(new, config)
        pert = Perturbation(RELATION_CHANGE, idx, {"action": action, "payload": payload})
        return pert, new

    if kind == ADD_ENTITY:
        if len(scene.entities) >= config.max_entities:
            raise ExhaustionError("scene already at max_entities")
        free = _free_cells(scene, config)
        unused = [c for c in config.categories if c not in {e.category for e in scene.entities}]
        if not free or not unused:
            raise ExhaustionError("no room to add an entity")
        ent = Entity(
            id=len(scene.entities),
            category=str(rng.choice(unused)),
            color=str(rng.choice(config.colors)),
            state=str(rng.choice(config.states)),
            size=str(rng.choice([n for n, _ in config.sizes])),
            cell=str(rng.choice(free)),
        )
        ents = tuple(scene.entities) + (ent,)
        rels = tuple(scene.relations)
        if len(ents) >= 2:
            rels = rels + (derive_spatial_relation(ents, len(ents) - 2, len(ents) - 1, config),)
        new = SceneSpec(ents, rels)
        validate_scene(new, config)
        pert = Perturbation(ADD_ENTITY, ent.id, {"category": ent.category})
        return pert, new

    if kind == REMOVE_ENTITY:
        if len(scene.entities) < 2:
            raise ExhaustionError("remove_entity requires at least 2 entities")
        eid = int(rng.integers(len(scene.entities)))
        removed = scene.entities[eid]
        ents = []
        for e in scene.entities:
            if e.id == eid:
                continue
            ents.append(replace(e, id=e.id if e.id < eid else e.id - 1))
        remap = lambda i: i if i < eid else i - 1
        rels = []
        for rel in scene.relations:
            if eid in (rel.subject, rel.object):
                continue
            rels.append(Relation(remap(rel.subject), rel.predicate, remap(rel.object)))
        # the pair around the removed entity is newly consecutive
        spatial = set(config.spatial_predicates)
        stated_pairs = {
            tuple(sorted((r.subject, r.object))) for r in rels if r.predicate in spatial
        }
        missing = [
            (i, i + 1) for i in range(len(ents) - 1)
            if (i, i + 1) not in stated_pairs
        ]
        new_rels = _rederive_pairs(ents, tuple(rels), missing, config) if missing else tuple(rels)
        new = SceneSpec(tuple(ents), new_rels)
        validate_scene(new, config)
        pert = Perturbation(REMOVE_ENTITY, eid, {"category": removed.category})
        return pert, new

    raise ValueError(f"unknown perturbation kind {kind!r}")


def contradict_relation(scene: SceneSpec, rel_index: int,
                        config: GrammarConfig = DEFAULT_CONFIG) -> SceneSpec:
    """Swap one directional relation's arguments WITHOUT moving boxes.

    The result is a valid but geometrically inconsistent SceneSpec, used as
    a relation-dimension probe against images of the original scene.
    """
    rel = scene.relations[rel_index]
    if rel.predicate not in DIRECTIONAL:
        raise ValueError("contradiction probe needs a directional spatial predicate")
    rels = list(scene.relations)
    rels[rel_index] = Relation(rel.object, rel.predicate, rel.subject)
    return SceneSpec(scene.entities, tuple(rels))


# ---------------------------------------------------------------------------
# word-order permutation (caption-level hard negatives)


def _clause_spans(tokens):
    """(start, tokens) spans of top-level clauses, same split as the parser."""
    spans = []
    start = 0
    toks = list(tokens) + ["and"]
    for pos, tok in enumerate(toks):
        if tok == "and":
            spans.append((start, list(tokens[start:pos])))
            start = pos + 1
    return spans


def permute_word_order(caption: Sequence[str], rng_seed,
                       config: GrammarConfig = DEFAULT_CONFIG) -> Tuple[str, ...]:
    """Reorder caption tokens so the meaning changes.

    Candidates are cross-binding swaps: subject/object inside a relation
    clause, or (size|color|state|cell|category) tokens between two entity
    clauses. The output always parses, and parses to a scene whose
    canonical form differs from the input's. ExhaustionError when no such
    swap exists (e.g. single-entity captions).
    """
    check_seed(rng_seed)
    tokens = list(caption)
    if len(tokens) < 2:
        raise ExhaustionError("caption too short to permute")
    base_scene = parse_caption(tokens, config)
    base_form = canonical_form(base_scene, config)

    spans = _clause_spans(tokens)
    entity_spans = [s for s in spans if s[1] and s[1][0] == "a"]
    relation_spans = [s for s in spans if s[1] and s[1][0] == "the"]

    swaps = []
    for start, chunk in relation_spans:
        swaps.append((start + 1, start + 5))  # subject and object categories
    slots = {"size": 1, "color": 2, "state": 3, "category": 4, "cell": 6}
    for a in range(len(entity_spans)):
        for b in range(a + 1, len(entity_spans)):
            sa, ca = entity_spans[a]
            sb, cb = entity_spans[b]
            for off in slots.values():
                if ca[off] != cb[off]:
                    swaps.append((sa + off, sb + off))

    candidates = []
    seen = set()
    for i, j in swaps:
        if tokens[i] == tokens[j]:
            continue
        new = list(tokens)
        new[i], new[j] = new[j], new[i]
        key = tuple(new)
        if key in seen:
            continue
        seen.add(key)
        try:
            parsed = parse_caption(new, config)
        except ParseError:
            continue
        if canonical_form(parsed, config) != base_form:
            candidates.append(key)
    if not candidates:
        raise ExhaustionError("no semantics-changing permutation exists")
    rng = generator(rng_seed, "permute")
    return candidates[int(rng.integers(len(candidates)))]


# ---------------------------------------------------------------------------
# serialization


def scene_to_json_dict(scene: SceneSpec, config: GrammarConfig = DEFAULT_CONFIG) -> dict:
    return {
        "entities": [
            {
                "id": e.id,
                "category": e.category,
                "attributes": {"color": e.color, "state": e.state},
                "size": e.size,
                "cell": e.cell,
                "box": e.box(config).as_list(),
                "local_caption": list(e.local_caption()),
            }
            for e in scene.entities
        ],
        "relations": [
            {"subject": r.subject, "predicate": r.predicate, "object": r.object}
            for r in scene.relations
        ],
        "global_caption": list(render_caption(scene, config)),
    }


def scene_from_json_dict(data: dict, config: GrammarConfig = DEFAULT_CONFIG) -> SceneSpec:
    entities = tuple(
        Entity(
            id=int(e["id"]),
            category=e["category"],
            color=e["attributes"]["color"],
            state=e["attributes"]["state"],
            size=e["size"],
            cell=e["cell"],
        )
        for e in data["entities"]
    )
    relations = tuple(
        Relation(int(r["subject"]), r["predicate"], int(r["object"]))
        for r in data["relations"]
    )
    scene = SceneSpec(entities, relations)
    for ent, raw in zip(entities, data["entities"]):
        stored = [float(v) for v in raw["box"]]
        if stored != ent.box(config).as_list():
            raise ValueError(f"stored box for entity {ent.id} disagrees with (cell, size)")
    return scene
