"""Counterfactual set assembly, similarity filtering, dataset persistence.

A set holds one real pair (rendered scene + caption, always index 0) and
m-1 perturbed variants whose images come from an image factory: the
deterministic collage ("stitched_collage") or the guided diffusion sampler
("diffusion_generated"). Variant kinds follow a quota mix over the four
groups (modification / addition / deletion / regeneration); modifications
subdivide into attribute, position, and relation changes.

Every generated image records enough provenance (seed, scene, condition,
checkpoint hash) to be regenerated bit-identically later.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import storage
from .diffusion import Denoiser, build_bundle, sample_guided, sampling_manifest
from .errors import ExhaustionError, SetStructureError
from .grammar import (
    ADD_ENTITY,
    ATTRIBUTE_CHANGE,
    DEFAULT_CONFIG,
    MODIFICATION_KINDS,
    POSITION_CHANGE,
    REGENERATE,
    RELATION_CHANGE,
    REMOVE_ENTITY,
    GrammarConfig,
    Perturbation,
    SceneSpec,
    generate_scene,
    perturb,
    render_caption,
    scene_from_json_dict,
    scene_to_json_dict,
)
from .render import compose_collage, render_scene
from .rng import derive_seed, generator

REAL = "real_rendered"
DIFFUSION = "diffusion_generated"
STITCHED = "stitched_collage"

MIX_GROUPS = ("modification", "addition", "deletion", "regeneration")
DEFAULT_MIX = {g: 0.25 for g in MIX_GROUPS}

GROUP_FOR_KIND = {
    ATTRIBUTE_CHANGE: "modification",
    POSITION_CHANGE: "modification",
    RELATION_CHANGE: "modification",
    ADD_ENTITY: "addition",
    REMOVE_ENTITY: "deletion",
    REGENERATE: "regeneration",
}


@dataclass
class CounterfactualPair:
    image: np.ndarray
    caption: Tuple[str, ...]
    scene: SceneSpec
    provenance: str
    perturbation: Optional[Perturbation] = None
    seed: Optional[int] = None
    manifest: Optional[dict] = None  # sampling provenance for generated images


@dataclass
class CounterfactualSet:
    set_id: str
    pairs: List[CounterfactualPair]

    @property
    def m(self) -> int:
        return len(self.pairs)

    @property
    def real(self) -> CounterfactualPair:
        return self.pairs[0]

    @property
    def variants(self) -> List[CounterfactualPair]:
        return self.pairs[1:]


def validate_set(cset: CounterfactualSet) -> None:
    if not cset.pairs:
        raise SetStructureError("set has no pairs")
    real = cset.pairs[0]
    if real.provenance != REAL or real.perturbation is not None:
        raise SetStructureError("index 0 must be the unperturbed real pair")
    seen = {}
    for pair in cset.pairs:
        key = tuple(pair.caption)
        prior = seen.get(key)
        if prior is not None:
            regen = {None, REGENERATE}
            kinds = {prior, pair.perturbation.kind if pair.perturbation else None}
            if not kinds <= regen:
                raise SetStructureError(f"duplicate caption {key} outside regenerate variants")
        seen[key] = pair.perturbation.kind if pair.perturbation else None


# ---------------------------------------------------------------------------
# image factories


class StitchedFactory:
    """Deterministic collage images; provenance is reproducible from the scene."""

    provenance = STITCHED

    def __init__(self, height=32, width=32, grammar_config: GrammarConfig = DEFAULT_CONFIG):
        self.height = height
        self.width = width
        self.grammar_config = grammar_config

    def produce(self, scene: SceneSpec, seed: int):
        image = compose_collage(scene, self.height, self.width, self.grammar_config).image
        manifest = {
            "kind": "stitched_manifest",
            "scene": scene_to_json_dict(scene, self.grammar_config),
            "height": self.height,
            "width": self.width,
        }
        return image, STITCHED, manifest


class DiffusionFactory:
    """Images from the guided sampler, with full sampling provenance."""

    provenance = DIFFUSION

    def __init__(self, model: Denoiser, checkpoint_sha256: str,
                 grammar_config: GrammarConfig = DEFAULT_CONFIG,
                 condition: str = "combined", init: str = "collage",
                 num_steps: Optional[int] = None):
        self.model = model
        self.checkpoint_sha256 = checkpoint_sha256
        self.grammar_config = grammar_config
        self.condition = condition
        self.init = init
        self.num_steps = num_steps

    def produce(self, scene: SceneSpec, seed: int):
        bundle = build_bundle(scene, self.model.vocab, self.model.config,
                              self.grammar_config, self.condition)
        init_img = None
        if self.init == "collage":
            init_img = compose_collage(scene, self.model.config.height,
                                       self.model.config.width, self.grammar_config).image
        image = sample_guided(self.model, bundle, init_collage=init_img,
                              rng_seed=seed, num_steps=self.num_steps)
        manifest = sampling_manifest(scene, self.condition, seed, self.checkpoint_sha256,
                                     self.num_steps, self.init, self.grammar_config)
        return image, DIFFUSION, manifest


class MixedFactory:
    """Per-variant choice between stitched and diffusion provenance."""

    def __init__(self, stitched: StitchedFactory, diffusion: Optional[DiffusionFactory],
                 stitched_fraction: float):
        if not 0.0 <= stitched_fraction <= 1.0:
            raise ValueError("stitched_fraction must be within [0, 1]")
        if stitched_fraction < 1.0 and diffusion is None:
            raise SetStructureError(
                "stitched_fraction < 1.0 requires a trained diffusion factory"
            )
        self.stitched = stitched
        self.diffusion = diffusion
        self.stitched_fraction = stitched_fraction

    def produce(self, scene: SceneSpec, seed: int):
        use_stitched = generator(seed, "provenance").random() < self.stitched_fraction
        factory = self.stitched if use_stitched else self.diffusion
        return factory.produce(scene, seed)


def regenerate_pair_image(record: dict, model: Optional[Denoiser] = None,
                          grammar_config: GrammarConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Rebuild a pair's image from its persisted provenance manifest."""
    manifest = record.get("sampling_manifest")
    scene = scene_from_json_dict(record["scene"], grammar_config)
    if record["provenance"] == REAL:
        height, width = record["image_dims"]
        return render_scene(scene, height, width, grammar_config)
    if record["provenance"] == STITCHED:
        return compose_collage(scene, manifest["height"], manifest["width"],
                               grammar_config).image
    if record["provenance"] == DIFFUSION:
        if model is None:
            raise SetStructureError("diffusion provenance needs the denoiser checkpoint")
        from .diffusion import sample_from_manifest

        return sample_from_manifest(manifest, model, grammar_config)
    raise SetStructureError(f"unknown provenance {record['provenance']!r}")


# ---------------------------------------------------------------------------
# set construction


def _quota_counts(mix: Dict[str, float], k: int) -> Dict[str, int]:
    """Largest-remainder allocation of k variants over the mix groups."""
    if abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ValueError("mix proportions must sum to 1")
    unknown = set(mix) - set(MIX_GROUPS)
    if unknown:
        raise ValueError(f"unknown mix groups: {sorted(unknown)}")
    raw = {g: mix.get(g, 0.0) * k for g in MIX_GROUPS}
    counts = {g: int(np.floor(v)) for g, v in raw.items()}
    short = k - sum(counts.values())
    order = sorted(MIX_GROUPS, key=lambda g: (-(raw[g] - counts[g]), MIX_GROUPS.index(g)))
    for g in order[:short]:
        counts[g] += 1
    return counts


def _variant_kinds(mix: Dict[str, float], k: int, rng) -> List[str]:
    counts = _quota_counts(mix, k)
    groups: List[str] = []
    for g in MIX_GROUPS:
        groups.extend([g] * counts[g])
    return [groups[i] for i in rng.permutation(len(groups))]


def build_set(base_scene: SceneSpec, m: int, mix: Dict[str, float], rng_seed: int,
              factory, grammar_config: GrammarConfig = DEFAULT_CONFIG,
              height=32, width=32, set_id: Optional[str] = None,
              max_retries: int = 20) -> CounterfactualSet:
    """One real pair plus m-1 mixed variants, deterministic given the seed."""
    if m < 2:
        raise SetStructureError("a counterfactual set needs m >= 2")
    rng = generator(rng_seed, "kinds")
    groups = _variant_kinds(mix, m - 1, rng)
    real = CounterfactualPair(
        image=render_scene(base_scene, height, width, grammar_config),
        caption=render_caption(base_scene, grammar_config),
        scene=base_scene,
        provenance=REAL,
        seed=int(rng_seed),
    )
    pairs = [real]
    captions = {real.caption}
    for slot, group in enumerate(groups):
        made = None
        for attempt in range(max_retries):
            pert_seed = derive_seed(rng_seed, "variant", slot, attempt)
            try:
                kind = _pick_kind(group, pert_seed)
                pert, scene_v = perturb(base_scene, kind, pert_seed, grammar_config)
            except ExhaustionError:
                continue
            caption_v = render_caption(scene_v, grammar_config)
            if caption_v in captions and kind != REGENERATE:
                continue
            image_seed = derive_seed(rng_seed, "image", slot, attempt)
            image, provenance, manifest = factory.produce(scene_v, image_seed)
            made = CounterfactualPair(
                image=image, caption=caption_v, scene=scene_v,
                provenance=provenance, perturbation=pert, seed=image_seed,
                manifest=manifest,
            )
            break
        if made is None:
            raise ExhaustionError(
                f"could not build a '{group}' variant after {max_retries} retries"
            )
        captions.add(made.caption)
        pairs.append(made)
    cset = CounterfactualSet(set_id or f"set-{rng_seed}", pairs)
    validate_set(cset)
    return cset


def _pick_kind(group: str, seed: int) -> str:
    if group == "modification":
        rng = generator(seed, "modkind")
        return MODIFICATION_KINDS[int(rng.integers(len(MODIFICATION_KINDS)))]
    return {"addition": ADD_ENTITY, "deletion": REMOVE_ENTITY,
            "regeneration": REGENERATE}[group]


# ---------------------------------------------------------------------------
# filtering


def variant_similarities(cset: CounterfactualSet, scorer) -> List[float]:
    return [float(scorer.similarity(p.image, p.caption)) for p in cset.variants]


def filter_pairs(cset: CounterfactualSet, scorer, threshold_percentile: float = 10.0,
                 threshold_value: Optional[float] = None,
                 factory=None) -> CounterfactualSet:
    """Drop variants scoring strictly below the similarity threshold.

    The threshold is a batch statistic: dataset-level callers pass the
    precomputed threshold_value; standalone calls derive it from this
    set's variants at threshold_percentile. Sub-threshold variants are
    regenerated once (new image seed through the factory) and kept if the
    retry clears the threshold. The real pair is never dropped. Filtering
    with the same threshold value is idempotent.
    """
    sims = variant_similarities(cset, scorer)
    if threshold_value is None:
        threshold_value = float(np.percentile(sims, threshold_percentile)) if sims else 0.0
    kept = [cset.real]
    for pair, sim in zip(cset.variants, sims):
        if sim >= threshold_value:
            kept.append(pair)
            continue
        if factory is not None and pair.provenance != REAL:
            retry_seed = derive_seed(pair.seed or 0, "filter-retry")
            image, provenance, manifest = factory.produce(pair.scene, retry_seed)
            retry_sim = float(scorer.similarity(image, pair.caption))
            if retry_sim >= threshold_value:
                kept.append(CounterfactualPair(
                    image=image, caption=pair.caption, scene=pair.scene,
                    provenance=provenance, perturbation=pair.perturbation,
                    seed=retry_seed, manifest=manifest,
                ))
    if len(kept) < 2:
        raise SetStructureError(f"{cset.set_id}: filtering left fewer than 2 pairs")
    out = CounterfactualSet(cset.set_id, kept)
    validate_set(out)
    return out


# ---------------------------------------------------------------------------
# dataset persistence


def _pair_record(pair: CounterfactualPair, grammar_config: GrammarConfig) -> dict:
    return {
        "image_hash": storage.image_content_hash(pair.image),
        "image_dims": [pair.image.shape[0], pair.image.shape[1]],
        "caption": list(pair.caption),
        "scene": scene_to_json_dict(pair.scene, grammar_config),
        "provenance": pair.provenance,
        "perturbation": pair.perturbation.to_json_dict() if pair.perturbation else None,
        "seed": pair.seed,
        "sampling_manifest": pair.manifest,
    }


def build_dataset(out_dir, n_sets: int, m: int, mix: Dict[str, float], master_seed: int,
                  factory, grammar_config: GrammarConfig = DEFAULT_CONFIG,
                  height=32, width=32, scorer=None, filter_percentile: float = 10.0,
                  config_echo: Optional[dict] = None,
                  dataset_id: Optional[str] = None) -> Tuple[dict, str]:
    """Build, optionally filter, and persist n_sets counterfactual sets.

    Returns (manifest dict, manifest sha256). Rerunning with the same
    configuration and seed writes a bit-identical manifest.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    sets: List[CounterfactualSet] = []
    for i in range(n_sets):
        scene_seed = derive_seed(master_seed, "set", i, "scene")
        rng = generator(scene_seed, "entity-count")
        # base scenes keep one category and one cell free so addition
        # variants always have room
        hi = max(3, grammar_config.max_entities)
        n_entities = int(rng.integers(2, hi))
        base = generate_scene(scene_seed, grammar_config, n_entities=n_entities)
        cset = build_set(base, m, mix, derive_seed(master_seed, "set", i, "build"),
                         factory, grammar_config, height, width, set_id=f"set-{i:05d}")
        sets.append(cset)

    if scorer is not None:
        all_sims = [s for cset in sets for s in variant_similarities(cset, scorer)]
        threshold = float(np.percentile(all_sims, filter_percentile)) if all_sims else 0.0
        sets = [
            filter_pairs(cset, scorer, threshold_value=threshold, factory=factory)
            for cset in sets
        ]

    set_records = []
    for cset in sets:
        records = []
        for pair in cset.pairs:
            rec = _pair_record(pair, grammar_config)
            base = images_dir / rec["image_hash"]
            if not base.with_suffix(".f32").exists():
                storage.save_image_pair(base, pair.image)
            records.append(rec)
        set_records.append({"set_id": cset.set_id, "pairs": records})

    manifest = {
        "kind": "dataset_manifest",
        "dataset_id": dataset_id or f"dataset-{master_seed}",
        "config": {
            "n_sets": n_sets,
            "m": m,
            "mix": {g: mix.get(g, 0.0) for g in MIX_GROUPS},
            "master_seed": int(master_seed),
            "height": height,
            "width": width,
            "filter_percentile": filter_percentile if scorer is not None else None,
            "grammar": grammar_config.to_json_dict(),
            "extra": config_echo or {},
        },
        "sets": set_records,
    }
    manifest_hash = storage.write_json(out_dir / "manifest.json", manifest)
    return manifest, manifest_hash


def load_dataset(out_dir) -> Tuple[dict, List[CounterfactualSet]]:
    """Load a persisted dataset; images come from the float sidecars."""
    out_dir = Path(out_dir)
    manifest = storage.read_json(out_dir / "manifest.json")
    grammar_config = GrammarConfig.from_json_dict(manifest["config"]["grammar"])
    sets = []
    for srec in manifest["sets"]:
        pairs = []
        for rec in srec["pairs"]:
            image = storage.read_float_image(out_dir / "images" / f"{rec['image_hash']}.f32")
            pert = None
            if rec["perturbation"] is not None:
                p = rec["perturbation"]
                target = p["target"]
                if isinstance(target, list):
                    target = tuple(target)
                pert = Perturbation(p["kind"], target, p["payload"])
            pairs.append(CounterfactualPair(
                image=image,
                caption=tuple(rec["caption"]),
                scene=scene_from_json_dict(rec["scene"], grammar_config),
                provenance=rec["provenance"],
                perturbation=pert,
                seed=rec["seed"],
                manifest=rec["sampling_manifest"],
            ))
        sets.append(CounterfactualSet(srec["set_id"], pairs))
    return manifest, sets
