"""Toy DDPM with block-guided cross-attention.

A small conv encoder/decoder predicts noise at 32x32. Two cross-attention
sites (16x16 and 8x8, both with attention dim 64) inject guidance: the
global caption everywhere, and per-entity text tokens plus reference-image
patch tokens restricted to each entity's box through a binary spatial
mask. Local and global influence trade off over reverse time through the
weight schedule: full local weight up to the threshold step, then a linear
ramp to full global weight at the final step.

Timestep convention: t counts completed reverse (denoising) steps, so
t = 0 is pure noise (local guidance dominates while regions form) and
t = T is the finished image (global coherence dominates). The underlying
noise level index s runs the other way: s = T - t.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DivergenceError, ShapeError, StateError
from .grammar import DEFAULT_CONFIG, Box, GrammarConfig, SceneSpec, render_caption
from .render import render_entity_reference, render_scene
from .rng import derive_seed, generator
from . import storage

CONDITIONS = ("combined", "local_text", "local_img", "global_only")


@dataclass(frozen=True)
class DiffusionConfig:
    total_steps: int = 200
    threshold_step: int = 100
    w_max: float = 1.0
    beta_start: float = 1e-4
    beta_end: float = 0.02
    height: int = 32
    width: int = 32
    channels: Tuple[int, int, int] = (16, 32, 64)
    attn_dim: int = 64
    text_dim: int = 64
    time_dim: int = 64
    patch_size: int = 4
    # fraction of training items presented with constant global guidance
    # only, so the unguided baseline condition is in-distribution
    p_global_only: float = 0.25

    def __post_init__(self):
        if not 0 < self.threshold_step < self.total_steps:
            raise ConfigError("need 0 < threshold_step < total_steps")
        if self.w_max <= 0:
            raise ConfigError("w_max must be positive")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.height % 4 or self.width % 4:
            raise ConfigError("image dims must be divisible by 4")

    @property
    def site_shapes(self) -> Dict[str, Tuple[int, int]]:
        return {
            "site16": (self.height // 2, self.width // 2),
            "site8": (self.height // 4, self.width // 4),
        }

    def to_json_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_json_dict(cls, data: dict) -> "DiffusionConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown diffusion config keys: {sorted(extra)}")
        kwargs = dict(data)
        if "channels" in kwargs:
            kwargs["channels"] = tuple(kwargs["channels"])
        return cls(**kwargs)


def guidance_weights(t, config: DiffusionConfig) -> Tuple[float, float]:
    """Local/global guidance weights at completed-reverse-step t.

    w_local is w_max up to the threshold step, then decays linearly to 0
    at t = T; w_global is exactly w_max - w_local.
    """
    t = float(t)
    T = config.total_steps
    t_th = config.threshold_step
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    if t <= t_th:
        w_local = config.w_max
    else:
        w_local = config.w_max * (1.0 - (t - t_th) / (T - t_th))
    return w_local, config.w_max - w_local


# ---------------------------------------------------------------------------
# guidance bundles


@dataclass
class GuidanceEntry:
    entity_index: int
    text_ids: Optional[np.ndarray]           # token ids of the local caption
    image: Optional[np.ndarray]              # reference image (H, W, 3)
    masks: Dict[str, np.ndarray]             # site name -> flat binary mask


@dataclass
class GuidanceBundle:
    global_ids: np.ndarray
    entries: List[GuidanceEntry]
    condition: str = "combined"
    # baseline mode: global attention at constant w_max, schedule ignored
    global_constant: bool = False


def downsample_mask(box: Box, hidden_h: int, hidden_w: int) -> np.ndarray:
    """Binary mask at hidden resolution: a cell is inside when >= 50% of
    its pixel footprint overlaps the box."""
    ys = np.arange(hidden_h, dtype=np.float64)
    xs = np.arange(hidden_w, dtype=np.float64)
    oy = np.maximum(
        0.0, np.minimum(box.y1, (ys + 1) / hidden_h) - np.maximum(box.y0, ys / hidden_h)
    ) * hidden_h
    ox = np.maximum(
        0.0, np.minimum(box.x1, (xs + 1) / hidden_w) - np.maximum(box.x0, xs / hidden_w)
    ) * hidden_w
    return (oy[:, None] * ox[None, :]) >= 0.5


class Vocabulary:
    """Token <-> id mapping shared by the denoiser and the text encoder."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = tuple(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, caption) -> np.ndarray:
        from .errors import VocabularyError

        try:
            return np.array([self.index[t] for t in caption], dtype=np.int64)
        except KeyError as e:
            raise VocabularyError(f"token {e.args[0]!r} not in vocabulary") from None

    @classmethod
    def from_grammar(cls, config: GrammarConfig) -> "Vocabulary":
        return cls(config.vocabulary())


def build_bundle(scene: SceneSpec, vocab: Vocabulary, config: DiffusionConfig,
                 grammar_config: GrammarConfig = DEFAULT_CONFIG,
                 condition: str = "combined") -> GuidanceBundle:
    """Guidance bundle for a scene under one of the guidance conditions."""
    if condition not in CONDITIONS:
        raise ConfigError(f"unknown condition {condition!r}")
    global_ids = vocab.encode(render_caption(scene, grammar_config))
    entries: List[GuidanceEntry] = []
    if condition != "global_only":
        want_text = condition in ("combined", "local_text")
        want_image = condition in ("combined", "local_img")
        for ent in scene.entities:
            masks = {
                name: downsample_mask(ent.box(grammar_config), hh, ww).reshape(-1)
                for name, (hh, ww) in config.site_shapes.items()
            }
            entries.append(GuidanceEntry(
                entity_index=ent.id,
                text_ids=vocab.encode(ent.local_caption()) if want_text else None,
                image=render_entity_reference(ent) if want_image else None,
                masks=masks,
            ))
    return GuidanceBundle(
        global_ids=global_ids,
        entries=entries,
        condition=condition,
        global_constant=(condition == "global_only"),
    )


# ---------------------------------------------------------------------------
# attention


def local_cross_attention(q: ad.Tensor, text_keys: ad.Tensor, text_values: ad.Tensor,
                          image_keys: ad.Tensor, image_values: ad.Tensor) -> ad.Tensor:
    """Softmax attention over the concatenation of text and image streams.

    q is (N, d); keys/values are (L, d). Requires at least one token in
    each stream and matching dims, else ShapeError.
    """
    for name, tensor in (("text_keys", text_keys), ("image_keys", image_keys)):
        if tensor.shape[0] < 1:
            raise ShapeError(f"{name} must contain at least one token")
    d = q.shape[-1]
    for k in (text_keys, image_keys):
        if k.shape[-1] != d:
            raise ShapeError(f"key dim {k.shape[-1]} does not match query dim {d}")
    if text_values.shape[0] != text_keys.shape[0] or image_values.shape[0] != image_keys.shape[0]:
        raise ShapeError("key/value token counts differ")
    keys = ad.concatenate([text_keys, image_keys], axis=0)
    values = ad.concatenate([text_values, image_values], axis=0)
    return _attention(q, keys, values)


def _attention(q: ad.Tensor, keys: ad.Tensor, values: ad.Tensor) -> ad.Tensor:
    d = q.shape[-1]
    if keys.shape[-1] != d:
        raise ShapeError(f"key dim {keys.shape[-1]} does not match query dim {d}")
    logits = (q @ keys.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    return ad.softmax(logits, axis=-1) @ values


def sinusoidal_embedding(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(1, half - 1))
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


# ---------------------------------------------------------------------------
# noise schedule


class NoiseSchedule:
    def __init__(self, config: DiffusionConfig):
        T = config.total_steps
        self.betas = np.linspace(config.beta_start, config.beta_end, T)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.T = T

    def q_sample(self, x0, s: int, eps):
        """Noise x0 to level s (s=0 returns x0 exactly)."""
        if s == 0:
            return np.array(x0, copy=True)
        ab = self.alpha_bars[s - 1]
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps

    def predict_x0(self, x_s, s: int, eps):
        """Invert q_sample given the true noise (the DDPM identity)."""
        if s == 0:
            return np.array(x_s, copy=True)
        ab = self.alpha_bars[s - 1]
        return (x_s - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)

    def reverse_step(self, x_s, s: int, eps_hat, z):
        """One ancestral step from noise level s to s-1."""
        beta = self.betas[s - 1]
        alpha = self.alphas[s - 1]
        ab = self.alpha_bars[s - 1]
        mean = (x_s - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
        if s == 1:
            return mean
        ab_prev = self.alpha_bars[s - 2]
        var = beta * (1.0 - ab_prev) / (1.0 - ab)
        return mean + math.sqrt(var) * z


# ---------------------------------------------------------------------------
# denoiser


def _he(rng, *shape):
    # conv weights are (O, C, kh, kw); linear weights are (in, out)
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Denoiser:
    """Conv encoder/decoder noise predictor with two guided attention sites."""

    def __init__(self, config: DiffusionConfig, vocab: Vocabulary, init_seed=0):
        self.config = config
        self.vocab = vocab
        self.params: Dict[str, ad.Tensor] = {}
        self.trained_epochs = 0
        self.loss_log: List[float] = []
        rng = generator(init_seed, "denoiser-init")
        c0, c1, c2 = config.channels
        d = config.attn_dim
        td = config.text_dim
        p = config.patch_size

        def par(name, arr):
            self.params[name] = ad.parameter(arr)

        par("temb.w1", _he(rng, config.time_dim, config.time_dim))
        par("temb.b1", np.zeros(config.time_dim))
        par("temb.w2", _he(rng, config.time_dim, config.time_dim))
        par("temb.b2", np.zeros(config.time_dim))

        par("txt.table", rng.normal(0.0, 0.5, size=(len(vocab), td)))
        par("img.proj", _he(rng, p * p * 3, td))
        # reference images have a fixed canvas size independent of scene dims
        from .render import REFERENCE_SIZE
        n_patches = (REFERENCE_SIZE // p) ** 2
        par("img.pos", rng.normal(0.0, 0.1, size=(n_patches, td)))

        convs = [
            ("conv_in", c0, 3, 3), ("block1", c0, c0, 3),
            ("down1", c1, c0, 3), ("block2", c1, c1, 3),
            ("down2", c2, c1, 3), ("block3", c2, c2, 3), ("block4", c2, c2, 3),
            ("up1", c1, c2, 3), ("block5", c1, c1, 3),
            ("up2", c0, c1, 3), ("block6", c0, c0, 3),
            ("conv_out", 3, c0, 3),
        ]
        for name, out_c, in_c, k in convs:
            par(f"{name}.w", _he(rng, out_c, in_c, k, k))
            par(f"{name}.b", np.zeros(out_c))
        for name, ch in (("block1", c0), ("block2", c1), ("block3", c2),
                         ("block4", c2), ("block5", c1), ("block6", c0)):
            par(f"{name}.tw", _he(rng, config.time_dim, ch))
            par(f"{name}.tb", np.zeros(ch))
        for site, ch in (("site16", c1), ("site8", c2)):
            par(f"{site}.wq", _he(rng, ch, d))
            par(f"{site}.wk_txt", _he(rng, td, d))
            par(f"{site}.wv_txt", _he(rng, td, d))
            par(f"{site}.wk_img", _he(rng, td, d))
            par(f"{site}.wv_img", _he(rng, td, d))
            par(f"{site}.wout", np.zeros((d, ch)))  # guidance starts neutral

    # -- embedding ---------------------------------------------------------

    def embed_text(self, ids: np.ndarray) -> ad.Tensor:
        emb = ad.embedding(self.params["txt.table"], ids)
        pos = sinusoidal_embedding(np.arange(len(ids)), self.config.text_dim)
        return emb + ad.constant(pos)

    def embed_image_patches(self, image: np.ndarray) -> ad.Tensor:
        p = self.config.patch_size
        h, w, _ = image.shape
        patches = image.reshape(h // p, p, w // p, p, 3).transpose(0, 2, 1, 3, 4)
        flat = patches.reshape(-1, p * p * 3)
        return ad.constant(flat * 2.0 - 1.0) @ self.params["img.proj"] + self.params["img.pos"]

    def entry_features(self, entry: GuidanceEntry):
        txt = self.embed_text(entry.text_ids) if entry.text_ids is not None else None
        img = self.embed_image_patches(entry.image) if entry.image is not None else None
        return txt, img

    # -- guided attention (Eq. 1 + Eq. 2 at one site) ------------------------

    def guided_hidden_update(self, h_cells: ad.Tensor, site: str,
                             global_feats: ad.Tensor,
                             entry_feats: Sequence[Tuple[Optional[ad.Tensor], Optional[ad.Tensor]]],
                             masks: Sequence[np.ndarray],
                             w_local: float, w_global: float) -> ad.Tensor:
        """One guided update: h + w_g * Attn_global + sum_i w_l * M_i * Attn_i.

        h_cells is (N, C) for the site's N cells; each entry contributes
        only inside its mask. Cells outside every mask receive only the
        global term.
        """
        P = self.params
        q = h_cells @ P[f"{site}.wq"]
        kg = global_feats @ P[f"{site}.wk_txt"]
        vg = global_feats @ P[f"{site}.wv_txt"]
        out = h_cells + (_attention(q, kg, vg) @ P[f"{site}.wout"]) * w_global
        if w_local == 0.0:
            return out
        for (txt, img), mask in zip(entry_feats, masks):
            if mask.shape[0] != h_cells.shape[0]:
                raise ShapeError(
                    f"mask length {mask.shape[0]} vs {h_cells.shape[0]} hidden cells"
                )
            streams_k, streams_v = [], []
            if txt is not None:
                streams_k.append(txt @ P[f"{site}.wk_txt"])
                streams_v.append(txt @ P[f"{site}.wv_txt"])
            if img is not None:
                streams_k.append(img @ P[f"{site}.wk_img"])
                streams_v.append(img @ P[f"{site}.wv_img"])
            if not streams_k:
                continue
            k = streams_k[0] if len(streams_k) == 1 else ad.concatenate(streams_k, axis=0)
            v = streams_v[0] if len(streams_v) == 1 else ad.concatenate(streams_v, axis=0)
            attn = _attention(q, k, v)
            masked = attn * ad.constant(mask.astype(np.float64)[:, None])
            out = out + (masked @ P[f"{site}.wout"]) * w_local
        return out

    # -- forward -------------------------------------------------------------

    def _time_features(self, s_levels: np.ndarray) -> ad.Tensor:
        emb = ad.constant(sinusoidal_embedding(s_levels, self.config.time_dim))
        h = (emb @ self.params["temb.w1"] + self.params["temb.b1"]).gelu()
        return h @ self.params["temb.w2"] + self.params["temb.b2"]

    def _block(self, x, name, temb):
        P = self.params
        h = ad.conv2d(x, P[f"{name}.w"], P[f"{name}.b"], stride=1, pad=1)
        tfeat = temb @ P[f"{name}.tw"] + P[f"{name}.tb"]
        b, c = tfeat.shape
        h = h + tfeat.reshape(b, c, 1, 1)
        return h.relu()

    def _apply_site(self, h, site, bundles, t_steps, weight_override=None):
        cfg = self.config
        B = h.shape[0]
        rows = []
        for i in range(B):
            bundle = bundles[i]
            if weight_override is not None:
                w_l, w_g = weight_override
            elif bundle.global_constant:
                w_l, w_g = 0.0, cfg.w_max
            else:
                w_l, w_g = guidance_weights(t_steps[i], cfg)
            cells = h[i].reshape(h.shape[1], -1).swapaxes(0, 1)  # (N, C)
            gfeats = self.embed_text(bundle.global_ids)
            efeats = [self.entry_features(e) for e in bundle.entries]
            masks = [e.masks[site] for e in bundle.entries]
            upd = self.guided_hidden_update(cells, site, gfeats, efeats, masks, w_l, w_g)
            rows.append(upd.swapaxes(0, 1).reshape(1, h.shape[1], h.shape[2], h.shape[3]))
        return rows[0] if B == 1 else ad.concatenate(rows, axis=0)

    def forward(self, x: ad.Tensor, s_levels: np.ndarray, bundles: Sequence[GuidanceBundle],
                t_steps: np.ndarray, weight_override=None) -> ad.Tensor:
        """Predict the noise in x (B, 3, H, W) at noise levels s_levels.

        weight_override, when given, freezes (w_local, w_global) for every
        item instead of evaluating the schedule.
        """
        P = self.params
        if x.shape[0] != len(bundles):
            raise ShapeError("one guidance bundle required per batch item")
        temb = self._time_features(s_levels)
        h0 = ad.conv2d(x, P["conv_in.w"], P["conv_in.b"], stride=1, pad=1)
        h0 = self._block(h0, "block1", temb)
        h1 = ad.conv2d(h0, P["down1.w"], P["down1.b"], stride=2, pad=1)
        h1 = self._block(h1, "block2", temb)
        h1 = self._apply_site(h1, "site16", bundles, t_steps, weight_override)
        h2 = ad.conv2d(h1, P["down2.w"], P["down2.b"], stride=2, pad=1)
        h2 = self._block(h2, "block3", temb)
        h2 = self._apply_site(h2, "site8", bundles, t_steps, weight_override)
        h2 = self._block(h2, "block4", temb)
        u1 = ad.conv2d(ad.upsample2x(h2), P["up1.w"], P["up1.b"], stride=1, pad=1)
        u1 = self._block(u1 + h1, "block5", temb)
        u2 = ad.conv2d(ad.upsample2x(u1), P["up2.w"], P["up2.b"], stride=1, pad=1)
        u2 = self._block(u2 + h0, "block6", temb)
        return ad.conv2d(u2, P["conv_out.w"], P["conv_out.b"], stride=1, pad=1)

    # -- persistence -----------------------------------------------------------

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {f"param.{k}": v.data for k, v in self.params.items()}

    def checkpoint_meta(self) -> dict:
        return {
            "kind": "denoiser",
            "config": self.config.to_json_dict(),
            "vocab": list(self.vocab.tokens),
            "trained_epochs": self.trained_epochs,
            "loss_log": list(self.loss_log),
        }

    def save(self, path, extra_arrays: Optional[dict] = None) -> str:
        arrays = self.state_arrays()
        if extra_arrays:
            arrays.update(extra_arrays)
        return storage.write_checkpoint(path, arrays, self.checkpoint_meta())

    @classmethod
    def load(cls, path) -> Tuple["Denoiser", dict]:
        arrays, meta = storage.read_checkpoint(path)
        if meta.get("kind") != "denoiser":
            raise StateError(f"{path} is not a denoiser checkpoint")
        config = DiffusionConfig.from_json_dict(meta["config"])
        model = cls(config, Vocabulary(meta["vocab"]), init_seed=0)
        for name, tensor in model.params.items():
            tensor.data = np.array(arrays[f"param.{name}"], dtype=np.float64)
        model.trained_epochs = meta["trained_epochs"]
        model.loss_log = list(meta["loss_log"])
        extras = {k: v for k, v in arrays.items() if not k.startswith("param.")}
        return model, extras


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingItem:
    image: np.ndarray            # (H, W, 3) in [0, 1]
    bundle: GuidanceBundle       # full combined-condition bundle
    baseline_bundle: GuidanceBundle


def build_training_items(scene_seeds: Sequence[int], vocab: Vocabulary,
                         config: DiffusionConfig,
                         grammar_config: GrammarConfig = DEFAULT_CONFIG) -> List[TrainingItem]:
    from .grammar import generate_scene

    items = []
    for seed in scene_seeds:
        scene = generate_scene(seed, grammar_config)
        items.append(TrainingItem(
            image=render_scene(scene, config.height, config.width, grammar_config),
            bundle=build_bundle(scene, vocab, config, grammar_config, "combined"),
            baseline_bundle=build_bundle(scene, vocab, config, grammar_config, "global_only"),
        ))
    return items


def _to_chw(image: np.ndarray) -> np.ndarray:
    return (image.transpose(2, 0, 1) * 2.0 - 1.0)


def _from_chw(x: np.ndarray) -> np.ndarray:
    return np.clip((x.transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0)


def train_denoiser(model: Denoiser, items: Sequence[TrainingItem], epochs: int,
                   batch_size: int = 8, lr: float = 2e-3, seed: int = 0,
                   optimizer_state: Optional[dict] = None,
                   log_every: Optional[int] = None) -> List[float]:
    """DDPM noise-prediction training; returns per-epoch mean losses.

    Deterministic given (model init, items, seed): data order and noise
    draws derive from (seed, epoch, step). Training resumed from a saved
    optimizer state continues the identical trajectory.
    """
    if not items:
        raise ValueError("training needs a non-empty dataset")
    cfg = model.config
    schedule = NoiseSchedule(cfg)
    opt = ad.Adam(model.params, lr=lr)
    if optimizer_state:
        opt.load_state_arrays(optimizer_state)
    start_epoch = model.trained_epochs
    for epoch in range(start_epoch, start_epoch + epochs):
        order = generator(seed, "order", epoch).permutation(len(items))
        epoch_losses = []
        for step, lo in enumerate(range(0, len(items), batch_size)):
            batch_idx = order[lo:lo + batch_size]
            rng = generator(seed, "noise", epoch, step)
            xs, bundles, s_arr, t_arr, eps_all = [], [], [], [], []
            for bi in batch_idx:
                item = items[bi]
                s = int(rng.integers(1, cfg.total_steps + 1))
                eps = rng.standard_normal((3, cfg.height, cfg.width))
                x0 = _to_chw(item.image)
                xs.append(schedule.q_sample(x0, s, eps))
                use_baseline = rng.random() < cfg.p_global_only
                bundles.append(item.baseline_bundle if use_baseline else item.bundle)
                s_arr.append(s)
                t_arr.append(cfg.total_steps - s)
                eps_all.append(eps)
            x = ad.constant(np.stack(xs))
            target = np.stack(eps_all)
            pred = model.forward(x, np.array(s_arr), bundles, np.array(t_arr))
            loss = ((pred - ad.constant(target)) ** 2.0).mean()
            if not np.isfinite(loss.data):
                raise DivergenceError("training loss is not finite", step=epoch * 10000 + step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.item())
        model.loss_log.append(float(np.mean(epoch_losses)))
        model.trained_epochs += 1
        if log_every and (epoch + 1) % log_every == 0:
            print(f"epoch {epoch + 1}: loss {model.loss_log[-1]:.5f}")
    return model.loss_log


# ---------------------------------------------------------------------------
# sampling


def sample_guided(model: Denoiser, bundle: GuidanceBundle,
                  init_collage: Optional[np.ndarray] = None,
                  rng_seed: int = 0, num_steps: Optional[int] = None,
                  weight_override: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """Run the full reverse process for one image, deterministically.

    Without init, starts from unit Gaussian noise at level T. With an init
    collage, the start state is the collage noised to the starting level,
    so num_steps=0 returns the collage exactly. weight_override freezes
    (w_local, w_global) instead of the schedule.
    """
    cfg = model.config
    schedule = NoiseSchedule(cfg)
    steps = cfg.total_steps if num_steps is None else int(num_steps)
    if not 0 <= steps <= cfg.total_steps:
        raise ValueError(f"num_steps {steps} outside [0, {cfg.total_steps}]")
    if model.trained_epochs == 0 and steps > 0:
        raise StateError("denoiser has not been trained; train or load a checkpoint")
    rng = generator(rng_seed, "sample")
    if init_collage is not None:
        x0 = _to_chw(init_collage)
        eps = rng.standard_normal(x0.shape)
        x = schedule.q_sample(x0, steps, eps)
    else:
        x = rng.standard_normal((3, cfg.height, cfg.width))
    for s in range(steps, 0, -1):
        t = cfg.total_steps - s
        pred = model.forward(
            ad.constant(x[None]), np.array([s]), [bundle], np.array([t]),
            weight_override=weight_override,
        ).data[0]
        z = rng.standard_normal(x.shape) if s > 1 else np.zeros_like(x)
        x = schedule.reverse_step(x, s, pred, z)
    return _from_chw(x)


# ---------------------------------------------------------------------------
# sampling provenance


def sampling_manifest(scene: SceneSpec, condition: str, rng_seed: int,
                      checkpoint_sha256: str, num_steps: Optional[int],
                      init: str, grammar_config: GrammarConfig = DEFAULT_CONFIG) -> dict:
    from .grammar import scene_to_json_dict

    return {
        "kind": "sampling_manifest",
        "scene": scene_to_json_dict(scene, grammar_config),
        "condition": condition,
        "seed": int(rng_seed),
        "num_steps": num_steps,
        "init": init,  # "none" or "collage"
        "checkpoint_sha256": checkpoint_sha256,
    }


def sample_from_manifest(manifest: dict, model: Denoiser,
                         grammar_config: GrammarConfig = DEFAULT_CONFIG) -> np.ndarray:
    from .grammar import scene_from_json_dict
    from .render import compose_collage

    scene = scene_from_json_dict(manifest["scene"], grammar_config)
    bundle = build_bundle(scene, model.vocab, model.config, grammar_config,
                          manifest["condition"])
    init = None
    if manifest["init"] == "collage":
        init = compose_collage(scene, model.config.height, model.config.width,
                               grammar_config).image
    return sample_guided(model, bundle, init_collage=init,
                         rng_seed=manifest["seed"], num_steps=manifest["num_steps"])
