"""Small dual encoder: conv image tower, attention text tower, cosine head.

The text tower adds sinusoidal position codes before two self-attention
layers, so word order reaches the embedding (required for the word-order
loss to be learnable). Fine-tuning goes through low-rank adapters on the
linear (matmul) weights; base parameters stay frozen, which also pins the
linear-probe behavior of the image tower's conv features.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .diffusion import Vocabulary, sinusoidal_embedding
from .errors import ConfigError, DegenerateInputError, ShapeError, StateError, VocabularyError
from . import storage
from .rng import generator


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    height: int = 32
    width: int = 32
    image_channels: Tuple[int, int, int] = (16, 32, 64)
    text_dim: int = 64
    text_layers: int = 2

    def to_json_dict(self):
        d = asdict(self)
        d["image_channels"] = list(self.image_channels)
        return d

    @classmethod
    def from_json_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown encoder config keys: {sorted(extra)}")
        kwargs = dict(data)
        if "image_channels" in kwargs:
            kwargs["image_channels"] = tuple(kwargs["image_channels"])
        return cls(**kwargs)


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 8
    alpha: float = 8.0
    target_layers: Tuple[str, ...] = ("all_linear",)

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("adapter rank must be >= 1")


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    source: str  # "image" or "text"


def _he(rng, *shape):
    # conv weights are (O, C, kh, kw); linear weights are (in, out)
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _normalize_rows(x: ad.Tensor) -> ad.Tensor:
    sq = (x * x).sum(axis=-1, keepdims=True)
    return x * sq ** -0.5


class DualEncoder:
    """Image and text encoders sharing an embedding space of dim E."""

    # linear (matmul) weights; these are the adapter targets
    LINEAR_LAYERS_IMAGE = ("img.head",)

    def __init__(self, config: EncoderConfig, vocab: Vocabulary, init_seed=0):
        self.config = config
        self.vocab = vocab
        self.params: Dict[str, ad.Tensor] = {}
        self.adapters: Dict[str, Tuple[ad.Tensor, ad.Tensor]] = {}
        self.adapter_scale = 0.0
        rng = generator(init_seed, "encoder-init")
        c0, c1, c2 = config.image_channels
        td, e = config.text_dim, config.embed_dim

        def par(name, arr):
            self.params[name] = ad.parameter(arr)

        par("img.conv1.w", _he(rng, c0, 3, 3, 3))
        par("img.conv1.b", np.zeros(c0))
        par("img.conv2.w", _he(rng, c1, c0, 3, 3))
        par("img.conv2.b", np.zeros(c1))
        par("img.conv3.w", _he(rng, c2, c1, 3, 3))
        par("img.conv3.b", np.zeros(c2))
        # head reads pooled 2x2 quadrant features so coarse layout survives
        pooled_dim = c2 * 4
        par("img.head.w", _he(rng, pooled_dim, e))
        par("img.head.b", np.zeros(e))

        par("txt.table", rng.normal(0.0, 0.5, size=(len(vocab), td)))
        for layer in range(config.text_layers):
            for side in ("attn_pre", "mlp_pre"):
                par(f"txt.l{layer}.{side}.gamma", np.ones(td))
                par(f"txt.l{layer}.{side}.beta", np.zeros(td))
            for proj in ("wq", "wk", "wv", "wo", "mlp"):
                par(f"txt.l{layer}.{proj}.w", _he(rng, td, td))
                par(f"txt.l{layer}.{proj}.b", np.zeros(td))
        par("txt.head.w", _he(rng, td, e))
        par("txt.head.b", np.zeros(e))

    # -- adapters ----------------------------------------------------------

    def linear_layer_names(self) -> List[str]:
        # the embedding table counts: it is a linear map over one-hot tokens
        names = list(self.LINEAR_LAYERS_IMAGE) + ["txt.table"]
        for layer in range(self.config.text_layers):
            names += [f"txt.l{layer}.{p}" for p in ("wq", "wk", "wv", "wo", "mlp")]
        names.append("txt.head")
        return names

    def apply_adapters(self, config: AdapterConfig, init_seed=0) -> Dict[str, ad.Tensor]:
        """Attach low-rank adapters; returns the trainable parameter dict.

        Each target linear W (in, out) gains delta = (alpha/rank) * A @ B
        with A random, B zero, so the adapted forward equals the base
        forward exactly until training moves B.
        """
        targets = self.linear_layer_names() if "all_linear" in config.target_layers \
            else list(config.target_layers)
        known = set(self.linear_layer_names())
        unknown = set(targets) - known
        if unknown:
            raise ConfigError(f"unknown adapter target layers: {sorted(unknown)}")
        for p in self.params.values():
            p.requires_grad = False  # base is frozen under adapter fine-tuning
        rng = generator(init_seed, "adapter-init")
        self.adapters = {}
        self.adapter_scale = config.alpha / config.rank
        trainable = {}
        for name in targets:
            if name == "txt.table":
                # embedding rows are gathered, not matmul'd, so scale A like
                # the table itself rather than by 1/sqrt(vocab)
                fan_in, fan_out = self.params["txt.table"].shape
                a_scale = 0.5
            else:
                fan_in, fan_out = self.params[f"{name}.w"].shape
                a_scale = 1.0 / math.sqrt(fan_in)
            a = ad.parameter(rng.normal(0.0, a_scale, size=(fan_in, config.rank)))
            b = ad.parameter(np.zeros((config.rank, fan_out)))
            self.adapters[name] = (a, b)
            trainable[f"adapter.{name}.a"] = a
            trainable[f"adapter.{name}.b"] = b
        return trainable

    def _linear(self, x: ad.Tensor, name: str) -> ad.Tensor:
        out = x @ self.params[f"{name}.w"] + self.params[f"{name}.b"]
        if name in self.adapters:
            a, b = self.adapters[name]
            out = out + ((x @ a) @ b) * self.adapter_scale
        return out

    # -- image tower ---------------------------------------------------------

    def _image_trunk(self, x: ad.Tensor) -> ad.Tensor:
        """Conv features pooled to 2x2 quadrants, flattened to (B, 4*C)."""
        P = self.params
        h = ad.conv2d(x, P["img.conv1.w"], P["img.conv1.b"], stride=2, pad=1).relu()
        h = ad.conv2d(h, P["img.conv2.w"], P["img.conv2.b"], stride=2, pad=1).relu()
        h = ad.conv2d(h, P["img.conv3.w"], P["img.conv3.b"], stride=2, pad=1).relu()
        b, c, hh, ww = h.shape
        pooled = h.reshape(b, c, 2, hh // 2, 2, ww // 2).mean(axis=5).mean(axis=3)
        return pooled.reshape(b, c * 4)

    def encode_images_batch(self, images: np.ndarray) -> ad.Tensor:
        """(B, H, W, 3) float array -> (B, E) embedding tensor."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (self.config.height, self.config.width, 3):
            raise ShapeError(
                f"expected (B, {self.config.height}, {self.config.width}, 3), got {images.shape}"
            )
        x = ad.constant(images.transpose(0, 3, 1, 2) * 2.0 - 1.0)
        return self._linear(self._image_trunk(x), "img.head")

    def pooled_image_features(self, images: np.ndarray) -> np.ndarray:
        """Frozen conv features before the head (for linear probes)."""
        images = np.asarray(images, dtype=np.float64)
        x = ad.constant(images.transpose(0, 3, 1, 2) * 2.0 - 1.0)
        return self._image_trunk(x).data

    def encode_image(self, image: np.ndarray) -> Embedding:
        vec = self.encode_images_batch(np.asarray(image)[None]).data[0]
        if not np.all(np.isfinite(vec)):
            raise DegenerateInputError("image embedding is not finite")
        return Embedding(vec, "image")

    # -- text tower ------------------------------------------------------------

    def encode_texts_batch(self, token_ids: Sequence[np.ndarray]) -> ad.Tensor:
        """List of id arrays -> (B, E); sequences are padded and masked."""
        if any(len(ids) == 0 for ids in token_ids):
            raise VocabularyError("cannot encode an empty caption")
        P = self.params
        td = self.config.text_dim
        b = len(token_ids)
        lmax = max(len(ids) for ids in token_ids)
        padded = np.zeros((b, lmax), dtype=np.int64)
        mask = np.zeros((b, lmax), dtype=np.float64)
        for i, ids in enumerate(token_ids):
            padded[i, :len(ids)] = ids
            mask[i, :len(ids)] = 1.0
        h = ad.embedding(P["txt.table"], padded)
        if "txt.table" in self.adapters:
            a, b_fac = self.adapters["txt.table"]
            h = h + (ad.embedding(a, padded) @ b_fac) * self.adapter_scale
        h = h + ad.constant(sinusoidal_embedding(np.arange(lmax), td))
        key_bias = ad.constant((mask[:, None, :] - 1.0) * 1e9)
        scale = 1.0 / math.sqrt(td)
        for layer in range(self.config.text_layers):
            name = f"txt.l{layer}"
            norm = ad.layernorm(h, P[f"{name}.attn_pre.gamma"], P[f"{name}.attn_pre.beta"])
            q = self._linear(norm, f"{name}.wq")
            k = self._linear(norm, f"{name}.wk")
            v = self._linear(norm, f"{name}.wv")
            logits = (q @ k.swapaxes(-1, -2)) * scale + key_bias
            h = h + self._linear(ad.softmax(logits, axis=-1) @ v, f"{name}.wo")
            norm = ad.layernorm(h, P[f"{name}.mlp_pre.gamma"], P[f"{name}.mlp_pre.beta"])
            h = h + self._linear(norm, f"{name}.mlp").gelu()
        mask_t = ad.constant(mask[:, :, None])
        inv_len = ad.constant((1.0 / mask.sum(axis=1))[:, None])
        pooled = (h * mask_t).sum(axis=1) * inv_len
        return self._linear(pooled, "txt.head")

    def encode_text(self, caption: Sequence[str]) -> Embedding:
        ids = self.vocab.encode(caption)
        vec = self.encode_texts_batch([ids]).data[0]
        if not np.all(np.isfinite(vec)):
            raise DegenerateInputError("text embedding is not finite")
        return Embedding(vec, "text")

    # -- similarity ---------------------------------------------------------

    @staticmethod
    def cosine(a: Embedding, b: Embedding) -> float:
        na = float(np.linalg.norm(a.vector))
        nb = float(np.linalg.norm(b.vector))
        if na == 0.0 or nb == 0.0:
            raise DegenerateInputError("zero-norm embedding")
        return float(a.vector @ b.vector / (na * nb))

    def similarity(self, image: np.ndarray, caption: Sequence[str]) -> float:
        return self.cosine(self.encode_image(image), self.encode_text(caption))

    def similarity_matrix(self, image_embs: ad.Tensor, text_embs: ad.Tensor) -> ad.Tensor:
        """(B, E) x (B2, E) -> (B, B2) cosine matrix on the autograd path."""
        return _normalize_rows(image_embs) @ _normalize_rows(text_embs).swapaxes(0, 1)

    # -- persistence -----------------------------------------------------------

    def state_arrays(self):
        return {f"param.{k}": v.data for k, v in self.params.items()}

    def save(self, path) -> str:
        meta = {
            "kind": "dual_encoder",
            "config": self.config.to_json_dict(),
            "vocab": list(self.vocab.tokens),
        }
        return storage.write_checkpoint(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> "DualEncoder":
        arrays, meta = storage.read_checkpoint(path)
        if meta.get("kind") != "dual_encoder":
            raise StateError(f"{path} is not a dual-encoder checkpoint")
        model = cls(EncoderConfig.from_json_dict(meta["config"]), Vocabulary(meta["vocab"]))
        for name, tensor in model.params.items():
            tensor.data = np.array(arrays[f"param.{name}"], dtype=np.float64)
        return model

    def save_adapter_overlay(self, path, base_checkpoint_sha256: str,
                             adapter_config: AdapterConfig,
                             loss_param_arrays: Optional[dict] = None) -> str:
        if not self.adapters:
            raise StateError("no adapters attached")
        arrays = {}
        for name, (a, b) in self.adapters.items():
            arrays[f"adapter.{name}.a"] = a.data
            arrays[f"adapter.{name}.b"] = b.data
        if loss_param_arrays:
            arrays.update(loss_param_arrays)
        meta = {
            "kind": "adapter_overlay",
            "base_checkpoint_sha256": base_checkpoint_sha256,
            "rank": adapter_config.rank,
            "alpha": adapter_config.alpha,
            "target_layers": list(adapter_config.target_layers),
        }
        return storage.write_checkpoint(path, arrays, meta)

    def load_adapter_overlay(self, path, expected_base_sha256: Optional[str] = None) -> dict:
        arrays, meta = storage.read_checkpoint(path)
        if meta.get("kind") != "adapter_overlay":
            raise StateError(f"{path} is not an adapter overlay")
        if expected_base_sha256 and meta["base_checkpoint_sha256"] != expected_base_sha256:
            raise StateError("adapter overlay references a different base checkpoint")
        config = AdapterConfig(meta["rank"], meta["alpha"], tuple(meta["target_layers"]))
        self.apply_adapters(config)
        for name, (a, b) in self.adapters.items():
            a.data = np.array(arrays[f"adapter.{name}.a"], dtype=np.float64)
            b.data = np.array(arrays[f"adapter.{name}.b"], dtype=np.float64)
        return meta
