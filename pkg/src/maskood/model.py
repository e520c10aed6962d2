"""Toy mask-classification model: encoder, pixel decoder, query decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import attention as A
from . import tensor as T
from .io import load_json, load_mten, save_json, save_mten

KINDS = ("ca", "ma", "gma")
LEVEL_STRIDES = (2, 4, 8)


@dataclass
class ModelConfig:
    height: int = 48
    width: int = 64
    embed_dim: int = 32
    num_queries: int = 8
    num_layers: int = 3
    num_classes: int = 6
    attention: str = "gma"
    seed: int = 0
    ffn_dim: int = 64
    scale_attention: bool = False

    def validate(self):
        if self.height % 8 or self.width % 8:
            raise T.DimensionError(f"image size {self.height}x{self.width} must be divisible by 8")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_queries < 1 or self.embed_dim < 1:
            raise ValueError("num_queries and embed_dim must be positive")
        if self.attention not in KINDS:
            raise ValueError(f"unknown attention kind {self.attention!r}")
        return self


@dataclass
class QueryOutput:
    class_logits: T.Tensor  # [...,N,K+1], last column = no-object
    mask_logits: T.Tensor  # [...,N,H,W]
    per_layer_mask_logits: list = field(default_factory=list)
    attention_weights: list = field(default_factory=list)


def init_bound(fan_in: int) -> float:
    return 1.0 / np.sqrt(fan_in)


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    c, f, k1 = cfg.embed_dim, cfg.ffn_dim, cfg.num_classes + 1
    shapes: dict[str, tuple] = {}
    for i in range(len(LEVEL_STRIDES)):
        cin = 3 if i == 0 else c
        shapes[f"enc{i}.w"] = (c, cin)
        shapes[f"enc{i}.b"] = (c, 1)
    shapes["pix.w"] = (c, c)
    shapes["pix.b"] = (c, 1)
    shapes["query.embed"] = (cfg.num_queries, c)
    for l in range(cfg.num_layers):
        p = f"layer{l}."
        shapes[p + "wq"] = (c, c)
        shapes[p + "wk"] = (c, c)
        shapes[p + "wv"] = (c, c)
        shapes[p + "bv"] = (c,)
        shapes[p + "ffn.w1"] = (c, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, c)
        shapes[p + "ffn.b2"] = (c,)
    shapes["cls.w"] = (c, k1)
    shapes["cls.b"] = (k1,)
    return shapes


def _fan_in(name: str, shape: tuple, cfg: ModelConfig) -> int:
    if name.startswith("enc") or name.startswith("pix"):
        return 3 if name == "enc0.w" or name == "enc0.b" else cfg.embed_dim
    if name.endswith("ffn.w2") or name.endswith("ffn.b2"):
        return cfg.ffn_dim
    return cfg.embed_dim


class Model:
    def __init__(self, config: ModelConfig, params: dict, dtype=np.float32):
        self.config = config
        self.params = {
            k: v if isinstance(v, T.Tensor) else T.Tensor(np.asarray(v, dtype=dtype), requires_grad=True)
            for k, v in params.items()
        }

    def parameters(self) -> dict[str, T.Tensor]:
        return self.params

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state):
        for k, v in state.items():
            self.params[k].data = np.asarray(v, dtype=np.float32).copy()

    def copy(self) -> "Model":
        return Model(ModelConfig(**asdict(self.config)), self.state())

    # -------------------------------------------------------------- stages

    def encode(self, images) -> list[T.Tensor]:
        """Feature maps at 1/2, 1/4, 1/8 resolution, each ``[B,C,h,w]``."""
        x = T.as_tensor(images)
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise T.DimensionError(f"image size {h}x{w} must be divisible by 8")
        maps = []
        for i in range(len(LEVEL_STRIDES)):
            x = T.avg_pool(x, 2)
            b, cin, hh, ww = x.shape
            flat = T.reshape(x, (b, cin, hh * ww))
            y = T.matmul(self.params[f"enc{i}.w"], flat) + self.params[f"enc{i}.b"]
            x = T.reshape(T.relu(y), (b, -1, hh, ww))
            maps.append(x)
        return maps

    def pixel_decode(self, pyramid) -> T.Tensor:
        """Full-resolution per-pixel embeddings ``[B,C,H,W]``."""
        size = (self.config.height, self.config.width)
        acc = None
        for fmap in pyramid:
            up = T.upsample_bilinear(fmap, size)
            acc = up if acc is None else acc + up
        b, c = acc.shape[:2]
        flat = T.reshape(acc, (b, c, size[0] * size[1]))
        out = T.matmul(self.params["pix.w"], flat) + self.params["pix.b"]
        return T.reshape(out, (b, c, size[0], size[1]))

    def mask_head(self, queries, embeddings) -> T.Tensor:
        b, c, h, w = embeddings.shape
        flat = T.reshape(embeddings, (b, c, h * w))
        return T.reshape(T.matmul(queries, flat), (b, queries.shape[-2], h, w))

    def class_head(self, queries) -> T.Tensor:
        return T.matmul(queries, self.params["cls.w"]) + self.params["cls.b"]

    def decoder_layer(self, index, queries, features, embeddings, prior_mask_probs, kind, return_weights=False):
        """One attention + feed-forward update of the queries.

        ``prior_mask_probs`` is ``[B,N,h,w]`` at the resolution of ``features``.
        Returns (queries', mask logits, class logits, attention weights).
        """
        if kind not in KINDS:
            raise ValueError(f"unknown attention kind {kind!r}")
        p = self.params
        pre = f"layer{index}."
        b, c, hh, ww = features.shape
        keys_in = T.transpose(T.reshape(features, (b, c, hh * ww)))
        q = T.matmul(queries, p[pre + "wq"])
        k = T.matmul(keys_in, p[pre + "wk"])
        v = T.matmul(keys_in, p[pre + "wv"]) + p[pre + "bv"]
        prior = None
        if prior_mask_probs is not None:
            prior = np.asarray(prior_mask_probs).reshape(b, queries.shape[-2], hh * ww)
        x, weights = A.attend(kind, queries, q, k, v, prior, scale=self.config.scale_attention, return_weights=True)
        hidden = T.relu(T.matmul(x, p[pre + "ffn.w1"]) + p[pre + "ffn.b1"])
        x = x + T.matmul(hidden, p[pre + "ffn.w2"]) + p[pre + "ffn.b2"]
        mask_logits = self.mask_head(x, embeddings)
        class_logits = self.class_head(x)
        return x, mask_logits, class_logits, (weights if return_weights else None)

    def forward(self, images, complement_priors=False, return_attention=False) -> QueryOutput:
        arr = images.data if isinstance(images, T.Tensor) else np.asarray(images)
        single = arr.ndim == 3
        x_img = images if isinstance(images, T.Tensor) else T.Tensor(arr.astype(np.float32))
        if single:
            x_img = T.reshape(x_img, (1,) + arr.shape)
        cfg = self.config
        pyramid = self.encode(x_img)
        emb = self.pixel_decode(pyramid)
        b = emb.shape[0]
        queries = T.Tensor(np.zeros((b, cfg.num_queries, cfg.embed_dim), dtype=np.float32)) + self.params["query.embed"]
        mask_logits = self.mask_head(queries, emb)
        # coarsest level first, round-robin
        order = list(reversed(range(len(pyramid))))
        per_layer, weights_all = [], []
        class_logits = None
        for l in range(cfg.num_layers):
            fmap = pyramid[order[l % len(order)]]
            stride = cfg.height // fmap.shape[-2]
            probs = _sigmoid_np(mask_logits.data)
            if complement_priors:
                probs = 1.0 - probs
            prior = probs.reshape(b, cfg.num_queries, cfg.height // stride, stride, cfg.width // stride, stride).mean(axis=(3, 5))
            queries, mask_logits, class_logits, w = self.decoder_layer(
                l, queries, fmap, emb, prior, cfg.attention, return_weights=return_attention
            )
            per_layer.append(mask_logits)
            if return_attention:
                weights_all.append(w)
        out = QueryOutput(class_logits, mask_logits, per_layer, weights_all)
        if single:
            out = QueryOutput(
                class_logits[0],
                mask_logits[0],
                [m[0] for m in per_layer],
                [w[0] for w in weights_all],
            )
        return out

    __call__ = forward


def _sigmoid_np(x):
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def init_model(config: ModelConfig) -> Model:
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in _param_shapes(config).items():
        a = init_bound(_fan_in(name, shape, config))
        params[name] = rng.uniform(-a, a, size=shape).astype(np.float32)
    return Model(config, params)


def semantic_map(out: QueryOutput) -> np.ndarray:
    """Per-pixel class evidence ``[...,K,H,W]`` (no-object column dropped)."""
    c = out.class_logits.data.astype(np.float64)
    c = np.exp(c - c.max(axis=-1, keepdims=True))
    c = c / c.sum(axis=-1, keepdims=True)
    m = _sigmoid_np(out.mask_logits.data)
    return np.einsum("...nk,...nhw->...khw", c[..., :-1], m)


def predict_labels(out: QueryOutput) -> np.ndarray:
    """Argmax class map with labels 1..K."""
    return np.argmax(semantic_map(out), axis=-3).astype(np.int32) + 1


# ------------------------------------------------------------------ checkpoints

def save_checkpoint(model: Model, path, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in sorted(model.params.items()):
        save_mten(path / f"{name}.mten", t.data)
        entries.append({"name": name, "shape": list(t.shape)})
    manifest = {"config": asdict(model.config), "params": entries}
    if extra:
        manifest.update(extra)
    save_json(path / "manifest.json", manifest)


def load_checkpoint(path) -> Model:
    path = Path(path)
    manifest = load_json(path / "manifest.json")
    cfg = ModelConfig(**manifest["config"])
    params = {}
    for entry in manifest["params"]:
        arr = load_mten(path / f"{entry['name']}.mten")
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"shape mismatch for {entry['name']}")
        params[entry["name"]] = arr
    return Model(cfg, params)
