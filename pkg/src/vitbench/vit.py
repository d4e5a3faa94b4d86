"""Vision transformer classifier: patch partition, embedding, encoder, head.

The forward path follows the classic recipe: split the image into square
patches, flatten and project them, prepend a class token, add learned
positional embeddings, run a stack of pre-norm transformer encoder blocks,
and read the class token through a linear head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor


@dataclass
class ViTConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    num_layers: int = 2
    mlp_ratio: float = 2.0
    num_classes: int = 3
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.image_size, self.channels, self.patch_size, self.embed_dim,
               self.num_heads, self.num_classes) < 1 or self.num_layers < 0:
            raise ConfigurationError("all ViT config counts must be >= 1")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        # class token at row 0
        return self.num_patches + 1

    @property
    def mlp_hidden(self) -> int:
        return round(self.mlp_ratio * self.embed_dim)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "channels": self.channels,
            "patch_size": self.patch_size, "embed_dim": self.embed_dim,
            "num_heads": self.num_heads, "num_layers": self.num_layers,
            "mlp_ratio": self.mlp_ratio, "num_classes": self.num_classes,
            "dropout": self.dropout,
        }


def partition_and_flatten(image: np.ndarray, patch_size: int) -> np.ndarray:
    """C x H x W image -> N x (P*P*C) patch matrix, row-major over the grid.

    Within a patch the flattening order is (channel, row, col); the
    transform is lossless, see :func:`unpartition`.
    """
    c, h, w = image.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigurationError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    # (C, gh, p, gw, p) -> (gh, gw, C, p, p)
    patches = image.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    return patches.reshape(gh * gw, c * p * p).copy()


def unpartition(patches: np.ndarray, patch_size: int, channels: int, h: int, w: int) -> np.ndarray:
    """Exact inverse of :func:`partition_and_flatten`."""
    p = patch_size
    gh, gw = h // p, w // p
    arr = patches.reshape(gh, gw, channels, p, p).transpose(2, 0, 3, 1, 4)
    return arr.reshape(channels, h, w).copy()


def embed_patches(patches: Tensor, w_proj: Tensor, bias: Tensor) -> Tensor:
    """Affine projection of flattened patches into the embedding dimension."""
    if patches.shape[1] != w_proj.shape[0]:
        raise DimensionError(
            f"patch width {patches.shape[1]} does not match projection rows {w_proj.shape[0]}"
        )
    return T.add(T.matmul(patches, w_proj), bias)


def add_positional(embeddings: Tensor, cls_token: Tensor, pos_table: Tensor) -> Tensor:
    """Prepend the class token, then add the positional table elementwise."""
    n, d = embeddings.shape
    if pos_table.shape[0] != n + 1:
        raise ConfigurationError(
            f"positional table has {pos_table.shape[0]} rows, expected {n + 1}"
        )
    seq = T.concat([T.reshape(cls_token, (1, d)), embeddings], axis=0)
    return T.add(seq, pos_table)


def multi_head_attention(x: Tensor, block: dict, num_heads: int, return_weights: bool = False):
    """Scaled dot-product attention over num_heads subspaces of width D/h."""
    t, d = x.shape
    if d % num_heads:
        raise ConfigurationError(f"embed dim {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    q = T.add(T.matmul(x, block["attn.wq"]), block["attn.bq"])
    k = T.add(T.matmul(x, block["attn.wk"]), block["attn.bk"])
    v = T.add(T.matmul(x, block["attn.wv"]), block["attn.bv"])
    scale = Tensor(1.0 / np.sqrt(dh))
    heads = []
    weights = []
    for i in range(num_heads):
        qi = T.slice_axis(q, 1, i * dh, (i + 1) * dh)
        ki = T.slice_axis(k, 1, i * dh, (i + 1) * dh)
        vi = T.slice_axis(v, 1, i * dh, (i + 1) * dh)
        scores = T.mul(T.matmul(qi, T.transpose(ki)), scale)
        a = T.softmax(scores, axis=1)
        weights.append(a)
        heads.append(T.matmul(a, vi))
    out = T.add(T.matmul(T.concat(heads, axis=1), block["attn.wo"]), block["attn.bo"])
    if return_weights:
        return out, weights
    return out


def _mlp(x: Tensor, block: dict) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, block["mlp.w1"]), block["mlp.b1"]))
    return T.add(T.matmul(h, block["mlp.w2"]), block["mlp.b2"])


class ViTClassifier:
    """Patch embedder + positional table + encoder blocks + linear head.

    Parameters live in ``self.params`` keyed by dotted names; the name set
    is a deterministic function of the config.
    """

    kind = "vit"

    def __init__(self, config: ViTConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.train_mode = False
        self._drop_rng = np.random.default_rng(seed + 1)
        rng = np.random.default_rng(seed)
        d = config.embed_dim

        def normal(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        def ones(*shape):
            return Tensor(np.ones(shape), requires_grad=True)

        p = self.params
        p["patch_proj.w"] = normal(config.patch_dim, d)
        p["patch_proj.b"] = zeros(d)
        p["cls_token"] = zeros(d)
        p["pos_table"] = normal(config.seq_len, d)
        hidden = config.mlp_hidden
        for i in range(config.num_layers):
            pre = f"blocks.{i}."
            p[pre + "norm1.gamma"] = ones(d)
            p[pre + "norm1.beta"] = zeros(d)
            for nm in ("wq", "wk", "wv", "wo"):
                p[pre + "attn." + nm] = normal(d, d)
            for nm in ("bq", "bk", "bv", "bo"):
                p[pre + "attn." + nm] = zeros(d)
            p[pre + "norm2.gamma"] = ones(d)
            p[pre + "norm2.beta"] = zeros(d)
            p[pre + "mlp.w1"] = normal(d, hidden)
            p[pre + "mlp.b1"] = zeros(hidden)
            p[pre + "mlp.w2"] = normal(hidden, d)
            p[pre + "mlp.b2"] = zeros(d)
        p["final_norm.gamma"] = ones(d)
        p["final_norm.beta"] = zeros(d)
        p["head.w"] = normal(d, config.num_classes)
        p["head.b"] = zeros(config.num_classes)

    def block_params(self, i: int) -> dict:
        pre = f"blocks.{i}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def backbone_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("head.")]

    def head_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("head.")]

    def encode(self, image: np.ndarray) -> Tensor:
        """C x H x W image -> T x D encoder output (after the final norm)."""
        cfg = self.config
        if image.shape != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ConfigurationError(
                f"image shape {image.shape} does not match config "
                f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})"
            )
        patches = Tensor(partition_and_flatten(image, cfg.patch_size))
        emb = embed_patches(patches, self.params["patch_proj.w"], self.params["patch_proj.b"])
        seq = add_positional(emb, self.params["cls_token"], self.params["pos_table"])
        return self.encode_sequence(seq)

    def encode_sequence(self, seq: Tensor) -> Tensor:
        """Run the encoder stack on an already-embedded T x D sequence."""
        x = seq
        for i in range(self.config.num_layers):
            blk = self.block_params(i)
            attn_in = T.layer_norm(x, blk["norm1.gamma"], blk["norm1.beta"])
            a = multi_head_attention(attn_in, blk, self.config.num_heads)
            a = self._maybe_drop(a)
            x = T.add(x, a)
            mlp_in = T.layer_norm(x, blk["norm2.gamma"], blk["norm2.beta"])
            m = self._maybe_drop(_mlp(mlp_in, blk))
            x = T.add(x, m)
        return T.layer_norm(x, self.params["final_norm.gamma"], self.params["final_norm.beta"])

    def _maybe_drop(self, x: Tensor) -> Tensor:
        if self.train_mode and self.config.dropout > 0.0:
            return T.dropout(x, self.config.dropout, self._drop_rng)
        return x

    def forward_logits(self, image: np.ndarray) -> Tensor:
        encoded = self.encode(image)
        cls = T.slice_axis(encoded, 0, 0, 1)
        return T.reshape(
            T.add(T.matmul(cls, self.params["head.w"]), self.params["head.b"]),
            (self.config.num_classes,),
        )

    def forward_batch(self, images: np.ndarray) -> Tensor:
        """B x C x H x W batch -> B x C logits."""
        return T.stack([self.forward_logits(img) for img in images], axis=0)

    def classify(self, image: np.ndarray):
        """Deterministic inference: (probabilities, argmax label, lowest-index ties)."""
        logits = self.forward_logits(image)
        probs = T.softmax(logits, axis=0).data
        return probs, int(np.argmax(probs))
