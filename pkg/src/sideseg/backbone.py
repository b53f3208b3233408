"""Frozen ViT-style image encoder.

Patch embedding with 16x spatial downsampling, then a stack of pre-norm
attention + MLP blocks, all at (H/16, W/16) resolution. Per-block activations
are exposed for the side streams, and each block accepts an optional additive
injection on its input. All parameters are registered frozen; weight values
come from a seeded truncated normal, since every claim tested downstream is a
shape/coupling/freezing claim independent of the weights.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .blocks import layer_norm, truncated_normal
from .errors import ConfigError, NumericError, ShapeError

PATCH = 16


@dataclass
class BackboneConfig:
    embed_dim: int
    depth: int
    num_heads: int
    mlp_ratio: float = 4.0
    patch_size: int = PATCH

    def validate(self):
        if self.patch_size != PATCH:
            raise ConfigError(f"patch_size must be {PATCH}, got {self.patch_size}")
        if self.embed_dim <= 0 or self.depth <= 0 or self.num_heads <= 0:
            raise ConfigError("embed_dim, depth and num_heads must be positive")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")


@dataclass
class BackboneActivations:
    per_block: list   # activation after each block, all (B, C, H/16, W/16)
    final: "ad.Tensor"


class Backbone:
    def __init__(self, cfg: BackboneConfig, prefix="backbone."):
        cfg.validate()
        self.cfg = cfg
        self.prefix = prefix

    def register(self, store, rng, dtype):
        c = self.cfg.embed_dim
        hidden = int(round(c * self.cfg.mlp_ratio))
        std = 0.02
        store.add(f"{self.prefix}patch_embed.weight",
                  truncated_normal(rng, (c, 3, PATCH, PATCH), std, dtype), frozen=True)
        store.add(f"{self.prefix}patch_embed.bias", np.zeros(c, dtype=dtype), frozen=True)
        for j in range(self.cfg.depth):
            p = f"{self.prefix}block{j:02d}."
            store.add(f"{p}ln1.gamma", np.ones(c, dtype=dtype), frozen=True)
            store.add(f"{p}ln1.beta", np.zeros(c, dtype=dtype), frozen=True)
            for nm in ("q", "k", "v", "proj"):
                store.add(f"{p}attn.{nm}.weight",
                          truncated_normal(rng, (c, c), std, dtype), frozen=True)
                store.add(f"{p}attn.{nm}.bias", np.zeros(c, dtype=dtype), frozen=True)
            store.add(f"{p}ln2.gamma", np.ones(c, dtype=dtype), frozen=True)
            store.add(f"{p}ln2.beta", np.zeros(c, dtype=dtype), frozen=True)
            store.add(f"{p}mlp.fc1.weight",
                      truncated_normal(rng, (c, hidden), std, dtype), frozen=True)
            store.add(f"{p}mlp.fc1.bias", np.zeros(hidden, dtype=dtype), frozen=True)
            store.add(f"{p}mlp.fc2.weight",
                      truncated_normal(rng, (hidden, c), std, dtype), frozen=True)
            store.add(f"{p}mlp.fc2.bias", np.zeros(c, dtype=dtype), frozen=True)

    def patch_embed(self, pv, image):
        if not isinstance(image, ad.Tensor):
            image = ad.Tensor(image)
        b, c, h, w = image.data.shape
        if h % PATCH:
            raise ShapeError(f"image height {h} not divisible by {PATCH}")
        if w % PATCH:
            raise ShapeError(f"image width {w} not divisible by {PATCH}")
        if not np.all(np.isfinite(image.data)):
            raise NumericError("non-finite values in input image")
        return ad.conv2d(image, pv(f"{self.prefix}patch_embed.weight"),
                         pv(f"{self.prefix}patch_embed.bias"), stride=PATCH)

    def block_forward(self, pv, x, j):
        """One pre-norm attention + MLP block; shape-preserving."""
        cfg = self.cfg
        p = f"{self.prefix}block{j:02d}."
        bsz, c, h, w = x.data.shape
        t = x.data.shape[2] * x.data.shape[3]
        tokens = ad.transpose(ad.reshape(x, (bsz, c, t)), (0, 2, 1))   # (B, T, C)

        normed = layer_norm(tokens, pv(f"{p}ln1.gamma"), pv(f"{p}ln1.beta"))
        nh = cfg.num_heads
        dh = c // nh

        def heads(lin_name):
            y = ad.add(ad.matmul(normed, pv(f"{p}attn.{lin_name}.weight")),
                       pv(f"{p}attn.{lin_name}.bias"))
            return ad.transpose(ad.reshape(y, (bsz, t, nh, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = ad.softmax(logits, axis=-1)
        ctx = ad.matmul(attn, v)                                       # (B, nh, T, dh)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (bsz, t, c))
        ctx = ad.add(ad.matmul(ctx, pv(f"{p}attn.proj.weight")), pv(f"{p}attn.proj.bias"))
        tokens = ad.add(tokens, ctx)

        normed2 = layer_norm(tokens, pv(f"{p}ln2.gamma"), pv(f"{p}ln2.beta"))
        hidden = ad.gelu(ad.add(ad.matmul(normed2, pv(f"{p}mlp.fc1.weight")),
                                pv(f"{p}mlp.fc1.bias")))
        mlp_out = ad.add(ad.matmul(hidden, pv(f"{p}mlp.fc2.weight")), pv(f"{p}mlp.fc2.bias"))
        tokens = ad.add(tokens, mlp_out)

        out = ad.reshape(ad.transpose(tokens, (0, 2, 1)), (bsz, c, h, w))
        if not np.all(np.isfinite(out.data)):
            raise NumericError(f"non-finite activation leaving backbone block {j}")
        return out

    def encoder_forward(self, pv, image, injections=None):
        """Full encoder pass; `injections[j]` (or None) is added to block j's input."""
        depth = self.cfg.depth
        if injections is not None and len(injections) != depth:
            raise ShapeError(
                f"expected {depth} injections (one per block), got {len(injections)}"
            )
        x = self.patch_embed(pv, image)
        per_block = []
        for j in range(depth):
            if injections is not None and injections[j] is not None:
                inj = injections[j]
                if not isinstance(inj, ad.Tensor):
                    inj = ad.Tensor(inj)
                if inj.data.shape != x.data.shape:
                    raise ShapeError(
                        f"injection for block {j} has shape {inj.data.shape}, "
                        f"expected {x.data.shape}"
                    )
                x = ad.add(x, inj)
            x = self.block_forward(pv, x, j)
            per_block.append(x)
        return BackboneActivations(per_block=per_block, final=per_block[-1])
