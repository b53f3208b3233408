"""Convolutional side adapter: the trainable stream coupled to the encoder.

Each adapter layer expands the compressed side feature to the encoder width,
adds it into the encoder activation stream, then compresses the fused
activation back to the side width. Layer 0 initializes the side feature from
the patch embedding (all zeros by default); layers 1..depth run against the
input of each encoder block; a final layer runs against the encoder output,
so an encoder of depth N carries N + 2 adapter layers.
"""

import numpy as np

from . import autodiff as ad
from .blocks import add_conv_block_params, add_conv_params, conv1x1_block
from .errors import ConfigError, ShapeError


class SideAdapter:
    def __init__(self, embed_dim, side_width, depth, init_policy="zeros", prefix="csa."):
        if init_policy not in ("zeros", "project"):
            raise ConfigError(f"unknown side-feature init policy {init_policy!r}")
        self.embed_dim = embed_dim
        self.side_width = side_width
        self.depth = depth
        self.init_policy = init_policy
        self.prefix = prefix

    @property
    def layer_count(self):
        return self.depth + 2

    def coupled_layers(self):
        """Indices of the expand/compress layers (layer 0 is the initializer)."""
        return range(1, self.depth + 2)

    def register(self, store, rng, dtype):
        if self.init_policy == "project":
            add_conv_params(store, f"{self.prefix}layer00.init", self.embed_dim,
                            self.side_width, 1, rng, dtype)
        for i in self.coupled_layers():
            p = f"{self.prefix}layer{i:02d}"
            add_conv_block_params(store, f"{p}.expand", self.side_width, self.embed_dim,
                                  1, rng, dtype)
            add_conv_block_params(store, f"{p}.compress", self.embed_dim, self.side_width,
                                  1, rng, dtype)

    def init_feature(self, pv, patch_feat):
        """Side feature entering layer 1, built from the patch embedding."""
        b, _, h, w = patch_feat.data.shape
        if self.init_policy == "project":
            return ad.conv2d(patch_feat, pv(f"{self.prefix}layer00.init.weight"),
                             pv(f"{self.prefix}layer00.init.bias"))
        zeros = np.zeros((b, self.side_width, h, w), dtype=patch_feat.data.dtype)
        return ad.Tensor(zeros)

    def step(self, pv, side, trunk, layer, mode):
        """One adapter layer: returns (fused trunk, next side feature)."""
        if side.data.shape[0] != trunk.data.shape[0] or side.data.shape[2:] != trunk.data.shape[2:]:
            raise ShapeError(
                f"side/trunk shape mismatch at adapter layer {layer}: "
                f"{side.data.shape} vs {trunk.data.shape}"
            )
        p = f"{self.prefix}layer{layer:02d}"
        fused = ad.add(trunk, conv1x1_block(pv, f"{p}.expand", side, mode))
        next_side = conv1x1_block(pv, f"{p}.compress", fused, mode)
        return fused, next_side
