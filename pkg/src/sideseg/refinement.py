"""Multi-scale refinement: tapped encoder features -> two-scale hierarchy.

Each refinement layer projects one tapped encoder activation to the refine
width, deconvolves it to the H/8 and H/4 scales, gates it pixel-wise with a
tanh-bounded channel MLP, and adds the result into a running accumulator pair.
"""

import numpy as np

from . import autodiff as ad
from .blocks import add_bn_params, add_conv_block_params, batch_norm
from .errors import ConfigError, ShapeError


def gate(x, w1, b1, w2, b2):
    """Pixel-wise gating: tanh(w2 . relu(w1 . x + b1) + b2) * x, per pixel.

    Linear layers act on the channel vector at each pixel; |output| <= |x|
    elementwise since |tanh| <= 1.
    """
    b, c, h, w = x.data.shape
    tokens = ad.transpose(x, (0, 2, 3, 1))                      # (B, h, w, C)
    hid = ad.relu(ad.add(ad.matmul(tokens, ad.transpose(w1, (1, 0))), b1))
    weights = ad.tanh(ad.add(ad.matmul(hid, ad.transpose(w2, (1, 0))), b2))
    gated = ad.mul(weights, tokens)
    return ad.transpose(gated, (0, 3, 1, 2))


class Refiner:
    def __init__(self, embed_dim, refine_width, tap_indices, depth, prefix="mrm."):
        taps = list(tap_indices)
        if not taps:
            raise ConfigError("refinement needs at least one tap index")
        if any(t < 0 or t >= depth for t in taps):
            raise ConfigError(f"tap indices {taps} out of range for depth {depth}")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ConfigError(f"tap indices must be strictly increasing, got {taps}")
        self.embed_dim = embed_dim
        self.refine_width = refine_width
        self.tap_indices = taps
        self.prefix = prefix

    @property
    def layer_count(self):
        return len(self.tap_indices)

    def register(self, store, rng, dtype):
        cw = self.refine_width
        for k in range(self.layer_count):
            p = f"{self.prefix}layer{k:02d}"
            add_conv_block_params(store, f"{p}.proj", self.embed_dim, cw, 1, rng, dtype)
            # 2x path: one (kernel 2, stride 2) transposed convolution
            store.add(f"{p}.up2.weight", _deconv_init(rng, cw, dtype), frozen=False)
            store.add(f"{p}.up2.bias", np.zeros(cw, dtype=dtype), frozen=False)
            # 4x path: two chained transposed convolutions, BN + ReLU between
            store.add(f"{p}.up4a.weight", _deconv_init(rng, cw, dtype), frozen=False)
            store.add(f"{p}.up4a.bias", np.zeros(cw, dtype=dtype), frozen=False)
            add_bn_params(store, f"{p}.up4.bn", cw, dtype)
            store.add(f"{p}.up4b.weight", _deconv_init(rng, cw, dtype), frozen=False)
            store.add(f"{p}.up4b.bias", np.zeros(cw, dtype=dtype), frozen=False)
            for scale in (1, 2):
                g = f"{p}.gate{scale}"
                store.add(f"{g}.w1", (rng.standard_normal((cw, cw)) * 0.02).astype(dtype),
                          frozen=False)
                store.add(f"{g}.b1", np.zeros(cw, dtype=dtype), frozen=False)
                store.add(f"{g}.w2", (rng.standard_normal((cw, cw)) * 0.02).astype(dtype),
                          frozen=False)
                store.add(f"{g}.b2", np.zeros(cw, dtype=dtype), frozen=False)

    def init_hierarchy(self, batch, grid_hw, dtype):
        """Zero accumulators at 2x and 4x the encoder grid."""
        h, w = grid_hw
        half = ad.Tensor(np.zeros((batch, self.refine_width, 2 * h, 2 * w), dtype=dtype))
        quarter = ad.Tensor(np.zeros((batch, self.refine_width, 4 * h, 4 * w), dtype=dtype))
        return half, quarter

    def project_and_upsample(self, pv, trunk_feat, k, mode):
        """Project a tapped activation and deconvolve to the two target scales."""
        p = f"{self.prefix}layer{k:02d}"
        from .blocks import conv1x1_block

        proj = conv1x1_block(pv, f"{p}.proj", trunk_feat, mode)
        half = ad.conv_transpose2x2(proj, pv(f"{p}.up2.weight"), pv(f"{p}.up2.bias"))
        mid = ad.conv_transpose2x2(proj, pv(f"{p}.up4a.weight"), pv(f"{p}.up4a.bias"))
        mid = ad.relu(batch_norm(pv, f"{p}.up4.bn", mid, mode))
        quarter = ad.conv_transpose2x2(mid, pv(f"{p}.up4b.weight"), pv(f"{p}.up4b.bias"))
        return half, quarter

    def gate_layer(self, pv, x, k, scale):
        g = f"{self.prefix}layer{k:02d}.gate{scale}"
        return gate(x, pv(f"{g}.w1"), pv(f"{g}.b1"), pv(f"{g}.w2"), pv(f"{g}.b2"))

    def step(self, pv, trunk_feat, prev_pair, k, mode):
        """Gate the upsampled features and add them onto the accumulator pair."""
        half, quarter = self.project_and_upsample(pv, trunk_feat, k, mode)
        new_pair = []
        for scale, (fresh, prev) in enumerate(zip((half, quarter), prev_pair), start=1):
            if prev.data.shape != fresh.data.shape:
                raise ShapeError(
                    f"hierarchy accumulator at scale {scale} has shape {prev.data.shape}, "
                    f"expected {fresh.data.shape}"
                )
            new_pair.append(ad.add(self.gate_layer(pv, fresh, k, scale), prev))
        return tuple(new_pair)


def _deconv_init(rng, cw, dtype):
    return (rng.standard_normal((cw, cw, 2, 2)) * np.sqrt(2.0 / (cw * 4))).astype(dtype)
