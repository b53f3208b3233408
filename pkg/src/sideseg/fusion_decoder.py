"""Feature fusion decoder: inject the two-scale hierarchy into the side stream.

Per scale, the hierarchical feature is projected and pooled into a half-
resolution "key" feature; a 3x3 conv fuses the key into the side stream, the
result is bilinearly doubled, and a second 3x3 conv fuses the full-resolution
feature. Two such stages climb H/16 -> H/8 -> H/4; a bilinear 4x upsample and
a 1x1 head emit full-resolution logits.
"""

from . import autodiff as ad
from .blocks import add_conv_block_params, add_conv_params, conv1x1_block, conv3x3_block
from .errors import ShapeError


class FusionDecoder:
    def __init__(self, side_width, refine_width, key_width=None, bridge_width=None,
                 prefix="ffd."):
        self.side_width = side_width
        self.refine_width = refine_width
        self.key_width = refine_width if key_width is None else key_width
        # when the side stream is disabled, a 1x1-projected encoder feature
        # stands in for it; bridge_width is that feature's channel count
        self.bridge_width = bridge_width
        self.prefix = prefix

    def register(self, store, rng, dtype):
        c1, cw, ck = self.side_width, self.refine_width, self.key_width
        if self.bridge_width is not None:
            add_conv_block_params(store, f"{self.prefix}bridge", self.bridge_width, c1,
                                  1, rng, dtype)
        add_conv_block_params(store, f"{self.prefix}in_proj", c1, c1, 1, rng, dtype)
        for scale in (1, 2):
            add_conv_block_params(store, f"{self.prefix}key_proj{scale}", cw, ck, 1, rng, dtype)
            add_conv_block_params(store, f"{self.prefix}stage{scale}.conv_a", c1 + ck, c1,
                                  3, rng, dtype)
            add_conv_block_params(store, f"{self.prefix}stage{scale}.conv_b", c1 + cw, c1,
                                  3, rng, dtype)
        # norm layers cap feature magnitudes, and on short schedules the head
        # cannot rescale logits into saturation by itself; a larger output-stage
        # gain puts the needed scale in place at init
        store[f"{self.prefix}stage2.conv_b.bn.gamma"].array[...] = 8.0
        add_conv_params(store, f"{self.prefix}head", c1, 1, 1, rng, dtype)

    def bridge(self, pv, trunk_feat, mode):
        return conv1x1_block(pv, f"{self.prefix}bridge", trunk_feat, mode)

    def key_pool(self, pv, feat, scale, mode):
        """Project then pool: avgpool2x2 + maxpool2x2 of the projected feature."""
        h, w = feat.data.shape[2:]
        if h % 2 or w % 2:
            raise ShapeError(f"key pooling needs even spatial dims, got {h}x{w}")
        proj = conv1x1_block(pv, f"{self.prefix}key_proj{scale}", feat, mode)
        return ad.add(ad.avgpool2x2(proj), ad.maxpool2x2(proj))

    def inject_stage(self, pv, x, key, full, stage, mode):
        """Fuse key then full-resolution features into the stream; doubles resolution."""
        if key.data.shape[2:] != x.data.shape[2:]:
            raise ShapeError(
                f"stage {stage}: key resolution {key.data.shape[2:]} does not match "
                f"stream resolution {x.data.shape[2:]}"
            )
        want = (2 * x.data.shape[2], 2 * x.data.shape[3])
        if full.data.shape[2:] != want:
            raise ShapeError(
                f"stage {stage}: full-resolution feature is {full.data.shape[2:]}, "
                f"expected {want}"
            )
        fused = conv3x3_block(pv, f"{self.prefix}stage{stage}.conv_a",
                              ad.concat([x, key], axis=1), mode)
        up = ad.upsample_bilinear(fused, 2)
        return conv3x3_block(pv, f"{self.prefix}stage{stage}.conv_b",
                             ad.concat([up, full], axis=1), mode)

    def forward(self, pv, side_feat, hierarchy, mode):
        """Decode side feature + hierarchy pair into (B, 1, H, W) logits."""
        half, quarter = hierarchy
        x = conv1x1_block(pv, f"{self.prefix}in_proj", side_feat, mode)
        grid = x.data.shape[2:]

        key1 = self.key_pool(pv, half, 1, mode)
        x = self.inject_stage(pv, x, key1, half, 1, mode)
        assert x.data.shape[2:] == (2 * grid[0], 2 * grid[1]), "resolution ladder violated"

        key2 = self.key_pool(pv, quarter, 2, mode)
        x = self.inject_stage(pv, x, key2, quarter, 2, mode)
        assert x.data.shape[2:] == (4 * grid[0], 4 * grid[1]), "resolution ladder violated"

        up = ad.upsample_bilinear(x, 4)
        logits = ad.conv2d(up, pv(f"{self.prefix}head.weight"), pv(f"{self.prefix}head.bias"))
        assert logits.data.shape[2:] == (16 * grid[0], 16 * grid[1]), "resolution ladder violated"
        return logits
