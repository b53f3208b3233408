"""Full model assembly: frozen encoder + side adapter + refinement + decoder.

Owns the ParamStore (backbone.* frozen, everything else trainable), the
component toggles, parameter counting, and checkpoint IO. Component toggles
rewire the forward pass:

  csa + mrm/ffd   interleaved adapter schedule, hierarchy taps, fusion decoder
  csa only        adapter schedule, fallback decoder on the side feature
  mrm/ffd only    plain encoder, hierarchy taps, fusion decoder fed by a
                  1x1-projected final encoder feature in place of the side one
  neither         plain encoder, fallback decoder on the final encoder feature
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backbone import Backbone, BackboneConfig
from .blocks import add_conv_block_params, add_conv_params, conv1x1_block
from .errors import ConfigError, ShapeError
from .fusion_decoder import FusionDecoder
from .refinement import Refiner
from .side_adapter import SideAdapter
from .store import ParamStore, ParamView, load_checkpoint, save_checkpoint

__all__ = [
    "ModelConfig", "Model", "build", "count_parameters",
    "save_checkpoint", "load_checkpoint", "model_from_checkpoint",
    "toy_config", "tiny_config",
]


@dataclass
class ModelConfig:
    backbone: BackboneConfig
    side_width: int
    refine_width: int
    csa_enabled: bool = True
    mrm_ffd_enabled: bool = True
    mrm_tap_indices: list = None
    image_size: tuple = (64, 64)
    seed: int = 0
    dtype: str = "float32"
    csa_init_policy: str = "zeros"

    def validate(self):
        self.backbone.validate()
        if self.side_width <= 0 or self.refine_width <= 0:
            raise ConfigError("side_width and refine_width must be positive")
        h, w = self.image_size
        if h % 16 or w % 16:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 16")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.mrm_tap_indices is not None:
            taps = list(self.mrm_tap_indices)
            if any(t < 0 or t >= self.backbone.depth for t in taps):
                raise ConfigError(f"tap indices {taps} out of range")
            if any(b <= a for a, b in zip(taps, taps[1:])):
                raise ConfigError(f"tap indices must be strictly increasing, got {taps}")

    def taps(self):
        if self.mrm_tap_indices is not None:
            return list(self.mrm_tap_indices)
        return list(range(self.backbone.depth))

    def to_dict(self):
        return {
            "backbone": {
                "embed_dim": self.backbone.embed_dim,
                "depth": self.backbone.depth,
                "num_heads": self.backbone.num_heads,
                "mlp_ratio": self.backbone.mlp_ratio,
                "patch_size": self.backbone.patch_size,
            },
            "side_width": self.side_width,
            "refine_width": self.refine_width,
            "csa_enabled": self.csa_enabled,
            "mrm_ffd_enabled": self.mrm_ffd_enabled,
            "mrm_tap_indices": self.mrm_tap_indices,
            "image_size": list(self.image_size),
            "seed": self.seed,
            "dtype": self.dtype,
            "csa_init_policy": self.csa_init_policy,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            bb = BackboneConfig(**d["backbone"])
            cfg = cls(
                backbone=bb,
                side_width=d["side_width"],
                refine_width=d["refine_width"],
                csa_enabled=d.get("csa_enabled", True),
                mrm_ffd_enabled=d.get("mrm_ffd_enabled", True),
                mrm_tap_indices=d.get("mrm_tap_indices"),
                image_size=tuple(d.get("image_size", (64, 64))),
                seed=d.get("seed", 0),
                dtype=d.get("dtype", "float32"),
                csa_init_policy=d.get("csa_init_policy", "zeros"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad model config: {exc}") from exc
        cfg.validate()
        return cfg


def toy_config(**overrides):
    """Desk-scale default: 64x64 images over a 4-block encoder."""
    cfg = ModelConfig(
        backbone=BackboneConfig(embed_dim=32, depth=4, num_heads=4, mlp_ratio=4.0),
        side_width=16,
        refine_width=8,
        image_size=(64, 64),
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


def tiny_config(**overrides):
    """Gradient-audit scale: well under 20k trainable parameters."""
    cfg = ModelConfig(
        backbone=BackboneConfig(embed_dim=8, depth=2, num_heads=2, mlp_ratio=2.0),
        side_width=4,
        refine_width=4,
        mrm_tap_indices=[0, 1],
        image_size=(32, 32),
        dtype="float64",
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


class Model:
    def __init__(self, config, store, backbone, adapter, refiner, decoder):
        self.config = config
        self.store = store
        self.backbone = backbone
        self.adapter = adapter
        self.refiner = refiner
        self.decoder = decoder

    def forward(self, images, mode="eval", capture=None):
        """Full pass; returns the (B, 1, H, W) logit Tensor."""
        logits, _ = self.run(images, mode=mode, capture=capture)
        return logits

    def logits(self, images, mode="eval"):
        return self.forward(images, mode=mode).data

    def run(self, images, mode="eval", capture=None):
        """Full pass; returns (logit Tensor, ParamView holding the touched params).

        `capture`, if a dict, is filled with intermediate arrays
        (per_block, side, hierarchy) for inspection.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = images if isinstance(images, ad.Tensor) else ad.Tensor(images)
        if x.data.ndim != 4 or x.data.shape[1] != 3:
            raise ShapeError(f"expected images of shape (B, 3, H, W), got {x.data.shape}")
        if x.data.min() < 0.0 or x.data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        cfg = self.config
        pv = ParamView(self.store)

        trunk = self.backbone.patch_embed(pv, x)
        grid = trunk.data.shape[2:]
        side = self.adapter.init_feature(pv, trunk) if self.adapter else None
        hier = (self.refiner.init_hierarchy(x.data.shape[0], grid, trunk.data.dtype)
                if self.refiner else None)
        tap_set = {t: k for k, t in enumerate(self.refiner.tap_indices)} if self.refiner else {}

        per_block = []
        for j in range(cfg.backbone.depth):
            if self.adapter:
                trunk, side = self.adapter.step(pv, side, trunk, j + 1, mode)
            trunk = self.backbone.block_forward(pv, trunk, j)
            per_block.append(trunk)
            if j in tap_set:
                hier = self.refiner.step(pv, trunk, hier, tap_set[j], mode)
        if self.adapter:
            trunk, side = self.adapter.step(pv, side, trunk, cfg.backbone.depth + 1, mode)

        if self.decoder is not None:
            stream = side if self.adapter else self.decoder.bridge(pv, per_block[-1], mode)
            logits = self.decoder.forward(pv, stream, hier, mode)
        else:
            feat = side if self.adapter else per_block[-1]
            logits = _fallback_decode(pv, feat, mode)

        if logits.data.shape[2:] != tuple(16 * g for g in grid):
            raise ShapeError(
                f"decoder produced {logits.data.shape[2:]}, expected "
                f"{tuple(16 * g for g in grid)}"
            )
        if capture is not None:
            capture["per_block"] = [t.data for t in per_block]
            capture["side"] = None if side is None else side.data
            capture["hierarchy"] = None if hier is None else (hier[0].data, hier[1].data)
            capture["logits"] = logits.data
        return logits, pv


def _fallback_decode(pv, feat, mode):
    proj = conv1x1_block(pv, "fallback.proj", feat, mode)
    up = ad.upsample_bilinear(proj, 16)
    return ad.conv2d(up, pv("fallback.head.weight"), pv("fallback.head.bias"))


def build(config: ModelConfig) -> Model:
    """Deterministically materialize a model from its config."""
    config.validate()
    dtype = np.dtype(config.dtype)
    rng = np.random.default_rng(config.seed)
    store = ParamStore()
    store.meta = {"model": config.to_dict()}

    backbone = Backbone(config.backbone)
    backbone.register(store, rng, dtype)

    adapter = None
    if config.csa_enabled:
        adapter = SideAdapter(config.backbone.embed_dim, config.side_width,
                              config.backbone.depth, init_policy=config.csa_init_policy)
        adapter.register(store, rng, dtype)

    refiner = decoder = None
    if config.mrm_ffd_enabled:
        refiner = Refiner(config.backbone.embed_dim, config.refine_width,
                          config.taps(), config.backbone.depth)
        refiner.register(store, rng, dtype)
        bridge = None if config.csa_enabled else config.backbone.embed_dim
        decoder = FusionDecoder(config.side_width, config.refine_width,
                                bridge_width=bridge)
        decoder.register(store, rng, dtype)
    else:
        fb_in = config.side_width if config.csa_enabled else config.backbone.embed_dim
        add_conv_block_params(store, "fallback.proj", fb_in, config.side_width, 1, rng, dtype)
        # same output-stage gain reasoning as the fusion decoder: the head
        # cannot rescale normalized features into saturation on short schedules
        store["fallback.proj.bn.gamma"].array[...] = 8.0
        add_conv_params(store, "fallback.head", config.side_width, 1, 1, rng, dtype)

    return Model(config, store, backbone, adapter, refiner, decoder)


def count_parameters(store, which="all"):
    """Exact element count of parameters matching the filter (buffers excluded)."""
    return store.count(which)


def model_from_checkpoint(path):
    """Rebuild a model from a checkpoint whose meta embeds the config."""
    store = load_checkpoint(path)
    if not store.meta or "model" not in store.meta:
        raise ConfigError("checkpoint carries no model config in its meta block")
    config = ModelConfig.from_dict(store.meta["model"])
    model = build(config)
    ours = set(model.store.entries)
    theirs = set(store.entries)
    if ours != theirs:
        missing = sorted(ours - theirs)[:3]
        extra = sorted(theirs - ours)[:3]
        raise ConfigError(
            f"checkpoint does not match its declared config (missing {missing}, extra {extra})"
        )
    for name, e in store.entries.items():
        built = model.store.entries[name]
        if built.array.shape != e.array.shape:
            raise ConfigError(f"checkpoint entry {name!r} has shape {e.array.shape}, "
                              f"expected {built.array.shape}")
        built.array[...] = e.array
    model.store.meta = store.meta
    return model
