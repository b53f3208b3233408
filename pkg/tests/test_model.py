import numpy as np
import pytest

from sideseg.errors import (
    CheckpointIntegrityError,
    CheckpointManifestError,
    CheckpointVersionError,
    ConfigError,
)
from sideseg.model import (
    ModelConfig,
    build,
    count_parameters,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    tiny_config,
    toy_config,
)
from sideseg.backbone import BackboneConfig
from sideseg.store import ParamStore

from helpers import bytes_equal, zero_conv_block
import oracles


def test_build_is_deterministic():
    a = build(toy_config())
    b = build(toy_config())
    assert a.store.state_bytes() == b.store.state_bytes()
    assert list(a.store.entries) == list(b.store.entries)


def test_disabled_adapter_registers_no_parameters():
    model = build(toy_config(csa_enabled=False))
    assert not model.store.names("csa.")
    assert model.store.names("ffd.bridge.")


def test_disabled_refinement_uses_fallback():
    model = build(toy_config(mrm_ffd_enabled=False))
    assert not model.store.names("mrm.") and not model.store.names("ffd.")
    assert model.store.names("fallback.")


def test_config_validation_rejects_bad_dims():
    with pytest.raises(ConfigError, match="divisible by 16"):
        toy_config(image_size=(60, 64))
    with pytest.raises(ConfigError, match="tap indices"):
        toy_config(mrm_tap_indices=[0, 9])


def test_frozen_partition_is_total():
    model = build(toy_config())
    for name, e in model.store.param_items():
        if name.startswith("backbone."):
            assert e.frozen, name
        else:
            assert not e.frozen, name
    prefixes = {"backbone.", "csa.", "mrm.", "ffd."}
    for name, _ in model.store.param_items():
        assert sum(name.startswith(p) for p in prefixes) == 1, name


def test_trainable_counts_match_closed_forms():
    cfg = toy_config()
    model = build(cfg)
    c, c1, cw = cfg.backbone.embed_dim, cfg.side_width, cfg.refine_width
    depth = cfg.backbone.depth
    assert model.store.group_count("backbone.", "frozen") == oracles.backbone_count(
        c, depth, cfg.backbone.mlp_ratio)
    assert model.store.group_count("csa.", "trainable") == oracles.adapter_count(c, c1, depth)
    assert model.store.group_count("mrm.", "trainable") == oracles.refiner_count(c, cw, depth)
    assert model.store.group_count("ffd.", "trainable") == oracles.decoder_count(c1, cw)
    assert count_parameters(model.store, "all") == (
        count_parameters(model.store, "trainable") + count_parameters(model.store, "frozen"))


def test_component_toggles_change_counts_by_module_formulas():
    cfg = toy_config()
    c, c1, cw, depth = (cfg.backbone.embed_dim, cfg.side_width, cfg.refine_width,
                        cfg.backbone.depth)
    full = count_parameters(build(toy_config()).store, "trainable")
    csa_only = count_parameters(build(toy_config(mrm_ffd_enabled=False)).store, "trainable")
    mrm_only = count_parameters(build(toy_config(csa_enabled=False)).store, "trainable")
    neither = count_parameters(
        build(toy_config(csa_enabled=False, mrm_ffd_enabled=False)).store, "trainable")

    assert full == oracles.adapter_count(c, c1, depth) + oracles.refiner_count(c, cw, depth) \
        + oracles.decoder_count(c1, cw)
    assert csa_only == oracles.adapter_count(c, c1, depth) + oracles.fallback_count(c1, c1)
    assert mrm_only == oracles.refiner_count(c, cw, depth) \
        + oracles.decoder_count(c1, cw, bridge_cin=c)
    assert neither == oracles.fallback_count(c, c1)
    correction = oracles.fallback_count(c, c1) - oracles.fallback_count(c1, c1) \
        - oracles.conv_block_count(c, c1)
    assert full == csa_only + mrm_only - neither + correction


def test_count_parameters_worked_example():
    store = ParamStore()
    store.add("m.conv.weight", np.zeros((32, 16, 1, 1), dtype=np.float32), frozen=False)
    store.add("m.conv.bias", np.zeros(32, dtype=np.float32), frozen=False)
    store.add("m.bn.gamma", np.zeros(32, dtype=np.float32), frozen=False)
    store.add("m.bn.beta", np.zeros(32, dtype=np.float32), frozen=False)
    assert count_parameters(store) == 608


def test_count_parameters_empty_store():
    assert count_parameters(ParamStore()) == 0


def test_forward_shapes_across_image_sizes():
    for hw in (64, 96, 128):
        model = build(toy_config(image_size=(hw, hw)))
        img = np.random.default_rng(0).random((2, 3, hw, hw), dtype=np.float32)
        logits = model.logits(img)
        assert logits.shape == (2, 1, hw, hw)


def test_forward_rejects_out_of_range_images():
    model = build(tiny_config())
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        model.forward(np.full((1, 3, 32, 32), 1.5))


def test_zero_injection_invariance_against_plain_backbone():
    model = build(toy_config())
    for layer in model.adapter.coupled_layers():
        zero_conv_block(model.store, f"csa.layer{layer:02d}.expand")
    img = np.random.default_rng(1).random((2, 3, 64, 64), dtype=np.float32)
    capture = {}
    model.run(img, mode="eval", capture=capture)

    bare = build(toy_config(csa_enabled=False, mrm_ffd_enabled=False))
    assert bare.store.state_bytes("backbone.") == model.store.state_bytes("backbone.")
    capture_bare = {}
    bare.run(img, mode="eval", capture=capture_bare)
    for a, b in zip(capture["per_block"], capture_bare["per_block"]):
        assert bytes_equal(a, b)


def test_eval_forward_is_deterministic_and_batch_invariant():
    model = build(toy_config())
    img = np.random.default_rng(2).random((1, 3, 64, 64), dtype=np.float32)
    single = model.logits(img)
    again = model.logits(img)
    assert bytes_equal(single, again)
    doubled = model.logits(np.concatenate([img, img]))
    assert bytes_equal(doubled[0], single[0])
    assert bytes_equal(doubled[1], single[0])


def test_ablation_rows_all_forward():
    img = np.random.default_rng(3).random((2, 3, 64, 64), dtype=np.float32)
    for csa in (True, False):
        for mrm in (True, False):
            model = build(toy_config(csa_enabled=csa, mrm_ffd_enabled=mrm))
            assert model.logits(img).shape == (2, 1, 64, 64)


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_roundtrip_bit_identity(tmp_path):
    model = build(tiny_config())
    path = tmp_path / "m.ckpt"
    save_checkpoint(model.store, path)
    loaded = load_checkpoint(path)
    assert list(loaded.entries) == list(model.store.entries)
    for name, e in model.store.entries.items():
        other = loaded[name]
        assert bytes_equal(e.array, other.array)
        assert e.array.dtype == other.array.dtype
        assert (e.frozen, e.buffer) == (other.frozen, other.buffer)
    assert loaded.meta == model.store.meta


def test_checkpoint_truncation_detected(tmp_path):
    model = build(tiny_config())
    path = tmp_path / "m.ckpt"
    save_checkpoint(model.store, path)
    blob = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(blob[:-100])
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(tmp_path / "cut.ckpt")


def test_checkpoint_manifest_edit_detected(tmp_path):
    model = build(tiny_config())
    path = tmp_path / "m.ckpt"
    save_checkpoint(model.store, path)
    blob = path.read_bytes()
    head, _, payload = blob.partition(b"\nend\n")
    lines = head.split(b"\n")
    for i in range(len(lines) - 1, -1, -1):
        if lines[i].startswith(b"entry\t"):
            parts = lines[i].split(b"\t")
            name = parts[1].decode()
            shape = parts[3].split(b",")
            shape[0] = str(int(shape[0]) + 1).encode()
            parts[3] = b",".join(shape)
            lines[i] = b"\t".join(parts)
            break
    (tmp_path / "edited.ckpt").write_bytes(b"\n".join(lines) + b"\nend\n" + payload)
    with pytest.raises(CheckpointManifestError, match=name):
        load_checkpoint(tmp_path / "edited.ckpt")


def test_checkpoint_version_mismatch(tmp_path):
    model = build(tiny_config())
    path = tmp_path / "m.ckpt"
    save_checkpoint(model.store, path)
    blob = path.read_bytes().replace(b"sideseg-checkpoint 1", b"sideseg-checkpoint 9", 1)
    (tmp_path / "v9.ckpt").write_bytes(blob)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v9.ckpt")


def test_model_from_checkpoint_reproduces_forward(tmp_path):
    model = build(tiny_config())
    img = np.random.default_rng(4).random((1, 3, 32, 32))
    want = model.logits(img)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model.store, path)
    clone = model_from_checkpoint(path)
    assert bytes_equal(clone.logits(img), want)


def test_config_json_roundtrip():
    cfg = toy_config(csa_enabled=False, mrm_tap_indices=[1, 3], seed=9)
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert isinstance(again.backbone, BackboneConfig)
