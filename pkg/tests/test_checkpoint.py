"""Checkpoint format: bit-exact roundtrips, integrity, named diffs."""
import numpy as np
import pytest

from mltr import autodiff as ad
from mltr.checkpoint import (load_into_model, read_checkpoint, save_model,
                             write_checkpoint)
from mltr.config import RunConfig, config_to_doc
from mltr.errors import CheckpointError
from mltr.latent import BackboneSpec
from mltr.model import Model, ModelConfig


def tiny_model(seed=0, dim=16):
    cfg = ModelConfig(height=16, width=16, channels=1, patch=4, dim=dim, heads=2,
                      enc_depth=1, dec_depth=1, mlp_ratio=2.0,
                      backbone=BackboneSpec(stages=[(4, 3, 2)]))
    return Model(cfg, seed=seed)


def tiny_doc():
    run = RunConfig()
    run.model = tiny_model().config
    return config_to_doc(run)


def test_save_load_save_byte_identical(tmp_path, rng):
    model = tiny_model()
    doc = tiny_doc()
    p1, p2 = tmp_path / "a.mltr", tmp_path / "b.mltr"
    save_model(p1, model, doc)
    model2 = tiny_model(seed=99)
    doc2 = load_into_model(p1, model2)
    save_model(p2, model2, doc2)
    assert p1.read_bytes() == p2.read_bytes()


def test_tensor_roundtrip_bit_exact(tmp_path, rng):
    tensors = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(7).astype(np.float64),
        "scalar": np.array(3.5, dtype=np.float32),
    }
    path = tmp_path / "t.mltr"
    write_checkpoint(path, {"k": 1}, tensors)
    doc, back = read_checkpoint(path)
    assert doc == {"k": 1}
    assert list(back) == list(tensors)
    for name in tensors:
        assert back[name].dtype == tensors[name].dtype
        assert np.array_equal(back[name], tensors[name])


def test_truncated_file_fails_closed(tmp_path):
    model = tiny_model()
    path = tmp_path / "c.mltr"
    save_model(path, model, tiny_doc())
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    fresh = tiny_model(seed=1)
    before = {k: v.data.copy() for k, v in fresh.params().items()}
    with pytest.raises(CheckpointError, match="corrupt|checksum"):
        load_into_model(path, fresh)
    # no partial assignment happened
    for k, v in fresh.params().items():
        assert np.array_equal(v.data, before[k])


def test_bitflip_detected_by_checksum(tmp_path):
    path = tmp_path / "d.mltr"
    save_model(path, tiny_model(), tiny_doc())
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0x40
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        read_checkpoint(path)


def test_future_version_rejected(tmp_path):
    path = tmp_path / "e.mltr"
    save_model(path, tiny_model(), tiny_doc())
    blob = bytearray(path.read_bytes())
    import struct
    import zlib
    blob[4:8] = struct.pack("<I", 99)
    body = bytes(blob[:-4])
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    with pytest.raises(CheckpointError, match="version 99"):
        read_checkpoint(path)


def test_shape_mismatch_lists_tensor_names(tmp_path):
    path = tmp_path / "f.mltr"
    save_model(path, tiny_model(dim=16), tiny_doc())
    wrong_cfg = ModelConfig(height=16, width=16, channels=1, patch=4, dim=32,
                            heads=2, enc_depth=1, dec_depth=1, mlp_ratio=2.0,
                            backbone=BackboneSpec(stages=[(4, 3, 2)]))
    wrong = Model(wrong_cfg, seed=0)
    with pytest.raises(CheckpointError, match="patch.weight"):
        load_into_model(path, wrong)


def test_missing_and_unexpected_tensors_reported(tmp_path):
    model = tiny_model()
    tensors = {name: t.data for name, t in model.params().items()}
    removed = next(iter(tensors))
    del tensors[removed]
    tensors["extra.bogus"] = np.zeros(3, np.float32)
    path = tmp_path / "g.mltr"
    write_checkpoint(path, tiny_doc(), tensors)
    with pytest.raises(CheckpointError) as err:
        load_into_model(path, tiny_model(seed=2))
    assert removed in str(err.value)
    assert "extra.bogus" in str(err.value)


def test_logits_identical_after_roundtrip(tmp_path, rng):
    model = tiny_model(seed=4)
    x = rng.uniform(0, 1, (1, 16, 16)).astype(np.float32)
    before = model.forward_infer(x)
    path = tmp_path / "h.mltr"
    save_model(path, model, tiny_doc())
    other = tiny_model(seed=77)
    load_into_model(path, other)
    after = other.forward_infer(x)
    assert np.array_equal(before, after)
