import json
import warnings

import numpy as np
import pytest

from mciat.checkpoint import (
    BLOB,
    MANIFEST,
    Checkpoint,
    CheckpointError,
    ConfigMismatchWarning,
    config_hash,
    load_checkpoint,
    save_checkpoint,
)
from mciat.encoder import EncoderConfig, ViTEncoder


def _ckpt():
    gen = np.random.default_rng(0)
    return Checkpoint(
        params={"w": gen.standard_normal((3, 4)).astype(np.float32), "b": np.zeros(4, np.float32), "s": np.float32(2.5)},
        buffers={"mu": gen.standard_normal((2, 5)).astype(np.float32)},
        config={"a": 1, "b": [1, 2]},
        step=7,
        meta={"mode": 4},
    )


def test_roundtrip_values(tmp_path):
    save_checkpoint(tmp_path, _ckpt())
    back = load_checkpoint(tmp_path)
    for name, arr in _ckpt().params.items():
        np.testing.assert_array_equal(back.params[name], arr)
        assert back.params[name].dtype == np.float32
    np.testing.assert_array_equal(back.buffers["mu"], _ckpt().buffers["mu"])
    assert (back.step, back.meta, back.config) == (7, {"mode": 4}, {"a": 1, "b": [1, 2]})
    assert list(back.params) == ["w", "b", "s"]


def test_save_load_save_is_byte_identical(tmp_path):
    save_checkpoint(tmp_path / "a", _ckpt())
    save_checkpoint(tmp_path / "b", load_checkpoint(tmp_path / "a"))
    for f in (MANIFEST, BLOB):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_manifest_layout(tmp_path):
    save_checkpoint(tmp_path, _ckpt())
    m = json.loads((tmp_path / MANIFEST).read_text())
    assert len(m["entries"]) == 3 and len(m["buffers"]) == 1
    offsets = [e["offset"] for e in m["entries"] + m["buffers"]]
    lengths = [e["length"] for e in m["entries"] + m["buffers"]]
    assert offsets == list(np.cumsum([0] + lengths[:-1]))
    assert m["blob_length"] == sum(lengths) == (tmp_path / BLOB).stat().st_size == 4 * (12 + 4 + 1 + 10)
    assert m["config_hash"] == config_hash({"b": [1, 2], "a": 1})


def test_blob_little_endian_float32(tmp_path):
    save_checkpoint(tmp_path, Checkpoint(params={"x": np.array([1.0, -2.0])}))
    assert (tmp_path / BLOB).read_bytes() == np.array([1.0, -2.0], dtype="<f4").tobytes()


def test_truncated_blob_names_entry(tmp_path):
    save_checkpoint(tmp_path, _ckpt())
    blob = tmp_path / BLOB
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="'mu'"):
        load_checkpoint(tmp_path)


def test_extra_bytes_rejected(tmp_path):
    save_checkpoint(tmp_path, _ckpt())
    blob = tmp_path / BLOB
    blob.write_bytes(blob.read_bytes() + b"\0" * 4)
    with pytest.raises(CheckpointError, match="manifest expects"):
        load_checkpoint(tmp_path)


def test_bad_entry_length_rejected(tmp_path):
    save_checkpoint(tmp_path, _ckpt())
    m = json.loads((tmp_path / MANIFEST).read_text())
    m["entries"][0]["shape"] = [5, 4]
    (tmp_path / MANIFEST).write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="'w'"):
        load_checkpoint(tmp_path)


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path)


def test_config_mismatch_warns(tmp_path):
    save_checkpoint(tmp_path, _ckpt())
    with pytest.warns(ConfigMismatchWarning):
        load_checkpoint(tmp_path, expected_config={"a": 2})
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_checkpoint(tmp_path, expected_config={"b": [1, 2], "a": 1})


def test_encoder_state_roundtrip(tmp_path):
    cfg = EncoderConfig(dim=8, depth=2, heads=2, patch_len=8, n_tokens=4)
    enc = ViTEncoder(cfg, np.random.default_rng(0))
    save_checkpoint(tmp_path, Checkpoint(params=enc.state_dict()))
    other = ViTEncoder(cfg, np.random.default_rng(1))
    other.load_state_dict(load_checkpoint(tmp_path).params)
    x = np.random.default_rng(2).random((2, 4, 8)).astype(np.float32)
    np.testing.assert_array_equal(enc(x, np.arange(4)).output.data, other(x, np.arange(4)).output.data)
