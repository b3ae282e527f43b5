"""Checkpoint format round-trip and corruption handling."""

import json

import numpy as np
import pytest

from tailsid import checkpoint, metamodel
from tailsid.errors import (
    CheckpointError,
    ChecksumMismatchError,
    FormatVersionError,
    ShapeMismatchError,
)


@pytest.fixture
def saved(tmp_path, tiny_model_config):
    params = metamodel.init_params(tiny_model_config, np.random.default_rng(1))
    path = tmp_path / "model.ckpt"
    checkpoint.save_checkpoint(params, tiny_model_config, path)
    return params, tiny_model_config, path


def _edit_manifest(path, mutate):
    raw = path.read_bytes()
    head, payload = raw.split(b"\n", 1)
    manifest = json.loads(head)
    mutate(manifest)
    path.write_bytes(json.dumps(manifest).encode() + b"\n" + payload)


def test_roundtrip_bit_exact(saved, tiny_task):
    params, config, path = saved
    loaded, loaded_config = checkpoint.load_checkpoint(path)
    assert loaded_config == config
    assert list(loaded) == list(params)
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name])
    a = metamodel.forward(params, config, tiny_task)
    b = metamodel.forward(loaded, loaded_config, tiny_task)
    np.testing.assert_array_equal(a.mu, b.mu)
    np.testing.assert_array_equal(a.sigma, b.sigma)


def test_truncated_payload_is_checksum_error(saved):
    _, _, path = saved
    raw = path.read_bytes()
    path.write_bytes(raw[:-20])
    with pytest.raises(ChecksumMismatchError, match="truncated"):
        checkpoint.load_checkpoint(path)


def test_corrupted_byte_is_checksum_error(saved):
    _, _, path = saved
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatchError, match="checksum"):
        checkpoint.load_checkpoint(path)


def test_wrong_shape_names_offending_array(saved):
    _, _, path = saved

    def mutate(manifest):
        manifest["arrays"][3]["shape"] = [7, 7]

    name = json.loads(path.read_bytes().split(b"\n", 1)[0])["arrays"][3]["name"]
    _edit_manifest(path, mutate)
    with pytest.raises(ShapeMismatchError, match=name):
        checkpoint.load_checkpoint(path)


def test_version_mismatch(saved):
    _, _, path = saved
    _edit_manifest(path, lambda m: m.update(format_version=99))
    with pytest.raises(FormatVersionError):
        checkpoint.load_checkpoint(path)


def test_foreign_file_rejected(tmp_path):
    path = tmp_path / "not_a_checkpoint.bin"
    path.write_bytes(b"\x00\x01\x02 not json\n payload")
    with pytest.raises(CheckpointError):
        checkpoint.load_checkpoint(path)


def test_nonfinite_rejected(saved, tiny_model_config):
    params, config, path = saved
    bad = dict(params)
    bad["enc_embed.w"] = np.full_like(params["enc_embed.w"], np.nan)
    checkpoint.save_checkpoint(bad, config, path)
    with pytest.raises(CheckpointError, match="non-finite"):
        checkpoint.load_checkpoint(path)


def test_extras_and_aux_arrays_roundtrip(saved):
    params, config, path = saved
    aux = {"opt.m.enc_embed.w": np.ones_like(params["enc_embed.w"])}
    checkpoint.save_checkpoint(params, config, path, extra={"iteration": 5}, aux_arrays=aux)
    arrays, loaded_config, extra = checkpoint.load_full_checkpoint(path)
    assert extra["iteration"] == 5
    assert loaded_config == config
    np.testing.assert_array_equal(arrays["opt.m.enc_embed.w"], aux["opt.m.enc_embed.w"])
    model_only, _ = checkpoint.load_checkpoint(path)
    assert set(model_only) == set(params)


def test_float64_params_saved_as_float32(tmp_path, tiny_model_config):
    params = metamodel.init_params(tiny_model_config, np.random.default_rng(2), dtype=np.float64)
    path = tmp_path / "f64.ckpt"
    checkpoint.save_checkpoint(params, tiny_model_config, path)
    loaded, _ = checkpoint.load_checkpoint(path)
    for name in params:
        assert loaded[name].dtype == np.float32
        np.testing.assert_array_equal(loaded[name], params[name].astype(np.float32))
