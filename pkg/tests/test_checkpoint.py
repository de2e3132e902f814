#!/usr/bin/env python3

import numpy as np
import pytest

from dynamic_portfolio import checkpoint, policy_net, utils
from dynamic_portfolio.checkpoint import CheckpointCodec, CheckpointRecord, FieldType
from dynamic_portfolio.market_data import Standardizer


# --- Field Types --- #

@pytest.mark.parametrize("value, expected", [
    ("params", FieldType.PARAMS),
    (4, FieldType.PARAMS),
    (FieldType.SEED, FieldType.SEED),
    ("feature_std", FieldType.FEATURE_STD),
])
def test_field_type_coerce(value, expected):
    assert FieldType.coerce(value) is expected


@pytest.mark.parametrize("value", ["weights", 99, None])
def test_field_type_coerce_invalid(value):
    with pytest.raises(ValueError):
        FieldType.coerce(value)


def test_field_codes_are_unique():
    codes = [f.code for f in FieldType]
    assert len(codes) == len(set(codes))


# --- Encoding --- #

def test_encode_field_layout():
    assert CheckpointCodec()._encode_field(FieldType.LABEL, b"ab") == bytearray(b"\x01\x02\x00\x00\x00ab")


def test_encoded_checkpoint_starts_with_magic():
    blob = CheckpointCodec().encode(CheckpointRecord(policy_net.init_params([2, 2], seed=0)))
    assert blob[:4] == checkpoint.MAGIC
    assert blob[4] == checkpoint.VERSION


def test_round_trip_preserves_forward_outputs():
    params = policy_net.init_params([6, 5, 3], seed=7)
    std = Standardizer(np.array([0.1, 0.2, 0.3]), np.array([1.0, 2.0, 3.0]))
    record = CheckpointRecord(params, label="sharpe_policy", lookback=2, standardizer=std)
    decoded = CheckpointCodec().decode(CheckpointCodec().encode(record))

    assert decoded.label == "sharpe_policy"
    assert decoded.lookback == 2
    assert decoded.params.sizes == [6, 5, 3]
    assert decoded.params.seed == 7
    np.testing.assert_array_equal(decoded.standardizer.mean, std.mean)
    np.testing.assert_array_equal(decoded.standardizer.std, std.std)
    x = np.random.default_rng(0).normal(size=(4, 6))
    np.testing.assert_array_equal(policy_net.forward(decoded.params, x)[0], policy_net.forward(params, x)[0])


def test_optional_fields_absent():
    params = policy_net.MlpParams([(np.ones((1, 1)), np.zeros(1))])
    decoded = CheckpointCodec().decode(CheckpointCodec().encode(CheckpointRecord(params)))
    assert decoded.params.seed is None
    assert decoded.lookback is None
    assert decoded.standardizer is None


# --- Decoding Errors --- #

def test_corrupted_byte_fails_checksum():
    blob = CheckpointCodec().encode(CheckpointRecord(policy_net.init_params([3, 2], seed=0)))
    blob[10] ^= 0xFF
    with pytest.raises(utils.ChecksumError):
        CheckpointCodec().decode(blob)


def test_decode_requires_bytes():
    with pytest.raises(TypeError):
        CheckpointCodec().decode("not bytes")


def test_decode_too_short():
    with pytest.raises(ValueError):
        CheckpointCodec().decode(bytearray(b"DP"))


def test_decode_bad_magic():
    codec = CheckpointCodec()
    body = bytearray(b"XXXX\x01")
    blob = body + bytearray(codec._crc_calc.checksum(bytes(body)).to_bytes(2, "little"))
    with pytest.raises(ValueError, match="magic"):
        codec.decode(blob)


def test_decode_missing_params_field():
    codec = CheckpointCodec()
    body = bytearray(checkpoint.MAGIC) + bytearray([checkpoint.VERSION])
    body += codec._encode_field(FieldType.LABEL, b"x")
    blob = body + bytearray(codec._crc_calc.checksum(bytes(body)).to_bytes(2, "little"))
    with pytest.raises(ValueError, match="missing"):
        codec.decode(blob)


# --- Files --- #

def test_save_and_load(tmp_path):
    params = policy_net.init_params([4, 2], seed=3)
    path = checkpoint.save_params(tmp_path / "policy.ckpt", params, label="ppo_actor", lookback=5)
    record = checkpoint.load_params(path)
    assert record.label == "ppo_actor"
    assert record.lookback == 5
    np.testing.assert_array_equal(record.params.flat(), params.flat())


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        checkpoint.load_params(tmp_path / "nope.ckpt")
