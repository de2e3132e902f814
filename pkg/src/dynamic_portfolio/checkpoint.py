#!/usr/bin/env python3

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import crc
import numpy as np

from dynamic_portfolio.market_data import Standardizer
from dynamic_portfolio.policy_net import MlpParams
from dynamic_portfolio.utils import ChecksumError

logger = logging.getLogger(__name__)

MAGIC = b"DPCK"
VERSION = 1
LENGTH_BYTES = 4
CHECKSUM_BYTES = 2


class FieldType(Enum):
    """
    Type codes of the TLV fields stored in a checkpoint.

    Each member defines its one-byte wire code and a label.

    Example:
        >>> FieldType.PARAMS.code
        4
        >>> FieldType.coerce("seed")
        <FieldType.SEED: (3, 'seed')>
    """
    LABEL = (1, "label")
    LAYER_SIZES = (2, "layer_sizes")
    SEED = (3, "seed")
    PARAMS = (4, "params")
    LOOKBACK = (5, "lookback")
    FEATURE_MEAN = (6, "feature_mean")
    FEATURE_STD = (7, "feature_std")

    @property
    def code(self) -> int:
        return self.value[0]

    @property
    def label(self) -> str:
        return self.value[1]

    @classmethod
    def coerce(cls, value: Union['FieldType', str, int]) -> 'FieldType':
        """
        Accept a member, its label, or its wire code.

        Raises:
            ValueError: If nothing matches.
        """
        if isinstance(value, cls):
            return value
        for member in cls:
            if value in (member.label, member.code):
                return member
        raise ValueError(f"Invalid value for {cls.__name__}: {value}")

    def __str__(self):
        return self.label


@dataclass(eq=False)
class CheckpointRecord:
    """
    Everything needed to rebuild a trained network and its feature scaling.

    Fields:
        params (MlpParams): Network parameters (layer sizes and seed included).
        label (str): Free-form role name, e.g. ``"sharpe_policy"`` or ``"ppo_actor"``.
        lookback (int, optional): Feature window length the network was trained with.
        standardizer (Standardizer, optional): Per-asset feature scaling fitted on training data.
    """
    params: MlpParams
    label: str = "policy"
    lookback: Optional[int] = None
    standardizer: Optional[Standardizer] = None


class CheckpointCodec:
    """
    Binary checkpoint encoder/decoder.

    Layout: ``MAGIC | version (uint8) | TLV fields | CRC (uint16, little endian)``,
    with each TLV field encoded as ``type (uint8) | length (uint32, little endian) | value``.

    Args:
        crc_ (crc.Crc16): CRC algorithm (default = CRC16-XMODEM).

    Usage:
        >>> codec = CheckpointCodec()
        >>> blob = codec.encode(CheckpointRecord(init_params([2, 2], seed=0)))
        >>> codec.decode(blob).params.sizes
        [2, 2]
    """

    def __init__(self, crc_=crc.Crc16.XMODEM):
        self._crc_calc = crc.Calculator(crc_)

    def encode(self, record: CheckpointRecord) -> bytearray:
        """Serialize ``record`` to bytes, checksum appended."""
        params = record.params
        body = bytearray(MAGIC) + bytearray([VERSION])
        body += self._encode_field(FieldType.LABEL, record.label.encode("utf-8"))
        body += self._encode_field(FieldType.LAYER_SIZES, np.asarray(params.sizes, dtype="<u4").tobytes())
        if params.seed is not None:
            body += self._encode_field(FieldType.SEED, int(params.seed).to_bytes(8, "little"))
        body += self._encode_field(FieldType.PARAMS, params.flat().astype("<f8").tobytes())
        if record.lookback is not None:
            body += self._encode_field(FieldType.LOOKBACK, int(record.lookback).to_bytes(4, "little"))
        if record.standardizer is not None and record.standardizer.is_fitted:
            body += self._encode_field(FieldType.FEATURE_MEAN, record.standardizer.mean.astype("<f8").tobytes())
            body += self._encode_field(FieldType.FEATURE_STD, record.standardizer.std.astype("<f8").tobytes())

        checksum = self._crc_calc.checksum(bytes(body))
        return body + bytearray(checksum.to_bytes(CHECKSUM_BYTES, "little"))

    def decode(self, data: bytearray) -> CheckpointRecord:
        """
        Parse a checkpoint produced by :meth:`encode`.

        Raises:
            TypeError: If ``data`` is not bytes-like.
            ChecksumError: If the CRC does not match.
            ValueError: On a bad magic, unsupported version, truncated field,
                or missing required field.
        """
        if not isinstance(data, (bytes, bytearray)):
            raise TypeError(f"Expected bytearray for checkpoint, got {type(data).__name__}")
        data = self._verify_and_extract_checksum(bytearray(data))
        if data[:len(MAGIC)] != MAGIC:
            raise ValueError("Not a checkpoint: bad magic bytes.")
        version = data[len(MAGIC)]
        if version != VERSION:
            raise ValueError(f"Unsupported checkpoint version {version}.")

        fields = self._split_fields(data[len(MAGIC) + 1:])
        for required in (FieldType.LAYER_SIZES, FieldType.PARAMS):
            if required not in fields:
                raise ValueError(f"Checkpoint is missing the {required} field.")

        sizes = np.frombuffer(bytes(fields[FieldType.LAYER_SIZES]), dtype="<u4").astype(int).tolist()
        seed = int.from_bytes(fields[FieldType.SEED], "little") if FieldType.SEED in fields else None
        flat = np.frombuffer(bytes(fields[FieldType.PARAMS]), dtype="<f8")
        params = MlpParams.from_flat(sizes, flat, seed)

        lookback = None
        if FieldType.LOOKBACK in fields:
            lookback = int.from_bytes(fields[FieldType.LOOKBACK], "little")
        standardizer = None
        if FieldType.FEATURE_MEAN in fields and FieldType.FEATURE_STD in fields:
            standardizer = Standardizer(np.frombuffer(bytes(fields[FieldType.FEATURE_MEAN]), dtype="<f8").copy(),
                                        np.frombuffer(bytes(fields[FieldType.FEATURE_STD]), dtype="<f8").copy())
        label = bytes(fields.get(FieldType.LABEL, b"policy")).decode("utf-8")
        return CheckpointRecord(params=params, label=label, lookback=lookback, standardizer=standardizer)

    def _encode_field(self, type_: FieldType, value_: bytes) -> bytearray:
        """
        Encode one TLV field.

        Example:
            >>> CheckpointCodec()._encode_field(FieldType.LABEL, b"ab")
            bytearray(b'\\x01\\x02\\x00\\x00\\x00ab')
        """
        type_ = FieldType.coerce(type_)
        length_ = len(value_).to_bytes(LENGTH_BYTES, "little")
        return bytearray([type_.code]) + bytearray(length_) + bytearray(value_)

    def _split_fields(self, data: bytearray) -> dict[FieldType, bytearray]:
        """Walk the TLV section and return its fields keyed by type."""
        fields = {}
        idx = 0
        while idx < len(data):
            if idx + 1 + LENGTH_BYTES > len(data):
                raise ValueError("Truncated checkpoint field header.")
            type_ = FieldType.coerce(int(data[idx]))
            length_ = int.from_bytes(data[idx + 1:idx + 1 + LENGTH_BYTES], "little")
            start = idx + 1 + LENGTH_BYTES
            if start + length_ > len(data):
                raise ValueError(f"Checkpoint field {type_} claims {length_} bytes, "
                                 f"only {len(data) - start} available.")
            fields[type_] = data[start:start + length_]
            idx = start + length_
        return fields

    def _verify_and_extract_checksum(self, data: bytearray) -> bytearray:
        """
        Validate the trailing CRC and return the data without it.

        Raises:
            ChecksumError: If the checksum does not match.
        """
        if len(data) < len(MAGIC) + 1 + CHECKSUM_BYTES:
            raise ValueError(f"Checkpoint too short ({len(data)} bytes).")
        sent = int.from_bytes(data[-CHECKSUM_BYTES:], "little")
        body = data[:-CHECKSUM_BYTES]
        expected = self._crc_calc.checksum(bytes(body))
        if expected != sent:
            raise ChecksumError("Checksum verification failed. "
                                f"Received: 0x{sent:04x}, Expected: 0x{expected:04x}")
        return body


def save_params(path: Union[str, Path], params: MlpParams, label: str = "policy",
                lookback: Optional[int] = None, standardizer: Optional[Standardizer] = None) -> Path:
    """Write a checkpoint file and return its path."""
    path = Path(path)
    record = CheckpointRecord(params=params, label=label, lookback=lookback, standardizer=standardizer)
    path.write_bytes(bytes(CheckpointCodec().encode(record)))
    logger.info("Saved %s checkpoint (%d parameters) to %s", label, params.n_params, path)
    return path


def load_params(path: Union[str, Path]) -> CheckpointRecord:
    """
    Read a checkpoint file.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    return CheckpointCodec().decode(bytearray(path.read_bytes()))
