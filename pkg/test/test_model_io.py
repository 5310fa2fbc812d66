#!/usr/bin/env python3
"""
Tests for the MDF1 / MDQ1 model file formats.
"""

import os
import struct
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import ModelFormatError, ModelMagicError, ModelTruncatedError, ModelVersionError
from model_io import (
    decode_model,
    encode_model,
    index_bits,
    load_model,
    model_file_size,
    packed_size,
    parameter_entry_size,
    read_magic,
    save_model,
)
from network import init_model, squeezenet_config


def test_save_load_save_is_byte_identical(tmp_path):
    model = init_model(squeezenet_config(), seed=1)
    first = str(tmp_path / "a.mdf")
    second = str(tmp_path / "b.mdf")
    size = save_model(model, first)
    loaded = load_model(first)
    save_model(loaded, second)
    with open(first, "rb") as f1, open(second, "rb") as f2:
        assert f1.read() == f2.read()
    assert size == os.path.getsize(first)
    assert read_magic(first) == b"MDF1"
    for name, value in model.parameters.items():
        np.testing.assert_array_equal(loaded.parameters[name], value)
    assert loaded.metadata == model.metadata


def test_size_formula_matches_writer():
    model = init_model(squeezenet_config(input_size=30), seed=2)
    assert model_file_size(model) == len(encode_model(model))
    assert parameter_entry_size("conv1.weight", (32, 3, 3, 3)) == 2 + 12 + 1 + 16 + 4 * 864


def test_default_size_near_reference():
    model = init_model(squeezenet_config(input_size=20), seed=3)
    kb = model_file_size(model) / 1000.0
    assert abs(kb - 549.4) <= 0.1 * 549.4


def test_rejects_bad_magic_version_and_truncation():
    data = encode_model(init_model(squeezenet_config(), seed=4))
    with pytest.raises(ModelMagicError):
        decode_model(b"XXXX" + data[4:])
    with pytest.raises(ModelVersionError):
        decode_model(data[:4] + struct.pack("<H", 9) + data[6:])
    with pytest.raises(ModelTruncatedError):
        decode_model(data[:-10])
    with pytest.raises(ModelMagicError):
        decode_model(b"MD")
    with pytest.raises(ModelFormatError):
        decode_model(data + b"\x00")


def test_format_errors_share_a_base():
    data = encode_model(init_model(squeezenet_config(), seed=5))
    for broken in (b"ABCD" + data[4:], data[:100]):
        with pytest.raises(ModelFormatError):
            decode_model(broken)


def test_index_bits():
    assert index_bits(1) == 1
    assert index_bits(2) == 1
    assert index_bits(3) == 2
    assert index_bits(16) == 4
    assert index_bits(17) == 5
    assert index_bits(256) == 8
    assert packed_size(10000, 16) == 5000
    assert packed_size(3, 2) == 1


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
