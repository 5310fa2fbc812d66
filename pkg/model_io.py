"""
Binary model file formats.

MDF1 (float model) and MDQ1 (quantized model), both little-endian:

    MDF1: "MDF1" | version u16 | config JSON (u32 length) | parameter block
    MDQ1: "MDQ1" | version u16 | config JSON (u32 length) | layer count u32 |
          per layer: name (u16 length) | k u16 | centroids f32[k] |
                     packed index bytes (u64 length) |
          parameter block (side parameters)

    parameter block: count u32 | per parameter: name (u16 length) | rank u8 |
                     extents u32[rank] | f32 data

The config JSON is {"network": ..., "metadata": ...}; every size function
below gives the exact byte count the writers produce.
"""

import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

from errors import ModelFormatError, ModelMagicError, ModelTruncatedError, ModelVersionError
from network import ModelState, NetworkConfig
from utils import ensure_parent_dir

FLOAT_MAGIC = b"MDF1"
QUANT_MAGIC = b"MDQ1"
FORMAT_VERSION = 1


def encode_config(network: NetworkConfig, metadata: Dict[str, Any]) -> bytes:
    """Canonical (sorted, compact) UTF-8 JSON of the config block."""
    return json.dumps({"network": network.to_dict(), "metadata": metadata},
                      sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelTruncatedError(
                f"{self.path}: truncated at byte {self.pos} (need {n} more, file has {len(self.data)})"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def name(self) -> str:
        (length,) = self.unpack("H")
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ModelFormatError(f"{self.path}: invalid UTF-8 name at byte {self.pos}") from e


def _read_preamble(reader: _Reader, magic: bytes) -> Dict[str, Any]:
    found = reader.take(4) if len(reader.data) >= 4 else reader.data
    if found != magic:
        raise ModelMagicError(f"{reader.path}: bad magic {found!r} (expected {magic!r})")
    (version,) = reader.unpack("H")
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"{reader.path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    (length,) = reader.unpack("I")
    try:
        config = json.loads(reader.take(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"{reader.path}: malformed config JSON: {e}") from e
    if not isinstance(config, dict) or "network" not in config:
        raise ModelFormatError(f"{reader.path}: config JSON lacks a network description")
    return config


def _preamble(magic: bytes, config_json: bytes) -> bytes:
    return magic + struct.pack("<HI", FORMAT_VERSION, len(config_json)) + config_json


# ---------------------------------------------------------------------------
# Parameter block
# ---------------------------------------------------------------------------

def encode_parameters(params: Dict[str, np.ndarray]) -> bytes:
    """Encode named float tensors (stored as f32) in dict order."""
    parts = [struct.pack("<I", len(params))]
    for name, value in params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def _decode_parameters(reader: _Reader) -> "OrderedDict[str, np.ndarray]":
    (count,) = reader.unpack("I")
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        name = reader.name()
        (rank,) = reader.unpack("B")
        shape = reader.unpack(f"{rank}I") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(reader.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    return params


def parameter_entry_size(name: str, shape: Tuple[int, ...]) -> int:
    """Bytes one tensor occupies in a parameter block."""
    return 2 + len(name.encode("utf-8")) + 1 + 4 * len(shape) + 4 * int(np.prod(shape))


def parameter_block_size(shapes: Dict[str, Tuple[int, ...]]) -> int:
    """Bytes of a parameter block holding tensors of the given shapes."""
    return 4 + sum(parameter_entry_size(name, tuple(shape)) for name, shape in shapes.items())


# ---------------------------------------------------------------------------
# MDF1
# ---------------------------------------------------------------------------

def _check_parameters(config: NetworkConfig, params: Dict[str, np.ndarray], path: str) -> None:
    expected = config.param_shapes()
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ModelFormatError(f"{path}: parameters do not match the network (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if tuple(params[name].shape) != tuple(shape):
            raise ModelFormatError(f"{path}: parameter '{name}' has shape {params[name].shape}, expected {shape}")


def encode_model(model: ModelState) -> bytes:
    """Serialize a float model to MDF1 bytes."""
    return _preamble(FLOAT_MAGIC, encode_config(model.config, model.metadata)) + encode_parameters(model.parameters)


def decode_model(data: bytes, path: str = "<bytes>") -> ModelState:
    """
    Parse MDF1 bytes.

    Raises:
        ModelMagicError, ModelVersionError, ModelTruncatedError: Distinct format problems
        ModelFormatError: Parameters inconsistent with the stored network
    """
    reader = _Reader(data, path)
    config_data = _read_preamble(reader, FLOAT_MAGIC)
    network = NetworkConfig.from_dict(config_data["network"])
    params = _decode_parameters(reader)
    if reader.pos != len(data):
        raise ModelFormatError(f"{path}: {len(data) - reader.pos} trailing bytes")
    _check_parameters(network, params, path)
    return ModelState(config=network, parameters=params, metadata=config_data.get("metadata", {}))


def save_model(model: ModelState, path: str) -> int:
    """
    Write a float model file.

    Returns:
        Number of bytes written
    """
    data = encode_model(model)
    ensure_parent_dir(path)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_model(path: str) -> ModelState:
    """Read a float model file written by save_model."""
    with open(path, "rb") as f:
        return decode_model(f.read(), path)


def model_file_size(model: ModelState) -> int:
    """Exact MDF1 size of a model, from the layout arithmetic."""
    header = 4 + 2 + 4 + len(encode_config(model.config, model.metadata))
    shapes = {name: value.shape for name, value in model.parameters.items()}
    return header + parameter_block_size(shapes)


def read_magic(path: str) -> bytes:
    """First four bytes of a file (used to tell MDF1 from MDQ1)."""
    with open(path, "rb") as f:
        return f.read(4)


# ---------------------------------------------------------------------------
# MDQ1
# ---------------------------------------------------------------------------

@dataclass
class QuantizedLayerRecord:
    """One quantized tensor as stored on disk."""

    name: str
    centroids: np.ndarray  # f32[k]
    packed: bytes


@dataclass
class QuantizedPayload:
    """Decoded content of an MDQ1 file."""

    network: NetworkConfig
    metadata: Dict[str, Any]
    layers: List[QuantizedLayerRecord]
    side_parameters: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def index_bits(k: int) -> int:
    """Bits per cluster index: ceil(log2 k), at least 1."""
    return max(1, int(math.ceil(math.log2(k)))) if k > 1 else 1


def packed_size(count: int, k: int) -> int:
    """Bytes of count indices packed at index_bits(k) bits each."""
    return (count * index_bits(k) + 7) // 8


def encode_quantized(payload: QuantizedPayload) -> bytes:
    """Serialize a quantized model to MDQ1 bytes."""
    parts = [_preamble(QUANT_MAGIC, encode_config(payload.network, payload.metadata)),
             struct.pack("<I", len(payload.layers))]
    for layer in payload.layers:
        encoded = layer.name.encode("utf-8")
        k = int(layer.centroids.shape[0])
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<H", k))
        parts.append(np.ascontiguousarray(layer.centroids, dtype="<f4").tobytes())
        parts.append(struct.pack("<Q", len(layer.packed)))
        parts.append(bytes(layer.packed))
    parts.append(encode_parameters(payload.side_parameters))
    return b"".join(parts)


def decode_quantized(data: bytes, path: str = "<bytes>") -> QuantizedPayload:
    """
    Parse MDQ1 bytes.

    Index ranges are not checked here; dequantization reports corrupt indices.
    """
    reader = _Reader(data, path)
    config_data = _read_preamble(reader, QUANT_MAGIC)
    network = NetworkConfig.from_dict(config_data["network"])
    shapes = network.param_shapes()

    (count,) = reader.unpack("I")
    layers = []
    for _ in range(count):
        name = reader.name()
        if name not in shapes:
            raise ModelFormatError(f"{path}: quantized tensor '{name}' is not a network parameter")
        (k,) = reader.unpack("H")
        if k < 1:
            raise ModelFormatError(f"{path}: '{name}' has an empty codebook")
        centroids = np.frombuffer(reader.take(4 * k), dtype="<f4").astype(np.float32)
        (length,) = reader.unpack("Q")
        expected = packed_size(int(np.prod(shapes[name])), k)
        if length != expected:
            raise ModelFormatError(f"{path}: '{name}' index stream has {length} bytes, expected {expected}")
        layers.append(QuantizedLayerRecord(name=name, centroids=centroids, packed=reader.take(length)))

    side = _decode_parameters(reader)
    if reader.pos != len(data):
        raise ModelFormatError(f"{path}: {len(data) - reader.pos} trailing bytes")
    stored = {layer.name for layer in layers} | set(side)
    if stored != set(shapes) or len(layers) + len(side) != len(shapes):
        raise ModelFormatError(f"{path}: stored tensors do not cover the network parameters exactly once")
    for name, value in side.items():
        if tuple(value.shape) != tuple(shapes[name]):
            raise ModelFormatError(f"{path}: parameter '{name}' has shape {value.shape}, expected {shapes[name]}")
    return QuantizedPayload(network=network, metadata=config_data.get("metadata", {}),
                            layers=layers, side_parameters=side)


def quantized_layer_size(name: str, count: int, k: int) -> int:
    """Bytes of one MDQ1 layer record: name, k, codebook and packed indices."""
    return 2 + len(name.encode("utf-8")) + 2 + 4 * k + 8 + packed_size(count, k)


def quantized_header_size(network: NetworkConfig, metadata: Dict[str, Any]) -> int:
    """Bytes before the first layer record (magic, version, config, layer count)."""
    return 4 + 2 + 4 + len(encode_config(network, metadata)) + 4
