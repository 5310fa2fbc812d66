"""
Trained quantization with per-layer weight sharing.

Every conv/dense weight tensor is clustered with 1-D k-means; the tensor is
then stored as a k-entry codebook plus bit-packed cluster indices. Biases and
batch-norm parameters stay full precision. Fine-tuning trains the centroids
with the summed gradients of their member weights while the assignments stay
frozen.
"""

import logging
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from chunker import shuffled_chunks
from dataset import PatchSet
from errors import CodebookCorruptionError, ConfigError, DatasetError, ModelMagicError, QuantizationError
from model_io import (
    FLOAT_MAGIC,
    QUANT_MAGIC,
    QuantizedLayerRecord,
    QuantizedPayload,
    decode_quantized,
    encode_quantized,
    index_bits,
    load_model,
    model_file_size,
    parameter_block_size,
    parameter_entry_size,
    quantized_header_size,
    quantized_layer_size,
    read_magic,
)
from network import EpochRecord, ModelState, NetworkConfig, TrainingLog, loss_and_grads
from stats import format_key_values, format_report, format_table, print_epoch_progress
from tensor_ops import AdamState, adam_step
from utils import ensure_parent_dir, format_number

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 300
MAX_K = 256


class KMeansResult(NamedTuple):
    """Clustering of one value list."""

    centroids: np.ndarray  # float64[k], ascending
    assignments: np.ndarray  # int64[n]
    inertia: float
    history: List[float]  # inertia after every Lloyd iteration


def _reseed_empty(x: np.ndarray, centroids: np.ndarray, assign: np.ndarray, k: int) -> None:
    # an empty cluster takes over the value farthest from its centroid
    for _ in range(k):
        counts = np.bincount(assign, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return
        j = int(empty[0])
        dist = np.abs(x - centroids[assign])
        far = int(dist.argmax())
        centroids[j] = x[far]
        assign[x == x[far]] = j


def kmeans_1d(values: np.ndarray, k: int, max_iter: int = MAX_ITERATIONS) -> KMeansResult:
    """
    Lloyd's k-means on scalar values.

    Centroids start evenly spaced over [min, max]. Ties go to the lower-index
    centroid. The loop stops when assignments repeat or after max_iter
    iterations. The result is reordered so centroids ascend.

    Args:
        values: Values to cluster (any shape, flattened)
        k: Cluster count, at most the number of distinct values
        max_iter: Iteration cap

    Returns:
        KMeansResult

    Raises:
        QuantizationError: k < 1 or k larger than the distinct-value count
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    distinct = np.unique(x).size
    if k < 1 or k > distinct:
        raise QuantizationError(f"cannot form {k} clusters from {distinct} distinct values")

    centroids = np.linspace(x.min(), x.max(), k)
    assign: Optional[np.ndarray] = None
    history: List[float] = []
    for iteration in range(max_iter):
        new = np.abs(x[:, None] - centroids[None, :]).argmin(axis=1)
        _reseed_empty(x, centroids, new, k)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        counts = np.bincount(assign, minlength=k)
        sums = np.bincount(assign, weights=x, minlength=k)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled]
        inertia = float(((x - centroids[assign]) ** 2).sum())
        history.append(inertia)
        logger.debug("kmeans k=%d iteration %d inertia %.9g", k, iteration + 1, inertia)

    order = np.argsort(centroids, kind="stable")
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    return KMeansResult(centroids=centroids[order], assignments=remap[assign], inertia=history[-1], history=history)


def pack_indices(indices: np.ndarray, bits: int) -> bytes:
    """
    Pack cluster ids MSB-first at a fixed bit width.

    Args:
        indices: Integer ids, each < 2**bits
        bits: Bits per id (1..8)

    Returns:
        ceil(len * bits / 8) bytes, zero-padded at the end
    """
    ids = np.asarray(indices, dtype=np.uint16).ravel()
    if ids.size and int(ids.max()) >= (1 << bits):
        raise QuantizationError(f"index {int(ids.max())} does not fit in {bits} bits")
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint16)
    bit_matrix = ((ids[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bit_matrix.ravel()).tobytes()


def unpack_indices(data: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of pack_indices."""
    raw = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=count * bits)
    weights = (1 << np.arange(bits - 1, -1, -1)).astype(np.int64)
    return raw.reshape(count, bits).astype(np.int64) @ weights


@dataclass
class LayerCodebook:
    """
    Shared weights of one tensor.

    Attributes:
        name: Parameter name (e.g. "fire1.expand3x3.weight")
        shape: Original tensor shape
        centroids: float32[k]
        indices: Cluster id of every weight, flattened in C order
    """

    name: str
    shape: Tuple[int, ...]
    centroids: np.ndarray
    indices: np.ndarray

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def bits(self) -> int:
        return index_bits(self.k)

    @property
    def count(self) -> int:
        return int(self.indices.size)

    @property
    def ascending(self) -> bool:
        """False once fine-tuning has moved centroids out of order."""
        return bool(np.all(np.diff(self.centroids) > 0))

    def packed(self) -> bytes:
        return pack_indices(self.indices, self.bits)

    def check(self) -> None:
        """
        Raises:
            CodebookCorruptionError: Some index >= k or size mismatch
        """
        if self.count != int(np.prod(self.shape)):
            raise CodebookCorruptionError(f"'{self.name}': {self.count} indices for shape {self.shape}")
        if self.count and int(self.indices.max()) >= self.k:
            raise CodebookCorruptionError(
                f"'{self.name}': index {int(self.indices.max())} out of range for k={self.k}"
            )
        if not np.all(np.isfinite(self.centroids)):
            raise CodebookCorruptionError(f"'{self.name}': non-finite centroid")

    def weights(self) -> np.ndarray:
        """Centroid lookup reshaped to the original tensor."""
        self.check()
        return self.centroids[self.indices].reshape(self.shape).astype(np.float32)


@dataclass
class QuantizedModel:
    """
    Network with codebook-compressed weight tensors.

    Attributes:
        config: Network description
        codebooks: Quantized tensors keyed by parameter name
        side_parameters: Full-precision tensors (biases, batch norm)
        metadata: Carried over from the source model
        warnings: Recoverable problems met while quantizing (e.g. k clamped)
    """

    config: NetworkConfig
    codebooks: "OrderedDict[str, LayerCodebook]"
    side_parameters: "OrderedDict[str, np.ndarray]"
    metadata: Dict[str, Any] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def _payload_metadata(self) -> Dict[str, Any]:
        metadata = dict(self.metadata)
        if self.warnings:
            metadata["warnings"] = list(self.warnings)
        return metadata

    def to_payload(self) -> QuantizedPayload:
        return QuantizedPayload(
            network=self.config,
            metadata=self._payload_metadata(),
            layers=[QuantizedLayerRecord(name=cb.name, centroids=cb.centroids, packed=cb.packed())
                    for cb in self.codebooks.values()],
            side_parameters=self.side_parameters,
        )

    @classmethod
    def from_payload(cls, payload: QuantizedPayload) -> 'QuantizedModel':
        shapes = payload.network.param_shapes()
        codebooks: "OrderedDict[str, LayerCodebook]" = OrderedDict()
        for layer in payload.layers:
            shape = tuple(shapes[layer.name])
            k = int(layer.centroids.shape[0])
            indices = unpack_indices(layer.packed, index_bits(k), int(np.prod(shape)))
            codebooks[layer.name] = LayerCodebook(name=layer.name, shape=shape,
                                                  centroids=layer.centroids, indices=indices)
        metadata = dict(payload.metadata)
        warnings = metadata.pop("warnings", [])
        return cls(config=payload.network, codebooks=codebooks,
                   side_parameters=payload.side_parameters, metadata=metadata, warnings=warnings)

    def file_size(self) -> int:
        """Exact MDQ1 size from the layout arithmetic."""
        size = quantized_header_size(self.config, self._payload_metadata())
        size += sum(quantized_layer_size(cb.name, cb.count, cb.k) for cb in self.codebooks.values())
        size += parameter_block_size({name: value.shape for name, value in self.side_parameters.items()})
        return size


@dataclass
class QuantizeConfig:
    """
    Quantization and fine-tuning settings.

    Attributes:
        k: Default cluster count for every conv/dense weight tensor
        layer_k: Per-tensor overrides keyed by parameter or layer name
        finetune_epochs: Centroid fine-tuning epochs
        finetune_lr: Adam learning rate for fine-tuning
        batch_size: Fine-tuning mini-batch size
        seed: Shuffle seed for fine-tuning
        shuffle: Shuffle before every fine-tuning epoch
    """

    k: int = 16
    layer_k: Dict[str, int] = field(default_factory=dict)
    finetune_epochs: int = 5
    finetune_lr: float = 1e-4
    batch_size: int = 256
    seed: int = 42
    shuffle: bool = True

    def __post_init__(self):
        for name, k in [("k", self.k)] + [(f"layer_k[{n}]", v) for n, v in self.layer_k.items()]:
            if not 2 <= k <= MAX_K:
                raise ConfigError(f"{name} must be in [2, {MAX_K}], got {k}")
        if self.finetune_lr < 0:
            raise ConfigError(f"finetune_lr must be >= 0, got {self.finetune_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def k_for(self, name: str) -> int:
        layer = name.split(".", 1)[0]
        return self.layer_k.get(name, self.layer_k.get(layer, self.k))


def quantizable_names(model: ModelState) -> List[str]:
    """Conv and dense weight tensors, in parameter order."""
    return [name for name in model.parameters if name.endswith(".weight")]


def _quantize_tensor(name: str, weights: np.ndarray, k: int) -> Tuple[LayerCodebook, Optional[str]]:
    distinct = int(np.unique(weights).size)
    warning = None
    if distinct < k:
        warning = f"{name}: only {distinct} distinct values, k clamped from {k} to {distinct}"
        logger.warning(warning)
        k = distinct
    result = kmeans_1d(weights, k)
    codebook = LayerCodebook(name=name, shape=tuple(weights.shape),
                             centroids=result.centroids.astype(np.float32),
                             indices=result.assignments)
    return codebook, warning


def quantize_model(model: ModelState, qcfg: QuantizeConfig, workers: int = 1) -> QuantizedModel:
    """
    Replace every conv/dense weight tensor by a codebook and cluster indices.

    Args:
        model: Trained float model
        qcfg: Cluster counts
        workers: Threads for clustering independent tensors

    Returns:
        QuantizedModel; warnings list k clamps
    """
    names = quantizable_names(model)
    jobs = [(name, model.parameters[name], qcfg.k_for(name)) for name in names]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: _quantize_tensor(*job), jobs))
    else:
        results = [_quantize_tensor(*job) for job in jobs]

    codebooks: "OrderedDict[str, LayerCodebook]" = OrderedDict()
    warnings = []
    for codebook, warning in results:
        codebooks[codebook.name] = codebook
        if warning:
            warnings.append(warning)
    side = OrderedDict((name, value.copy()) for name, value in model.parameters.items() if name not in codebooks)
    metadata = dict(model.metadata)
    metadata["k"] = qcfg.k
    return QuantizedModel(config=model.config, codebooks=codebooks, side_parameters=side,
                          metadata=metadata, warnings=warnings)


def dequantize(qm: QuantizedModel) -> ModelState:
    """
    Full-precision model whose weights are centroid lookups.

    Raises:
        CodebookCorruptionError: Some index >= k
    """
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name in qm.config.param_shapes():
        if name in qm.codebooks:
            params[name] = qm.codebooks[name].weights()
        else:
            params[name] = qm.side_parameters[name].copy()
    return ModelState(config=qm.config, parameters=params, metadata=dict(qm.metadata))


ModelLike = Union[ModelState, QuantizedModel]


def as_model_state(model: ModelLike) -> ModelState:
    """Runnable float model for either model kind."""
    return dequantize(model) if isinstance(model, QuantizedModel) else model


def centroid_gradients(codebook: LayerCodebook, weight_grad: np.ndarray) -> np.ndarray:
    """Per-centroid sum of the gradients of its member weights."""
    grad = np.asarray(weight_grad, dtype=np.float64).ravel()
    return np.bincount(codebook.indices, weights=grad, minlength=codebook.k)


def finetune(
    qm: QuantizedModel,
    dataset: PatchSet,
    qcfg: QuantizeConfig,
    verbose: bool = False
) -> Tuple[QuantizedModel, TrainingLog]:
    """
    Retrain centroids and side parameters with frozen assignments.

    Args:
        qm: Quantized model (not modified)
        dataset: Labeled patches at the model input size
        qcfg: Epochs, learning rate, batch size and seed
        verbose: Print one progress line per epoch

    Returns:
        Tuple of (fine-tuned QuantizedModel with identical indices, epoch log)

    Raises:
        DatasetError: Empty dataset
    """
    n = len(dataset)
    if n == 0:
        raise DatasetError("Cannot fine-tune on an empty dataset")

    model = dequantize(qm)
    centroids = OrderedDict((name, cb.centroids.astype(np.float32).copy()) for name, cb in qm.codebooks.items())
    side_trainable = [name for name in model.trainable_names() if name not in centroids]
    variables: Dict[str, np.ndarray] = {f"{name}.centroids": c for name, c in centroids.items()}
    variables.update({name: model.parameters[name] for name in side_trainable})

    rng = np.random.default_rng(qcfg.seed)
    state = AdamState(lr=qcfg.finetune_lr)
    log = TrainingLog()

    for epoch in range(qcfg.finetune_epochs):
        start = time.perf_counter()
        total_loss = 0.0
        correct = 0
        for idx in shuffled_chunks(n, qcfg.batch_size, rng, qcfg.shuffle):
            loss, probs, grads = loss_and_grads(model, dataset.patches[idx], dataset.labels[idx])
            step_grads = {f"{name}.centroids": centroid_gradients(qm.codebooks[name], grads[name])
                          for name in centroids}
            step_grads.update({name: grads[name] for name in side_trainable})
            adam_step(variables, step_grads, state)
            for name, cb in qm.codebooks.items():
                model.parameters[name][...] = centroids[name][cb.indices].reshape(cb.shape)
            total_loss += loss * len(idx)
            correct += int((probs.argmax(axis=1) == dataset.labels[idx]).sum())

        record = EpochRecord(epoch=epoch + 1, loss=total_loss / n, accuracy=correct / n, samples=n)
        log.append(record)
        if verbose:
            print_epoch_progress(record, qcfg.finetune_epochs, time.perf_counter() - start, label="Finetune")

    codebooks = OrderedDict(
        (name, LayerCodebook(name=name, shape=cb.shape, centroids=centroids[name], indices=cb.indices.copy()))
        for name, cb in qm.codebooks.items()
    )
    side = OrderedDict((name, model.parameters[name].copy()) for name in qm.side_parameters)
    metadata = dict(qm.metadata)
    metadata["finetune_epochs"] = int(metadata.get("finetune_epochs", 0)) + qcfg.finetune_epochs
    return QuantizedModel(config=qm.config, codebooks=codebooks, side_parameters=side,
                          metadata=metadata, warnings=list(qm.warnings)), log


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def encode_quantized_model(qm: QuantizedModel) -> bytes:
    """MDQ1 bytes of a quantized model."""
    return encode_quantized(qm.to_payload())


def save_quantized(qm: QuantizedModel, path: str) -> int:
    """
    Write a quantized model file.

    Returns:
        Number of bytes written
    """
    data = encode_quantized_model(qm)
    ensure_parent_dir(path)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_quantized(path: str) -> QuantizedModel:
    """Read a quantized model file written by save_quantized."""
    with open(path, "rb") as f:
        return QuantizedModel.from_payload(decode_quantized(f.read(), path))


def load_any_model(path: str) -> ModelLike:
    """Load an MDF1 or MDQ1 file, chosen by its magic bytes."""
    magic = read_magic(path)
    if magic == FLOAT_MAGIC:
        return load_model(path)
    if magic == QUANT_MAGIC:
        return load_quantized(path)
    raise ModelMagicError(f"{path}: bad magic {magic!r} (expected {FLOAT_MAGIC!r} or {QUANT_MAGIC!r})")


def model_size(model: ModelLike) -> int:
    """Serialized byte size of either model kind."""
    return model.file_size() if isinstance(model, QuantizedModel) else model_file_size(model)


# ---------------------------------------------------------------------------
# Compression report
# ---------------------------------------------------------------------------

@dataclass
class TensorFootprint:
    """Stored bytes of one tensor in both formats."""

    name: str
    count: int
    original_bytes: int
    compressed_bytes: int
    k: Optional[int] = None
    bits: Optional[int] = None

    @property
    def factor(self) -> float:
        return self.original_bytes / self.compressed_bytes if self.compressed_bytes else float("inf")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "count": self.count,
            "k": self.k,
            "bits": self.bits,
            "original_kb": self.original_bytes / 1000.0,
            "compressed_kb": self.compressed_bytes / 1000.0,
            "original_bytes": self.original_bytes,
            "compressed_bytes": self.compressed_bytes,
            "factor": self.factor,
        }


@dataclass
class CompressionReport:
    """
    Per-tensor and total footprint of a float model and its quantized form.

    Totals are the exact serialized file sizes; kB = bytes / 1000.
    """

    tensors: List[TensorFootprint]
    original_bytes: int
    compressed_bytes: int
    original_header_bytes: int
    compressed_header_bytes: int
    reference_kb: Optional[float] = None

    @property
    def original_kb(self) -> float:
        return self.original_bytes / 1000.0

    @property
    def compressed_kb(self) -> float:
        return self.compressed_bytes / 1000.0

    @property
    def factor(self) -> float:
        return self.original_bytes / self.compressed_bytes

    @property
    def reference_factor(self) -> Optional[float]:
        if self.reference_kb is None:
            return None
        return self.reference_kb / self.compressed_kb

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "tensors": [t.to_dict() for t in self.tensors],
            "original_bytes": self.original_bytes,
            "compressed_bytes": self.compressed_bytes,
            "original_kb": self.original_kb,
            "compressed_kb": self.compressed_kb,
            "original_header_bytes": self.original_header_bytes,
            "compressed_header_bytes": self.compressed_header_bytes,
            "factor": self.factor,
        }
        if self.reference_kb is not None:
            data["reference_kb"] = self.reference_kb
            data["reference_factor"] = self.reference_factor
        return data


def compression_report(model: ModelState, qm: QuantizedModel, reference_kb: Optional[float] = None) -> CompressionReport:
    """
    Footprint comparison of a float model and a quantized model.

    Args:
        model: Float model
        qm: Quantized model of the same network
        reference_kb: Optional external size to compare the compressed size against

    Returns:
        CompressionReport

    Raises:
        ConfigError: Models describe different networks
    """
    if model.config.to_dict() != qm.config.to_dict():
        raise ConfigError("compression_report needs a float and a quantized model of the same network")

    tensors = []
    for name, value in model.parameters.items():
        original = parameter_entry_size(name, value.shape)
        if name in qm.codebooks:
            cb = qm.codebooks[name]
            tensors.append(TensorFootprint(name=name, count=cb.count, original_bytes=original,
                                           compressed_bytes=quantized_layer_size(name, cb.count, cb.k),
                                           k=cb.k, bits=cb.bits))
        else:
            tensors.append(TensorFootprint(name=name, count=int(value.size), original_bytes=original,
                                           compressed_bytes=parameter_entry_size(name, value.shape)))

    original_total = model_file_size(model)
    compressed_total = qm.file_size()
    return CompressionReport(
        tensors=tensors,
        original_bytes=original_total,
        compressed_bytes=compressed_total,
        original_header_bytes=original_total - sum(t.original_bytes for t in tensors),
        compressed_header_bytes=compressed_total - sum(t.compressed_bytes for t in tensors),
        reference_kb=reference_kb,
    )


def format_compression_report(report: CompressionReport) -> str:
    """
    Format a compression report as aligned text.

    Args:
        report: CompressionReport

    Returns:
        Formatted report string
    """
    rows = []
    for t in report.tensors:
        rows.append([t.name, t.count, t.k if t.k is not None else "-", t.bits if t.bits is not None else "-",
                     f"{t.original_bytes / 1000.0:.3f}", f"{t.compressed_bytes / 1000.0:.3f}", f"{t.factor:.2f}x"])
    rows.append(["(headers)", "", "", "", f"{report.original_header_bytes / 1000.0:.3f}",
                 f"{report.compressed_header_bytes / 1000.0:.3f}", ""])
    table = format_table(["tensor", "weights", "k", "bits", "orig kB", "comp kB", "factor"], rows)

    totals = {
        "Weight memory (float)": f"{report.original_kb:.1f} kB ({report.original_bytes:,} bytes)",
        "Weight memory (quantized)": f"{report.compressed_kb:.1f} kB ({report.compressed_bytes:,} bytes)",
        "Compression factor": f"{report.factor:.2f}x",
    }
    if report.reference_kb is not None:
        totals["Reference size"] = f"{format_number(report.reference_kb)} kB"
        totals["Reference factor"] = f"{report.reference_factor:.2f}x"
    return format_report("Memory footprint", [table, format_key_values(totals)], width=78)


def print_compression_report(report: CompressionReport) -> None:
    """Print a compression report to console."""
    print(format_compression_report(report))
