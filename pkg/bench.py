"""
Inference benchmark harness.

Times warm single-sample inferences on seeded random inputs, optionally
measures batched and multi-worker throughput, and reports the serialized
model footprint. Power and energy are not measured in software and are
reported as "unmeasured".
"""

import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from chunker import chunk_indices
from errors import ConfigError, DimensionError
from model_io import model_file_size, parameter_entry_size
from network import ModelState, predict_scores
from quantize import ModelLike, QuantizedModel, as_model_state, compression_report
from stats import format_key_values, format_report, format_table

UNMEASURED = "unmeasured"

# reference per-sample inference times (ms) shown next to local results
REFERENCE_TIMES_MS = {
    "accelerator (VPU, 1000 inferences)": 2.7,
    "desktop CPU": 1.1,
}


@dataclass
class LatencyStats:
    """
    Per-sample latency statistics in milliseconds.

    Attributes:
        samples_ms: Every timed latency, in run order
    """

    samples_ms: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def median(self) -> float:
        return float(np.median(self.samples_ms))

    @property
    def p95(self) -> float:
        return float(np.percentile(self.samples_ms, 95))

    @property
    def min(self) -> float:
        return float(np.min(self.samples_ms))

    @property
    def max(self) -> float:
        return float(np.max(self.samples_ms))

    @property
    def std(self) -> float:
        return float(np.std(self.samples_ms))

    def to_dict(self) -> Dict[str, float]:
        return {"mean_ms": self.mean, "median_ms": self.median, "p95_ms": self.p95,
                "min_ms": self.min, "max_ms": self.max, "std_ms": self.std}


@dataclass
class ThroughputResult:
    """Samples per second of one scoring mode."""

    mode: str
    batch_size: int
    workers: int
    samples: int
    seconds: float

    @property
    def samples_per_second(self) -> float:
        return self.samples / self.seconds if self.seconds > 0 else float("inf")

    def to_dict(self) -> Dict[str, Any]:
        return {"mode": self.mode, "batch_size": self.batch_size, "workers": self.workers,
                "samples": self.samples, "seconds": self.seconds,
                "samples_per_second": self.samples_per_second}


@dataclass
class FootprintReport:
    """
    Serialized model sizes; kB = bytes / 1000.

    Attributes:
        float_bytes: MDF1 size of the float model
        quantized_bytes: MDQ1 size of the quantized model (None without one)
        tensors: Per-tensor rows (name, float bytes, quantized bytes or None)
    """

    float_bytes: int
    quantized_bytes: Optional[int] = None
    tensors: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def float_kb(self) -> float:
        return self.float_bytes / 1000.0

    @property
    def quantized_kb(self) -> Optional[float]:
        return None if self.quantized_bytes is None else self.quantized_bytes / 1000.0

    @property
    def ratio(self) -> Optional[float]:
        return None if not self.quantized_bytes else self.float_bytes / self.quantized_bytes

    def to_dict(self) -> Dict[str, Any]:
        return {"float_bytes": self.float_bytes, "float_kb": self.float_kb,
                "quantized_bytes": self.quantized_bytes, "quantized_kb": self.quantized_kb,
                "ratio": self.ratio, "tensors": self.tensors}


@dataclass
class BenchReport:
    """
    Benchmark results.

    Attributes:
        samples_run: Timed single-sample inferences
        warmup_count: Untimed inferences before timing
        seed: Input stream seed
        latency: Single-sample latency statistics
        throughput: Throughput rows (single-sample first; multi-worker rows separate)
        footprint: Model footprint
        model_kind: "float" or "quantized"
        host: Host description
    """

    samples_run: int
    warmup_count: int
    seed: int
    latency: LatencyStats
    throughput: List[ThroughputResult]
    footprint: FootprintReport
    model_kind: str
    host: str = field(default_factory=lambda: host_description())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "samples_run": self.samples_run,
            "warmup_count": self.warmup_count,
            "seed": self.seed,
            "model_kind": self.model_kind,
            "host": self.host,
            "latency": self.latency.to_dict(),
            "latency_samples_ms": list(self.latency.samples_ms),
            "throughput": [t.to_dict() for t in self.throughput],
            "footprint": self.footprint.to_dict(),
            "power_w": UNMEASURED,
            "energy_per_sample_j": UNMEASURED,
            "reference_time_per_sample_ms": dict(REFERENCE_TIMES_MS),
        }


def host_description() -> str:
    """Platform, processor and numpy version."""
    processor = platform.processor() or platform.machine()
    return f"{platform.platform()} | {processor} | Python {platform.python_version()} | numpy {np.__version__}"


def bench_inputs(model: ModelLike, count: int, seed: int) -> np.ndarray:
    """Seeded uniform [0, 1) float32 inputs shaped for the model."""
    shape = tuple(as_model_state(model).config.input_shape)
    rng = np.random.default_rng(seed)
    return rng.random((count,) + shape, dtype=np.float32)


def footprint_report(model: ModelState, qm: Optional[QuantizedModel] = None) -> FootprintReport:
    """
    Serialized sizes of a float model and optionally its quantized form.

    The per-tensor breakdown comes from compression_report when qm is given.
    """
    if qm is None:
        tensors = [{"name": name, "float_bytes": parameter_entry_size(name, value.shape), "quantized_bytes": None}
                   for name, value in model.parameters.items()]
        return FootprintReport(float_bytes=model_file_size(model), tensors=tensors)
    report = compression_report(model, qm)
    tensors = [{"name": t.name, "float_bytes": t.original_bytes, "quantized_bytes": t.compressed_bytes}
               for t in report.tensors]
    return FootprintReport(float_bytes=report.original_bytes, quantized_bytes=report.compressed_bytes,
                           tensors=tensors)


def bench_throughput(model: ModelLike, inputs: np.ndarray, batch_size: int, workers: int = 1) -> ThroughputResult:
    """
    Time scoring of all inputs in batches, optionally across worker threads.

    Args:
        model: Float or quantized model
        inputs: (N, C, s, s) inputs
        batch_size: Samples per forward pass
        workers: Threads scoring disjoint batches

    Returns:
        ThroughputResult
    """
    runnable = as_model_state(model)
    chunks = chunk_indices(inputs.shape[0], batch_size)
    start = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda idx: predict_scores(runnable, inputs[idx]), chunks))
    else:
        for idx in chunks:
            predict_scores(runnable, inputs[idx])
    seconds = time.perf_counter() - start
    mode = "single" if batch_size == 1 and workers == 1 else ("multi-worker" if workers > 1 else "batched")
    return ThroughputResult(mode=mode, batch_size=batch_size, workers=workers,
                            samples=int(inputs.shape[0]), seconds=seconds)


def bench_inference(
    model: ModelLike,
    patch_size: Optional[int] = None,
    count: int = 1000,
    warmup: int = 50,
    seed: int = 42,
    batch_size: int = 0,
    workers: int = 1,
    float_model: Optional[ModelState] = None
) -> BenchReport:
    """
    Time count single-sample inferences after warmup untimed ones.

    Quantized models are dequantized once before timing. Batched and
    multi-worker throughput are reported as separate rows and never mixed
    into the single-sample latency.

    Args:
        model: Float or quantized model
        patch_size: Expected input size (checked against the model when given)
        count: Timed inferences (>= 1)
        warmup: Untimed inferences
        seed: Input stream seed
        batch_size: Also measure batched throughput when > 1
        workers: Also measure multi-worker throughput when > 1
        float_model: Float counterpart of a quantized model, for the footprint

    Returns:
        BenchReport
    """
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    if warmup < 0:
        raise ConfigError(f"warmup must be >= 0, got {warmup}")
    runnable = as_model_state(model)
    size = runnable.config.input_shape[1]
    if patch_size is not None and patch_size != size:
        raise DimensionError(f"patch size {patch_size} does not match the model input size {size}")

    inputs = bench_inputs(runnable, warmup + count, seed)
    for i in range(warmup):
        predict_scores(runnable, inputs[i:i + 1])

    samples_ms = []
    for i in range(warmup, warmup + count):
        start = time.perf_counter_ns()
        predict_scores(runnable, inputs[i:i + 1])
        samples_ms.append((time.perf_counter_ns() - start) / 1e6)

    timed = inputs[warmup:]
    throughput = [ThroughputResult(mode="single", batch_size=1, workers=1,
                                   samples=count, seconds=sum(samples_ms) / 1000.0)]
    if batch_size > 1:
        throughput.append(bench_throughput(runnable, timed, batch_size))
    if workers > 1:
        throughput.append(bench_throughput(runnable, timed, max(batch_size, 1), workers))

    if isinstance(model, QuantizedModel):
        footprint = footprint_report(float_model if float_model is not None else runnable, model)
        kind = "quantized"
    else:
        footprint = footprint_report(model)
        kind = "float"

    return BenchReport(samples_run=count, warmup_count=warmup, seed=seed,
                       latency=LatencyStats(samples_ms), throughput=throughput,
                       footprint=footprint, model_kind=kind)


def format_bench_report(report: BenchReport) -> str:
    """
    Format a benchmark report as aligned text.

    Args:
        report: BenchReport

    Returns:
        Formatted report string
    """
    lat = report.latency
    summary = format_key_values({
        "Host": report.host,
        "Model": report.model_kind,
        "Samples": f"{report.samples_run:,} timed after {report.warmup_count:,} warmup (seed {report.seed})",
    })
    rows = [
        ["Time (/sample) (ms)", f"{lat.mean:.3f}"],
        ["  median (ms)", f"{lat.median:.3f}"],
        ["  p95 (ms)", f"{lat.p95:.3f}"],
        ["  min (ms)", f"{lat.min:.3f}"],
        ["Power (W)", UNMEASURED],
        ["Energy (/sample)", UNMEASURED],
        ["Weight memory (kB)", f"{report.footprint.float_kb:.1f}"],
    ]
    if report.footprint.quantized_kb is not None:
        rows.append(["Weight memory, quantized (kB)", f"{report.footprint.quantized_kb:.1f}"])
    table = format_table(["metric", "value"], rows)

    throughput = format_table(
        ["mode", "batch", "workers", "samples/s"],
        [[t.mode, t.batch_size, t.workers, f"{t.samples_per_second:,.1f}"] for t in report.throughput],
    )
    reference = [f"Reference {name}: {ms} ms/sample" for name, ms in REFERENCE_TIMES_MS.items()]
    return format_report("Inference benchmark", [summary, table, throughput, reference], width=70)


def print_bench_report(report: BenchReport) -> None:
    """Print a benchmark report to console."""
    print(format_bench_report(report))
