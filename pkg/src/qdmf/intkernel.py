"""Packed low-bit weights and an integer GEMM with per-channel dequantization.

Packing layout: codes are taken row-major, ``8 // bits`` codes per byte,
lowest-order bits first, each code stored as two's complement within its
field. A 4-bit pair ``[3, -8]`` therefore packs to ``0x83``.

Accumulation happens in int32 whenever ``k * max|x_code| * max|w_code|``
leaves at least 8x headroom below ``2**31``, otherwise in int64 under the same
rule; shapes beyond that are rejected before any arithmetic.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, EncodingError
from .quant import QuantSpec, quantize
from .talsq import TemporalScaleTable
from .tensor import Tensor

PACK_BITS = (2, 4, 8)
HEADROOM = 8


def container_bits(bits: int) -> int:
    """Smallest packable field width holding ``bits``-bit codes (6-bit codes use bytes)."""
    for b in PACK_BITS:
        if bits <= b:
            return b
    raise EncodingError(f"no packed container for {bits}-bit codes")


def code_range(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


@dataclass(frozen=True)
class PackedMatrix:
    bits: int
    rows: int
    cols: int
    payload: bytes
    scales: np.ndarray  # one per output channel (column)

    def __post_init__(self):
        if self.bits not in PACK_BITS:
            raise EncodingError(f"packed width must be one of {PACK_BITS}, got {self.bits}")
        expected = -(-self.rows * self.cols * self.bits // 8)
        if len(self.payload) != expected:
            raise EncodingError(f"payload has {len(self.payload)} bytes, expected {expected}")
        if self.scales.shape != (self.cols,):
            raise DimensionError(f"{self.scales.shape} scales for {self.cols} columns")

    @property
    def nbytes(self) -> int:
        return len(self.payload)

    def unpack(self) -> np.ndarray:
        return unpack(self)


def pack(codes, bits: int, scales=None) -> PackedMatrix:
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise DimensionError(f"expected a 2-d code matrix, got shape {codes.shape}")
    if bits not in PACK_BITS:
        raise EncodingError(f"packed width must be one of {PACK_BITS}, got {bits}")
    if not np.issubdtype(codes.dtype, np.integer):
        if not np.array_equal(codes, np.round(codes)):
            raise EncodingError("codes must be integers")
        codes = codes.astype(np.int64)
    lo, hi = code_range(bits)
    if codes.size and (codes.min() < lo or codes.max() > hi):
        raise EncodingError(f"codes outside [{lo}, {hi}] for {bits}-bit packing")
    rows, cols = codes.shape
    per = 8 // bits
    mask = (1 << bits) - 1
    flat = (codes.reshape(-1).astype(np.int64) & mask).astype(np.uint8)
    pad = (-flat.size) % per
    if pad:
        flat = np.concatenate([flat, np.zeros(pad, dtype=np.uint8)])
    shifts = (np.arange(per, dtype=np.uint8) * bits)
    packed = np.bitwise_or.reduce(flat.reshape(-1, per) << shifts, axis=1).astype(np.uint8)
    if scales is None:
        scales = np.ones(cols)
    return PackedMatrix(bits, rows, cols, packed.tobytes(), np.asarray(scales, dtype=np.float64))


def unpack(pm: PackedMatrix) -> np.ndarray:
    per = 8 // pm.bits
    mask = (1 << pm.bits) - 1
    raw = np.frombuffer(pm.payload, dtype=np.uint8)
    shifts = (np.arange(per, dtype=np.uint8) * pm.bits)
    fields = ((raw[:, None] >> shifts) & mask).astype(np.int64).reshape(-1)
    fields = fields[: pm.rows * pm.cols]
    fields = np.where(fields >= 1 << (pm.bits - 1), fields - (1 << pm.bits), fields)
    return fields.reshape(pm.rows, pm.cols)


def accumulator_dtype(k: int, x_bits: int, w_bits: int):
    bound = k * (1 << (x_bits - 1)) * (1 << (w_bits - 1))
    for dtype in (np.int32, np.int64):
        if bound * HEADROOM <= np.iinfo(dtype).max:
            return dtype
    raise ConfigurationError(f"inner dimension {k} overflows the accumulator at W{w_bits}A{x_bits}")


def qgemm(x_codes, s_x: float, packed: PackedMatrix, x_bits: int = 8) -> np.ndarray:
    """``y[i, j] = s_x * s_w[j] * sum_k x[i, k] * w[k, j]`` with exact integer accumulation."""
    x_codes = np.asarray(x_codes)
    if x_codes.ndim != 2 or x_codes.shape[1] != packed.rows:
        raise DimensionError(f"activation codes {x_codes.shape} vs packed {packed.rows}x{packed.cols}")
    lo, hi = code_range(x_bits)
    if x_codes.size and (x_codes.min() < lo or x_codes.max() > hi):
        raise EncodingError(f"activation codes outside [{lo}, {hi}]")
    acc_t = accumulator_dtype(packed.rows, x_bits, packed.bits)
    acc = x_codes.astype(acc_t) @ unpack(packed).astype(acc_t)
    return (acc.astype(np.float64) * float(s_x)) * packed.scales


def fake_quant_reference(x_codes, s_x: float, w_codes, s_w) -> np.ndarray:
    """Same product computed on dequantized floats."""
    return (np.asarray(x_codes, dtype=np.float64) * float(s_x)) @ (
        np.asarray(w_codes, dtype=np.float64) * np.asarray(s_w, dtype=np.float64))


class DeployedLayer:
    """Inference-only layer: packed merged weights, per-channel scales, per-step activation scales."""

    def __init__(self, packed: PackedMatrix, w_bits: int, a_spec: QuantSpec,
                 act_scales: TemporalScaleTable, bias=None, layer_id: str = "", pinned: bool = False):
        self.packed = packed
        self.w_bits = w_bits
        self.a_spec = a_spec
        self.act_scales = act_scales
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)
        self.layer_id = layer_id
        self.pinned = pinned

    @classmethod
    def from_qalora(cls, layer) -> "DeployedLayer":
        codes = layer.weight_codes()
        packed = pack(codes, container_bits(layer.w_spec.bits), layer.s_w.data.copy())
        table = TemporalScaleTable(layer.act_scales.values, layer.layer_id,
                                   shared=layer.act_scales.shared, learnable=False)
        bias = None if layer.bias is None else layer.bias.data.copy()
        return cls(packed, layer.w_spec.bits, layer.a_spec, table, bias, layer.layer_id, layer.pinned)

    @property
    def shape(self) -> tuple[int, int]:
        return self.packed.rows, self.packed.cols

    @property
    def s_w(self) -> np.ndarray:
        return self.packed.scales

    def weight_codes(self) -> np.ndarray:
        return unpack(self.packed)

    def __call__(self, x, step: int) -> Tensor:
        x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        s_x = self.act_scales.scale_at(step).data
        codes = quantize(x, s_x, self.a_spec)
        y = qgemm(codes, float(s_x[0]), self.packed, x_bits=self.a_spec.bits)
        if self.bias is not None:
            y = y + self.bias
        return Tensor(y)

    def for_steps(self, T_infer: int) -> "DeployedLayer":
        if self.act_scales.T_train == T_infer and not self.act_scales.shared:
            return self
        return DeployedLayer(self.packed, self.w_bits, self.a_spec,
                             self.act_scales.interpolate(T_infer), self.bias, self.layer_id, self.pinned)

    def parameters(self):
        return []


def model_bytes(layers) -> dict:
    """Weight storage of a model: float32 baseline against packed codes plus float32 scales."""
    fp32 = packed = scales = 0
    for layer in layers:
        rows, cols = layer.shape
        fp32 += rows * cols * 4
        bits = container_bits(layer.w_bits if hasattr(layer, "w_bits") else layer.w_spec.bits)
        packed += -(-rows * cols * bits // 8)
        scales += cols * 4
    return {
        "fp32_weight_bytes": fp32,
        "packed_weight_bytes": packed,
        "scale_bytes": scales,
        "weight_ratio": fp32 / packed,
        "ratio_with_scales": fp32 / (packed + scales),
    }


def bench(shapes, bits_list=(2, 4, 8), repetitions: int = 20, seed: int = 0) -> list[dict]:
    """Median wall-clock of qgemm (and a float32 matmul baseline, bits=32) per shape.

    ``shapes`` are ``(m, k, n)`` triples. Activations use 8-bit codes.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for m, k, n in shapes:
        x_codes = rng.integers(-128, 128, size=(m, k))
        xf = x_codes.astype(np.float32)
        wf = rng.standard_normal((k, n)).astype(np.float32)
        rows.append(_bench_row((m, k, n), 32, lambda: xf @ wf, k * n * 4, k * n * 4, repetitions))
        for bits in bits_list:
            lo, hi = code_range(bits)
            accumulator_dtype(k, 8, bits)
            pm = pack(rng.integers(lo, hi + 1, size=(k, n)), bits, rng.uniform(0.01, 0.1, n))
            rows.append(_bench_row((m, k, n), bits, lambda: qgemm(x_codes, 0.05, pm), pm.nbytes,
                                   k * n * 4, repetitions))
    return rows


def _bench_row(shape, bits, fn, nbytes, fp32_bytes, repetitions):
    fn()
    times = []
    for _ in range(repetitions):
        start = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - start)
    return {
        "shape": "x".join(map(str, shape)),
        "bits": bits,
        "ns_per_op": int(statistics.median(times)),
        "bytes": nbytes,
        "fp32_bytes": fp32_bytes,
        "ratio": fp32_bytes / nbytes,
    }
