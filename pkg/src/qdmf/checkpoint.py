"""Binary model files.

All integers little-endian. Layout::

    magic    4s   b"QDMF"
    version  u16
    kind     u8   0 = full precision, 1 = quantized
    T        u32, beta_start f64, beta_end f64
    data_dim u16, emb_dim u16, n_layers u16
    per layer:
        id_len u16, id utf-8, rows u32, cols u32, has_bias u8
        kind 0: weight f64[rows*cols] (row-major), [bias f64[cols]]
        kind 1: pinned u8, w_spec, a_spec (bits u8, signed u8, per_channel u8, axis i8),
                packed_bits u8, payload_len u32, payload,
                s_w f64[cols], shared u8, n_scales u32, scales f64[n_scales],
                [bias f64[cols]]

Only the merged, quantized weights are stored for quantized models.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .diffusion import Denoiser, Linear, NoiseSchedule, make_schedule
from .errors import CheckpointError
from .intkernel import DeployedLayer, PackedMatrix
from .qalora import QALoRALayer
from .quant import QuantSpec
from .talsq import TemporalScaleTable

MAGIC = b"QDMF"
VERSION = 1
KIND_FP = 0
KIND_QUANT = 1


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt, *values):
        self.buf.write(struct.pack("<" + fmt, *values))

    def floats(self, arr):
        self.buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def raw(self, data: bytes):
        self.buf.write(data)

    def text(self, s: str):
        data = s.encode("utf-8")
        self.pack("H", len(data))
        self.raw(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("truncated checkpoint")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values if len(values) > 1 else values[0]

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.raw(8 * n), dtype="<f8").astype(np.float64)

    def text(self) -> str:
        return self.raw(self.unpack("H")).decode("utf-8")


def _write_spec(w: _Writer, spec: QuantSpec):
    w.pack("BBBb", spec.bits, int(spec.signed), int(spec.per_channel), spec.axis)


def _read_spec(r: _Reader) -> QuantSpec:
    bits, signed, per_channel, axis = r.unpack("BBBb")
    return QuantSpec(bits, bool(signed), "channel" if per_channel else "tensor", axis)


def _model_kind(model: Denoiser) -> int:
    if all(isinstance(layer, Linear) for layer in model.layers):
        return KIND_FP
    if all(isinstance(layer, (QALoRALayer, DeployedLayer)) for layer in model.layers):
        return KIND_QUANT
    raise CheckpointError("model mixes full-precision and quantized layers")


def to_bytes(model: Denoiser, schedule: NoiseSchedule) -> bytes:
    kind = _model_kind(model)
    w = _Writer()
    w.raw(MAGIC)
    w.pack("HB", VERSION, kind)
    w.pack("Idd", schedule.T, schedule.beta_start, schedule.beta_end)
    w.pack("HHH", model.data_dim, model.emb_dim, len(model.layers))
    for layer in model.layers:
        if isinstance(layer, QALoRALayer):
            layer = DeployedLayer.from_qalora(layer)
        rows, cols = layer.shape
        w.text(layer.layer_id)
        w.pack("IIB", rows, cols, layer.bias is not None)
        if kind == KIND_FP:
            w.floats(layer.weight.data.reshape(-1))
            if layer.bias is not None:
                w.floats(layer.bias.data)
            continue
        w.pack("B", int(layer.pinned))
        _write_spec(w, QuantSpec.weight(layer.w_bits))
        _write_spec(w, layer.a_spec)
        w.pack("BI", layer.packed.bits, layer.packed.nbytes)
        w.raw(layer.packed.payload)
        w.floats(layer.packed.scales)
        table = layer.act_scales
        w.pack("BI", int(table.shared), table.T_train)
        w.floats(table.values)
        if layer.bias is not None:
            w.floats(layer.bias)
    return w.buf.getvalue()


def from_bytes(data: bytes) -> tuple[Denoiser, NoiseSchedule]:
    r = _Reader(data)
    if r.raw(4) != MAGIC:
        raise CheckpointError("not a QDMF checkpoint")
    version, kind = r.unpack("HB")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if kind not in (KIND_FP, KIND_QUANT):
        raise CheckpointError(f"unknown model kind {kind}")
    T, beta_start, beta_end = r.unpack("Idd")
    data_dim, emb_dim, n_layers = r.unpack("HHH")
    layers = []
    for _ in range(n_layers):
        layer_id = r.text()
        rows, cols, has_bias = r.unpack("IIB")
        if kind == KIND_FP:
            weight = r.floats(rows * cols).reshape(rows, cols)
            bias = r.floats(cols) if has_bias else None
            layers.append(Linear(weight, bias, requires_grad=False, layer_id=layer_id))
            continue
        pinned = bool(r.unpack("B"))
        w_spec = _read_spec(r)
        a_spec = _read_spec(r)
        packed_bits, n_payload = r.unpack("BI")
        payload = r.raw(n_payload)
        s_w = r.floats(cols)
        shared, n_scales = r.unpack("BI")
        table = TemporalScaleTable(r.floats(n_scales), layer_id, shared=bool(shared), learnable=False)
        bias = r.floats(cols) if has_bias else None
        packed = PackedMatrix(packed_bits, rows, cols, payload, s_w)
        layers.append(DeployedLayer(packed, w_spec.bits, a_spec, table, bias, layer_id, pinned))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    return Denoiser(layers, emb_dim, data_dim), make_schedule(T, beta_start, beta_end)


def save(path, model: Denoiser, schedule: NoiseSchedule) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(model, schedule))
    return path


def load(path) -> tuple[Denoiser, NoiseSchedule]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return from_bytes(path.read_bytes())


def quantizer_state(model: Denoiser) -> list[dict]:
    """Per-layer quantizer settings of a quantized model, in the form ``build_student`` takes."""
    out = []
    for layer in model.layers:
        if isinstance(layer, QALoRALayer):
            layer = DeployedLayer.from_qalora(layer)
        if not isinstance(layer, DeployedLayer):
            raise CheckpointError("model is not quantized")
        out.append({
            "bits_w": layer.w_bits,
            "bits_a": layer.a_spec.bits,
            "s_w": layer.packed.scales.copy(),
            "act_scales": layer.act_scales.values,
            "shared": layer.act_scales.shared,
            "pinned": layer.pinned,
        })
    return out
