"""Quantization-aware low-rank adapters.

The adapter product ``B @ A`` is merged into the frozen weight before the
per-channel weight quantizer, so after fine-tuning a layer is just integer
codes plus scales. Activations are quantized per tensor with a per-step scale
taken from a :class:`~qdmf.talsq.TemporalScaleTable`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .quant import MIN_SCALE, LearnedScale, QuantSpec, fake_quant, init_scale, quantize
from .talsq import TemporalScaleTable
from .tensor import Tensor, add, matmul

PINNED_BITS = 8


@dataclass(frozen=True)
class LayerPrecisionPolicy:
    """Bit assignment per layer; the first and last layer stay at W8A8."""

    bits_w: int
    bits_a: int
    n_layers: int
    pinned_bits: int = PINNED_BITS

    def is_pinned(self, index: int) -> bool:
        return index == 0 or index == self.n_layers - 1

    def bits(self, index: int) -> tuple[int, int]:
        if not 0 <= index < self.n_layers:
            raise IndexError(f"layer {index} out of range")
        if self.is_pinned(index):
            return self.pinned_bits, self.pinned_bits
        return self.bits_w, self.bits_a


class QALoRALayer:
    def __init__(self, w0, bias=None, *, w_spec: QuantSpec, a_spec: QuantSpec,
                 s_w: LearnedScale, act_scales: TemporalScaleTable, rank: int = 0,
                 rng: np.random.Generator | None = None, layer_id: str = "",
                 pinned: bool = False):
        w0 = np.array(w0, dtype=np.float64)
        if w0.ndim != 2:
            raise DimensionError(f"weight must be 2-d, got shape {w0.shape}")
        c_in, c_out = w0.shape
        if s_w.data.size != c_out:
            raise DimensionError(f"{s_w.data.size} weight scales for {c_out} output channels")
        if rank < 0 or rank > min(c_in, c_out):
            raise DimensionError(f"rank {rank} invalid for a {c_in}x{c_out} layer")
        w0.setflags(write=False)
        self.w0 = w0
        self._w0_t = Tensor(w0)
        self.bias = None if bias is None else Tensor(np.asarray(bias, dtype=np.float64))
        if self.bias is not None and self.bias.shape != (c_out,):
            raise DimensionError(f"bias shape {self.bias.shape} != ({c_out},)")
        self.w_spec = w_spec
        self.a_spec = a_spec
        self.s_w = s_w
        self.act_scales = act_scales
        self.layer_id = layer_id
        self.pinned = pinned
        self.rank = rank
        if rank:
            rng = rng if rng is not None else np.random.default_rng(0)
            bound = 1.0 / np.sqrt(c_in)
            self.B = Tensor(rng.uniform(-bound, bound, size=(c_in, rank)), requires_grad=True,
                            name=f"{layer_id}.B")
            self.A = Tensor(np.zeros((rank, c_out)), requires_grad=True, name=f"{layer_id}.A")
        else:
            self.B = self.A = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.w0.shape

    def adapter_parameters(self) -> list[Tensor]:
        return [self.B, self.A] if self.rank else []

    def scale_parameters(self) -> list[Tensor]:
        return [self.s_w.values, *self.act_scales.params]

    def parameters(self) -> list[Tensor]:
        return self.adapter_parameters() + self.scale_parameters()

    def merged_weights(self) -> Tensor:
        """``W0 + B @ A`` as a graph node (``W0`` itself never receives gradient)."""
        if not self.rank:
            return self._w0_t
        return add(self._w0_t, matmul(self.B, self.A))

    def quantized_weights(self) -> Tensor:
        return fake_quant(self.merged_weights(), self.s_w, self.w_spec)

    def forward(self, x, t: int, trace: dict | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.w0.shape[0]:
            raise DimensionError(f"input shape {x.shape} does not match layer {self.w0.shape}")
        x_hat = fake_quant(x, self.act_scales.scale_at(t), self.a_spec)
        merged = self.merged_weights()
        w_hat = fake_quant(merged, self.s_w, self.w_spec)
        y = matmul(x_hat, w_hat)
        if self.bias is not None:
            y = add(y, self.bias)
        if trace is not None:
            trace.update(x_hat=x_hat, merged=merged, w_hat=w_hat)
        return y

    __call__ = forward

    def merged_quantized_weights(self) -> np.ndarray:
        return merged_quantized_weights(self)

    def weight_codes(self) -> np.ndarray:
        return quantize(self.merged_weights().data, self.s_w.data, self.w_spec)

    def for_steps(self, T_infer: int) -> "QALoRALayer":
        """Frozen copy whose activation table is resampled to ``T_infer`` steps."""
        view = object.__new__(QALoRALayer)
        view.__dict__.update(self.__dict__)
        if self.act_scales.T_train != T_infer or self.act_scales.shared:
            view.act_scales = self.act_scales.interpolate(T_infer)
        return view

    def clamp_scales_(self) -> None:
        np.maximum(self.s_w.values.data, MIN_SCALE, out=self.s_w.values.data)
        self.act_scales.clamp_()

    def __repr__(self):
        c_in, c_out = self.shape
        return (f"QALoRALayer({self.layer_id!r}, {c_in}x{c_out}, r={self.rank}, "
                f"W{self.w_spec.bits}A{self.a_spec.bits}{' pinned' if self.pinned else ''})")


def merged_quantized_weights(layer: QALoRALayer) -> np.ndarray:
    """The deployable weight ``fake_quant(W0 + B A)``; the only weight artifact kept after tuning."""
    return layer.quantized_weights().data


def scale_aware_rescale(grad_B, grad_A, s_w):
    """Multiply adapter gradients by the layer's mean weight scale."""
    s = s_w.data if isinstance(s_w, (LearnedScale, Tensor)) else np.asarray(s_w)
    if np.any(s <= 0):
        raise ConfigurationError("weight scales must be positive")
    factor = float(np.mean(s))
    return grad_B * factor, grad_A * factor


def adapter_product_grad(layer: QALoRALayer, x, g, t: int = 0):
    """Autodiff gradient of ``sum(g * Y)`` with respect to the merged adapter product.

    Returns ``(grad_BA, x_hat)``; ``x_hat`` is the quantized input that the
    straight-through identity predicts ``grad_BA = x_hat.T @ g`` from.
    """
    if not layer.rank:
        raise ConfigurationError("layer has no adapter")
    trace: dict = {}
    y = layer.forward(x, t, trace=trace)
    product = trace["merged"]._parents[1]  # add(W0, B @ A)
    y.backward(np.asarray(g, dtype=np.float64))
    grad = product.grad.copy()
    for p in (*layer.adapter_parameters(), *layer.scale_parameters()):
        p.grad = None
    return grad, trace["x_hat"].data


def adapter_gradient_identity_check(layer: QALoRALayer, x, g, t: int = 0, tol: float = 1e-8) -> bool:
    grad, x_hat = adapter_product_grad(layer, x, g, t)
    expected = x_hat.T @ np.asarray(g, dtype=np.float64)
    return bool(np.max(np.abs(grad - expected)) <= tol * max(1.0, np.max(np.abs(expected))))


def make_layer(w0, bias, *, bits_w: int, bits_a: int, act_scales: TemporalScaleTable,
               rank: int, rng=None, layer_id: str = "", pinned: bool = False,
               s_w=None) -> QALoRALayer:
    """Layer with per-output-channel weight scales grid-searched on ``w0`` unless given."""
    w_spec = QuantSpec.weight(bits_w)
    a_spec = QuantSpec.activation(bits_a)
    if s_w is None:
        s_w = init_scale(w0, w_spec)
    elif not isinstance(s_w, LearnedScale):
        s_w = LearnedScale(Tensor(np.asarray(s_w, dtype=np.float64)))
    c_in, c_out = np.shape(w0)
    if rank:
        # narrow layers (the 2-wide output layer) get a rank no larger than half their width
        rank = max(1, min(rank, min(c_in, c_out) // 2))
    return QALoRALayer(w0, bias, w_spec=w_spec, a_spec=a_spec, s_w=s_w,
                       act_scales=act_scales, rank=rank, rng=rng,
                       layer_id=layer_id, pinned=pinned)
