"""Uniform symmetric fake quantization with STE / LSQ gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError
from .tensor import Tensor, _as_tensor, _node

SUPPORTED_BITS = (2, 4, 6, 8)
MIN_SCALE = 1e-8
GRID_POINTS = 100
GRID_RANGE = (0.2, 1.2)


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    signed: bool = True
    granularity: str = "tensor"  # "tensor" | "channel"
    axis: int = -1

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ConfigurationError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.granularity not in ("tensor", "channel"):
            raise ConfigurationError(f"unknown granularity {self.granularity!r}")

    @property
    def l(self) -> int:  # noqa: E743
        return -(1 << (self.bits - 1)) if self.signed else 0

    @property
    def u(self) -> int:
        return (1 << (self.bits - 1)) - 1 if self.signed else (1 << self.bits) - 1

    @property
    def per_channel(self) -> bool:
        return self.granularity == "channel"

    @classmethod
    def weight(cls, bits: int, axis: int = -1) -> "QuantSpec":
        return cls(bits, signed=True, granularity="channel", axis=axis)

    @classmethod
    def activation(cls, bits: int) -> "QuantSpec":
        return cls(bits, signed=True, granularity="tensor")


@dataclass
class LearnedScale:
    values: Tensor
    learnable: bool = True

    def __post_init__(self):
        if not isinstance(self.values, Tensor):
            self.values = Tensor(self.values, requires_grad=self.learnable)
        self.values.requires_grad = self.learnable
        if np.any(self.values.data <= 0):
            raise DomainError("quantization scales must be strictly positive")

    @property
    def data(self) -> np.ndarray:
        return self.values.data

    def mean(self) -> float:
        return float(self.values.data.mean())


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    v = np.asarray(v, dtype=np.float64)
    whole = np.trunc(v)
    return whole + np.where(np.abs(v - whole) >= 0.5, np.sign(v), 0.0)


def _axis(x_ndim: int, spec: QuantSpec) -> int:
    axis = spec.axis if spec.axis >= 0 else x_ndim + spec.axis
    if not 0 <= axis < x_ndim:
        raise DimensionError(f"channel axis {spec.axis} invalid for {x_ndim}-d input")
    return axis


def _broadcast_scale(s: np.ndarray, x_shape: tuple, spec: QuantSpec) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if not spec.per_channel:
        if s.size != 1:
            raise DimensionError(f"per-tensor scale must have one element, got {s.size}")
        return s.reshape(())
    axis = _axis(len(x_shape), spec)
    if s.size != x_shape[axis]:
        raise DimensionError(f"{s.size} scales for {x_shape[axis]} channels")
    shape = [1] * len(x_shape)
    shape[axis] = s.size
    return s.reshape(shape)


def _reduce_to_scale(v: np.ndarray, s_shape: tuple, spec: QuantSpec) -> np.ndarray:
    if not spec.per_channel:
        return np.full(s_shape, v.sum())
    axis = _axis(v.ndim, spec)
    others = tuple(i for i in range(v.ndim) if i != axis)
    return v.sum(axis=others).reshape(s_shape)


def group_size(x_shape: tuple, spec: QuantSpec) -> int:
    n = int(np.prod(x_shape))
    if spec.per_channel:
        n //= x_shape[_axis(len(x_shape), spec)]
    return n


def quantize(x: np.ndarray, s: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Integer codes ``clip(round(x/s), l, u)`` as int64."""
    sb = _broadcast_scale(s, np.shape(x), spec)
    if np.any(sb <= 0):
        raise DomainError("quantization scale must be positive")
    return np.clip(round_half_away(np.asarray(x) / sb), spec.l, spec.u).astype(np.int64)


def dequantize(codes: np.ndarray, s: np.ndarray, spec: QuantSpec) -> np.ndarray:
    return codes.astype(np.float64) * _broadcast_scale(s, np.shape(codes), spec)


def ste_input_grad(g, x, s, spec: QuantSpec) -> np.ndarray:
    """Upstream gradient masked to the unclipped region ``l <= x/s <= u``."""
    xs = np.asarray(x) / _broadcast_scale(s, np.shape(x), spec)
    return np.asarray(g) * ((xs >= spec.l) & (xs <= spec.u))


def lsq_partial(x, s, spec: QuantSpec) -> np.ndarray:
    """Per-element d(x_hat)/ds: ``round(x/s) - x/s`` inside the range, ``l``/``u`` outside."""
    xs = np.asarray(x) / _broadcast_scale(s, np.shape(x), spec)
    inner = round_half_away(xs) - xs
    return np.where(xs < spec.l, float(spec.l), np.where(xs > spec.u, float(spec.u), inner))


def lsq_scale_grad(g, x, s, spec: QuantSpec) -> np.ndarray:
    """Scale gradient summed per group and damped by ``1/sqrt(N*u)``."""
    x = np.asarray(x)
    s = np.asarray(s, dtype=np.float64)
    n = group_size(x.shape, spec)
    total = _reduce_to_scale(np.asarray(g) * lsq_partial(x, s, spec), s.shape, spec)
    return total / np.sqrt(n * spec.u)


def fake_quant(x, s, spec: QuantSpec) -> Tensor:
    """Quantize-dequantize ``x`` with straight-through input grads and LSQ scale grads."""
    x = _as_tensor(x)
    if isinstance(s, LearnedScale):
        s = s.values
    s = _as_tensor(s)
    sb = _broadcast_scale(s.data, x.shape, spec)
    if np.any(sb <= 0):
        raise DomainError("quantization scale must be positive")
    xs = x.data / sb
    q = np.clip(round_half_away(xs), spec.l, spec.u)
    out = q * sb
    xd, sd = x.data, s.data

    def backward(g):
        gx = g * ((xs >= spec.l) & (xs <= spec.u)) if x.requires_grad else None
        gs = lsq_scale_grad(g, xd, sd, spec) if s.requires_grad else None
        return gx, gs

    return _node(out, (x, s), backward)


def _mse_grid_search(x2d: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """x2d is (N, C); returns the best scale per column."""
    peak = np.abs(x2d).max(axis=0)
    base = peak / spec.u
    fractions = np.linspace(GRID_RANGE[0], GRID_RANGE[1], GRID_POINTS)
    best = np.full(x2d.shape[1], MIN_SCALE)
    live = peak > 0
    if not live.any():
        return best
    xs = x2d[:, live]
    cand = np.maximum(fractions[:, None] * base[live][None, :], MIN_SCALE)  # (G, C)
    errs = np.empty_like(cand)
    for i, c in enumerate(cand):  # loop over grid keeps memory at O(N*C)
        q = np.clip(round_half_away(xs / c), spec.l, spec.u) * c
        errs[i] = ((q - xs) ** 2).mean(axis=0)
    best[live] = cand[np.argmin(errs, axis=0), np.arange(cand.shape[1])]
    return best


def init_scale(x, spec: QuantSpec, learnable: bool = True) -> LearnedScale:
    """MSE-optimal scale on a 100-point grid spanning ``[0.2, 1.2] * max|x| / u``.

    All-zero groups get the floor scale 1e-8.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.size == 0:
        raise DimensionError("cannot calibrate a scale on an empty tensor")
    if spec.per_channel:
        axis = _axis(x.ndim, spec)
        x2d = np.moveaxis(x, axis, -1).reshape(-1, x.shape[axis])
    else:
        x2d = x.reshape(-1, 1)
    return LearnedScale(Tensor(_mse_grid_search(x2d, spec)), learnable=learnable)

