"""Per-denoising-step learned activation scales."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, DomainError
from .quant import MIN_SCALE, QuantSpec, init_scale
from .tensor import Tensor


class TemporalScaleTable:
    """One learnable activation scale per denoising step for a single layer.

    Each step owns its own scalar parameter so that an optimizer step driven by
    a batch at step ``t`` cannot touch the scale of any other step. With
    ``shared=True`` a single scale serves every step (the non-temporal ablation).
    """

    def __init__(self, scales, layer_id: str = "", shared: bool = False, learnable: bool = True):
        values = np.asarray(scales, dtype=np.float64).reshape(-1)
        if values.size == 0:
            raise ConfigurationError("scale table needs at least one entry")
        if shared and values.size != 1:
            raise ConfigurationError("a shared table holds exactly one scale")
        if np.any(~(values > 0)):
            raise DomainError("activation scales must be strictly positive")
        self.layer_id = layer_id
        self.shared = shared
        self.params = [Tensor([v], requires_grad=learnable, name=f"{layer_id}.s_x[{i}]")
                       for i, v in enumerate(values)]

    @property
    def T_train(self) -> int:
        return len(self.params)

    @property
    def values(self) -> np.ndarray:
        return np.array([p.data[0] for p in self.params])

    def num_parameters(self) -> int:
        return len(self.params)

    def scale_at(self, t: int) -> Tensor:
        if self.shared:
            if t < 0:
                raise IndexError(f"step {t} out of range")
            return self.params[0]
        if not 0 <= t < len(self.params):
            raise IndexError(f"step {t} out of range for table of length {len(self.params)}")
        return self.params[t]

    def clamp_(self, floor: float = MIN_SCALE) -> None:
        for p in self.params:
            np.maximum(p.data, floor, out=p.data)

    def interpolate(self, T_infer: int) -> "TemporalScaleTable":
        return interpolate(self, T_infer)

    def copy(self) -> "TemporalScaleTable":
        return TemporalScaleTable(self.values, self.layer_id, self.shared,
                                  learnable=self.params[0].requires_grad)

    def __repr__(self):
        kind = "shared" if self.shared else f"T={self.T_train}"
        return f"TemporalScaleTable({self.layer_id!r}, {kind})"


def scale_at(table: TemporalScaleTable, t: int) -> Tensor:
    return table.scale_at(t)


def interpolate(table: TemporalScaleTable, T_infer: int) -> TemporalScaleTable:
    """Resample the table to ``T_infer`` steps by linear interpolation on normalized step index."""
    if T_infer < 2:
        raise ConfigurationError(f"interpolation target must have at least 2 steps, got {T_infer}")
    src = table.values
    if table.shared:
        return TemporalScaleTable(src, table.layer_id, shared=True, learnable=False)
    n = src.size
    if T_infer == n:
        return TemporalScaleTable(src, table.layer_id, learnable=False)
    if n == 1:
        return TemporalScaleTable(np.full(T_infer, src[0]), table.layer_id, learnable=False)
    pos = np.arange(T_infer) * (n - 1) / (T_infer - 1)
    lo = np.minimum(np.floor(pos).astype(int), n - 2)
    frac = pos - lo
    a, b = src[lo], src[lo + 1]
    out = a + (b - a) * frac
    # keep each value inside its own segment so rounding cannot break monotonicity or bounds
    out = np.clip(out, np.minimum(a, b), np.maximum(a, b))
    out[0], out[-1] = src[0], src[-1]
    return TemporalScaleTable(out, table.layer_id, learnable=False)


def calibrate_table(per_step_activations, spec: QuantSpec, layer_id: str = "",
                    shared: bool = False) -> TemporalScaleTable:
    """Grid-search initial scales from activations captured at each step.

    ``per_step_activations[t]`` is an array of activations observed at step t.
    With ``shared`` the activations of all steps are pooled into one scale.
    """
    if shared:
        pooled = np.concatenate([np.asarray(a).reshape(-1) for a in per_step_activations])
        return TemporalScaleTable(init_scale(pooled, spec).data, layer_id, shared=True)
    scales = [init_scale(a, spec).data[0] for a in per_step_activations]
    return TemporalScaleTable(scales, layer_id)
