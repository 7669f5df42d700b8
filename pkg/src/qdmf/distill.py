"""Data-free distillation of a full-precision teacher into a quantized student.

Intermediate states come only from the teacher's own sampling chain; nothing
in this module touches a dataset.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .diffusion import Denoiser, NoiseSchedule, SamplerConfig, predict_mu, sample_trajectory
from .errors import ConfigurationError, TrainingDiverged
from .quant import QuantSpec
from .qalora import LayerPrecisionPolicy, QALoRALayer, make_layer, scale_aware_rescale
from .talsq import TemporalScaleTable, calibrate_table
from .tensor import Adam, mean, square, sub

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistillConfig:
    iterations: int = 2000
    batch: int = 64
    lr: float = 5e-4
    T: int = 100
    seed: int = 0
    scale_aware: bool = True
    # scales sit orders of magnitude apart from adapter entries, so they get their own rates
    lr_weight_scale: float = 5e-5
    lr_act_scale: float = 5e-3

    def __post_init__(self):
        if self.iterations < 0 or self.batch < 1 or self.T < 1:
            raise ConfigurationError("iterations, batch and T must be positive")
        for name in ("lr", "lr_weight_scale", "lr_act_scale"):
            value = getattr(self, name)
            if not value > 0:
                raise ConfigurationError(f"{name} must be positive, got {value}")


@dataclass
class TrajectoryBatch:
    """Teacher states in visiting order: ``(x_t, t, step)`` with t strictly decreasing."""

    states: list

    def __len__(self):
        return len(self.states)

    def __iter__(self):
        return iter(self.states)


def generate_states(teacher: Denoiser, schedule: NoiseSchedule, sampler: SamplerConfig,
                    batch: int, seed: int) -> TrajectoryBatch:
    """Record each state before the teacher's update, starting from the raw Gaussian draw."""
    try:
        _, states = sample_trajectory(teacher, schedule, sampler, batch, seed)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"teacher trajectory diverged: {exc}") from None
    return TrajectoryBatch(states)


def _teacher_mu(teacher: Denoiser, x_t, t: int, step: int, schedule: NoiseSchedule):
    return predict_mu(teacher.forward(x_t, t, step=step).data, x_t, t, schedule)


def distill_loss(teacher, student, x_t, t: int, schedule: NoiseSchedule, step: int | None = None):
    """Graph node for ``mean((mu_teacher - mu_student)^2)``."""
    step = t if step is None else step
    mu_fp = _teacher_mu(teacher, x_t, t, step, schedule)
    mu_q = predict_mu(student.forward(x_t, t, step=step), x_t, t, schedule)
    return mean(square(sub(mu_q, mu_fp)))


def distill_step(teacher, student, x_t, t: int, schedule: NoiseSchedule,
                 step: int | None = None) -> float:
    """Loss at one state; backpropagates into the student's trainable tensors if any."""
    loss = distill_loss(teacher, student, x_t, t, schedule, step)
    if loss.requires_grad:
        loss.backward()
    return loss.item()


def student_layers(student: Denoiser) -> list[QALoRALayer]:
    return [layer for layer in student.layers if isinstance(layer, QALoRALayer)]


def trainable_parameters(student: Denoiser):
    params = []
    for layer in student_layers(student):
        params += layer.adapter_parameters()
        params += layer.scale_parameters()
    return params


def snapshot(student: Denoiser) -> list[np.ndarray]:
    return [p.data.copy() for p in trainable_parameters(student)]


def restore(student: Denoiser, state: list[np.ndarray]) -> None:
    for p, value in zip(trainable_parameters(student), state):
        p.data = value.copy()


def finetune(teacher: Denoiser, student: Denoiser, cfg: DistillConfig, schedule: NoiseSchedule,
             progress: list | None = None) -> Denoiser:
    """Quantization-aware fine-tuning of adapters and scales, in place.

    One optimizer step per (trajectory batch, step) pair; every trajectory batch
    is freshly sampled from the teacher. ``progress`` collects
    ``(iteration, t, loss)`` rows.
    """
    sampler = SamplerConfig(cfg.T)
    layers = student_layers(student)
    groups = [
        ([p for layer in layers for p in layer.adapter_parameters()], cfg.lr),
        ([layer.s_w.values for layer in layers], cfg.lr_weight_scale),
        ([p for layer in layers for p in layer.act_scales.params], cfg.lr_act_scale),
    ]
    optimizers = [Adam(params, lr=lr) for params, lr in groups if params]
    rng = np.random.default_rng(cfg.seed)
    it = 0
    while it < cfg.iterations:
        last_good = snapshot(student)
        traj = generate_states(teacher, schedule, sampler, cfg.batch, int(rng.integers(2**31)))
        for x_t, t, step in traj:
            if it >= cfg.iterations:
                break
            for opt in optimizers:
                opt.zero_grad()
            loss = distill_loss(teacher, student, x_t, t, schedule, step)
            value = loss.item()
            if not math.isfinite(value):
                restore(student, last_good)
                raise TrainingDiverged(f"distillation loss became {value} at iteration {it}",
                                       last_good=last_good, iteration=it)
            loss.backward()
            if cfg.scale_aware:
                for layer in layers:
                    if layer.rank:
                        layer.B.grad, layer.A.grad = scale_aware_rescale(
                            layer.B.grad, layer.A.grad, layer.s_w)
            for opt in optimizers:
                opt.step()
            for layer in layers:
                layer.clamp_scales_()
            if progress is not None:
                progress.append((it, t, value))
            it += 1
    for opt in optimizers:
        opt.zero_grad()
    return student


def eval_trajectory_mse(teacher: Denoiser, student: Denoiser, schedule: NoiseSchedule,
                        n_trajectories: int = 256, seed: int = 0, steps: int | None = None) -> float:
    """Mean distillation loss over fresh teacher trajectories and all visited steps."""
    sampler = SamplerConfig(steps or schedule.T)
    traj = generate_states(teacher, schedule, sampler, n_trajectories, seed)
    teacher_v = teacher.for_steps(sampler.steps) if sampler.steps != schedule.T else teacher
    student_v = student.for_steps(sampler.steps) if sampler.steps != schedule.T else student
    losses = []
    for x_t, t, step in traj:
        mu_fp = _teacher_mu(teacher_v, x_t, t, step, schedule)
        mu_q = predict_mu(student_v.forward(x_t, t, step=step).data, x_t, t, schedule)
        losses.append(float(np.mean((mu_q - mu_fp) ** 2)))
    return float(np.mean(losses))


def collect_activations(model: Denoiser, traj: TrajectoryBatch) -> list[list[np.ndarray]]:
    """``acts[layer][k]``: input to ``layer`` at the k-th state of ``traj``."""
    acts = [[] for _ in model.layers]
    for x_t, t, step in traj:
        captured: list = []
        model.forward(x_t, t, step=step, capture=captured)
        for i, a in enumerate(captured):
            acts[i].append(a)
    return acts


def calibrate(teacher: Denoiser, schedule: NoiseSchedule, policy: LayerPrecisionPolicy,
              rank: int = 4, batch: int = 256, seed: int = 0, temporal: bool = True,
              steps: int | None = None) -> Denoiser:
    """Post-training quantized student with zero-product adapters.

    Weight scales are grid-searched per output channel on the teacher weights;
    activation scales per step (or pooled over steps when ``temporal`` is off)
    on the teacher's inputs along its own sampling trajectories.
    """
    if policy.n_layers != len(teacher.layers):
        raise ConfigurationError("precision policy does not match the model depth")
    sampler = SamplerConfig(steps or schedule.T)
    traj = generate_states(teacher, schedule, sampler, batch, seed)
    acts = collect_activations(teacher, traj)
    # states are visited from the noisiest step down; tables are indexed by step
    order = np.argsort([step for _, _, step in traj])
    rng = np.random.default_rng(seed)
    layers = []
    for i, fp in enumerate(teacher.layers):
        bits_w, bits_a = policy.bits(i)
        per_step = [acts[i][k] for k in order]
        table = calibrate_table(per_step, QuantSpec.activation(bits_a),
                                layer_id=fp.layer_id, shared=not temporal)
        layers.append(make_layer(
            fp.weight.data, None if fp.bias is None else fp.bias.data,
            bits_w=bits_w, bits_a=bits_a, act_scales=table, rank=rank, rng=rng,
            layer_id=fp.layer_id, pinned=policy.is_pinned(i)))
    return Denoiser(layers, teacher.emb_dim, teacher.data_dim)


def build_student(teacher: Denoiser, layer_specs, rank: int = 4, seed: int = 0) -> Denoiser:
    """Student from teacher weights and saved quantizer state.

    ``layer_specs[i]`` is a dict with ``bits_w``, ``bits_a``, ``s_w``,
    ``act_scales`` (array), ``shared`` and ``pinned`` (as stored in a checkpoint).
    """
    rng = np.random.default_rng(seed)
    layers = []
    for fp, spec in zip(teacher.layers, layer_specs, strict=True):
        table = TemporalScaleTable(spec["act_scales"], fp.layer_id, shared=spec["shared"])
        layers.append(make_layer(
            fp.weight.data, None if fp.bias is None else fp.bias.data,
            bits_w=spec["bits_w"], bits_a=spec["bits_a"], act_scales=table, rank=rank,
            rng=rng, layer_id=fp.layer_id, pinned=spec["pinned"], s_w=spec["s_w"]))
    return Denoiser(layers, teacher.emb_dim, teacher.data_dim)
