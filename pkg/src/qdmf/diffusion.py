"""Toy 2-D diffusion: schedule, MLP denoiser, teacher training and DDIM sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, TrainingDiverged
from .tensor import Adam, Tensor, add, concat, matmul, mean, silu, square, sub

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return self.betas.size

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar`` at step t, with t = -1 meaning the clean endpoint (1.0)."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise IndexError(f"step {t} out of range for T={self.T}")
        return float(self.alpha_bars[t])


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ConfigurationError(f"T must be positive, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(betas, alphas, alpha_bars, float(beta_start), float(beta_end))


def q_sample(x0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    ab = schedule.alpha_bar(t)
    if t == -1:
        raise IndexError("q_sample needs a noisy step, got -1")
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 shape {x0.shape} != noise shape {eps.shape}")
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(x_t, eps_hat, t: int, schedule: NoiseSchedule):
    ab = schedule.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) * (1.0 / math.sqrt(ab))


def predict_mu(eps_hat, x_t, t: int, schedule: NoiseSchedule):
    """Posterior mean from an epsilon prediction; works on arrays and Tensors alike."""
    ab = schedule.alpha_bar(t)
    if t == -1 or ab >= 1.0:
        raise ZeroDivisionError("posterior mean undefined where alpha_bar == 1")
    beta = float(schedule.betas[t])
    coef = beta / math.sqrt(1.0 - ab)
    inv = 1.0 / math.sqrt(float(schedule.alphas[t]))
    if isinstance(eps_hat, Tensor) or isinstance(x_t, Tensor):
        return sub(x_t, eps_hat * coef) * inv
    return (np.asarray(x_t) - coef * np.asarray(eps_hat)) * inv


def ddim_step(x_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from t to t_prev (t_prev = -1 is the clean endpoint)."""
    if not -1 <= t_prev < t:
        raise IndexError(f"invalid step pair t={t}, t_prev={t_prev}")
    x0 = predict_x0(x_t, eps_hat, t, schedule)
    ab_prev = schedule.alpha_bar(t_prev)
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_hat


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding; ``t`` scalar or 1-d array, returns (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class Linear:
    """Full-precision dense layer, ``y = x @ W + b`` with W of shape (c_in, c_out)."""

    def __init__(self, weight, bias=None, requires_grad: bool = True, layer_id: str = ""):
        self.weight = Tensor(weight, requires_grad=requires_grad, name=f"{layer_id}.W")
        self.bias = None if bias is None else Tensor(bias, requires_grad=requires_grad,
                                                     name=f"{layer_id}.b")
        self.layer_id = layer_id

    @classmethod
    def init(cls, c_in: int, c_out: int, rng: np.random.Generator, layer_id: str = ""):
        bound = 1.0 / math.sqrt(c_in)
        return cls(rng.uniform(-bound, bound, (c_in, c_out)), np.zeros(c_out), layer_id=layer_id)

    @property
    def shape(self):
        return self.weight.shape

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x, t=None):
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y

    def for_steps(self, T_infer: int):
        return self


class Denoiser:
    """Epsilon-prediction MLP over ``concat(x, embed(t))`` with SiLU between layers.

    Layers may be :class:`Linear` (teacher) or quantized adapter layers; the
    latter read their activation scale at the ``step`` index passed to ``forward``.
    """

    def __init__(self, layers, emb_dim: int = 32, data_dim: int = 2):
        self.layers = list(layers)
        self.emb_dim = emb_dim
        self.data_dim = data_dim
        if self.layers[0].shape[0] != data_dim + emb_dim or self.layers[-1].shape[1] != data_dim:
            raise DimensionError("layer shapes do not match data/embedding dimensions")

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = 128, depth: int = 4,
             emb_dim: int = 32, data_dim: int = 2) -> "Denoiser":
        dims = [data_dim + emb_dim] + [hidden] * depth + [data_dim]
        layers = [Linear.init(a, b, rng, layer_id=f"fc{i}") for i, (a, b) in enumerate(zip(dims, dims[1:]))]
        return cls(layers, emb_dim, data_dim)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x, t, step: int | None = None, capture: list | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if step is None:
            step = int(np.asarray(t).reshape(-1)[0])
        n = x.shape[0]
        tt = np.full(n, t) if np.ndim(t) == 0 else np.asarray(t)
        h = concat([x, Tensor(timestep_embedding(tt, self.emb_dim))], axis=1)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if capture is not None:
                capture.append(h.data)
            h = layer(h, step)
            if i < last:
                h = silu(h)
        return h

    __call__ = forward

    def predict_eps(self, x, t: int, step: int | None = None) -> np.ndarray:
        return self.forward(x, t, step).data

    def for_steps(self, T_infer: int) -> "Denoiser":
        return Denoiser([layer.for_steps(T_infer) for layer in self.layers], self.emb_dim, self.data_dim)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].shape[0]] + [layer.shape[1] for layer in self.layers]


def gaussian_mixture(n: int, seed: int = 0, modes: int = 8, radius: float = 2.0,
                     std: float = 0.15) -> np.ndarray:
    """Points from ``modes`` isotropic Gaussians evenly spaced on a circle."""
    rng = np.random.default_rng(seed)
    k = rng.integers(0, modes, size=n)
    angle = 2 * np.pi * k / modes
    centers = radius * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return centers + std * rng.standard_normal((n, 2))


def two_moons(n: int, seed: int = 0, noise: float = 0.08) -> np.ndarray:
    rng = np.random.default_rng(seed)
    upper = rng.random(n) < 0.5
    theta = np.pi * rng.random(n)
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x - 0.5, y - 0.25], axis=1) * 1.5
    return pts + noise * rng.standard_normal((n, 2))


def train_teacher(dataset, schedule: NoiseSchedule, epochs: int = 40, lr: float = 1e-3,
                  batch: int = 256, seed: int = 0, hidden: int = 128, depth: int = 4,
                  emb_dim: int = 32, weight_decay: float = 0.0,
                  loss_log: list | None = None) -> Denoiser:
    """Fit an epsilon-MSE denoiser; one entry per epoch is appended to ``loss_log``."""
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ConfigurationError("dataset must be a non-empty (n, d) array")
    if not np.all(np.isfinite(data)):
        raise ConfigurationError("dataset contains non-finite values")
    rng = np.random.default_rng(seed)
    model = Denoiser.init(rng, hidden, depth, emb_dim, data.shape[1])
    opt = Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    n = data.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            x0 = data[idx]
            t = rng.integers(0, schedule.T, size=idx.size)
            eps = rng.standard_normal(x0.shape)
            ab = schedule.alpha_bars[t][:, None]
            x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
            opt.zero_grad()
            loss = mean(square(sub(model.forward(x_t, t, step=0), eps)))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"teacher loss became {value} in epoch {epoch}",
                                       iteration=epoch)
            loss.backward()
            opt.step()
            total += value * idx.size
            count += idx.size
        epoch_loss = total / count
        if loss_log is not None:
            loss_log.append(epoch_loss)
        log.debug("teacher epoch %d loss %.5f", epoch, epoch_loss)
    for p in model.parameters():
        p.requires_grad = False
        p.grad = None
    return model


def epsilon_mse(model: Denoiser, dataset, schedule: NoiseSchedule, seed: int = 0,
                batch: int = 2048) -> float:
    """Epsilon-prediction MSE on a fixed random draw of (x0, t, noise)."""
    rng = np.random.default_rng(seed)
    data = np.asarray(dataset, dtype=np.float64)
    x0 = data[rng.integers(0, data.shape[0], size=batch)]
    t = rng.integers(0, schedule.T, size=batch)
    eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bars[t][:, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return float(np.mean((model.forward(x_t, t, step=0).data - eps) ** 2))


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 100
    kind: str = "ddim"
    eta: float = 0.0

    def __post_init__(self):
        if self.kind != "ddim" or self.eta != 0.0:
            raise ConfigurationError("only deterministic DDIM (eta = 0) is supported")
        if self.steps < 1:
            raise ConfigurationError(f"sampler steps must be positive, got {self.steps}")

    def timesteps(self, T: int) -> np.ndarray:
        """Ascending schedule indices visited by the sampler."""
        if self.steps > T:
            raise ConfigurationError(f"sampler steps {self.steps} exceed schedule length {T}")
        if self.steps == 1:
            return np.array([T - 1])
        return np.round(np.arange(self.steps) * (T - 1) / (self.steps - 1)).astype(int)


def sample_trajectory(model, schedule: NoiseSchedule, sampler: SamplerConfig, n: int,
                      seed: int):
    """Run the sampler, returning (final samples, [(x_t, t, step), ...]) in visiting order."""
    ts = sampler.timesteps(schedule.T)
    model = model.for_steps(sampler.steps) if sampler.steps != schedule.T else model
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, model.data_dim))
    states = []
    for j in range(len(ts) - 1, -1, -1):
        t = int(ts[j])
        states.append((x, t, j))
        eps_hat = model.forward(x, t, step=j).data
        x = ddim_step(x, eps_hat, t, int(ts[j - 1]) if j > 0 else -1, schedule)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite sample at step {t}")
    return x, states


def sample(model, schedule: NoiseSchedule, sampler: SamplerConfig, n: int, seed: int) -> np.ndarray:
    return sample_trajectory(model, schedule, sampler, n, seed)[0]
