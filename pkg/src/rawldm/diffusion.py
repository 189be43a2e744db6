"""Noise schedule, forward process, training losses, guidance and samplers.

Schedule arrays are indexed by the step ``t`` directly: entry 0 holds the
``t = 0`` convention (``alpha_bar = 1``, ``beta = 0``) and entries ``1..T``
the actual steps.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericalError, RangeError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def check(self, t, lo: int = 1) -> np.ndarray:
        ts = np.asarray(t)
        if ts.dtype.kind not in "iu" and not np.all(ts == np.round(ts)):
            raise RangeError(f"timestep {t} is not an integer")
        if np.any(ts < lo) or np.any(ts > self.T):
            raise RangeError(f"timestep {t} outside [{lo}, {self.T}]")
        return ts.astype(np.int64)

    def rows(self):
        for t in range(1, self.T + 1):
            yield t, self.beta[t], self.alpha[t], self.alpha_bar[t], self.sigma[t]


def make_linear_schedule(T_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T_steps < 1:
        raise ConfigError(f"need at least one diffusion step, got {T_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T_steps)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.flags.writeable = False
    sigma = np.sqrt(beta)
    sigma.flags.writeable = False
    return NoiseSchedule(T_steps, beta, alpha, alpha_bar, sigma)


def dump_schedule(schedule: NoiseSchedule, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "beta", "alpha", "alpha_bar", "sigma"])
        for row in schedule.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return path


def _coef(values: np.ndarray, t, like: Tensor):
    """Per-sample coefficient: a python float for scalar ``t``, else an (N, 1, ...) array."""
    ts = np.asarray(t)
    if ts.ndim == 0:
        return float(values[int(ts)])
    if ts.shape[0] != like.shape[0]:
        raise ShapeError(f"{ts.shape[0]} timesteps for a batch of {like.shape[0]}")
    return values[ts].reshape((-1,) + (1,) * (like.ndim - 1)).astype(like.dtype)


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def q_sample(schedule: NoiseSchedule, z0, t, noise) -> Tensor:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) noise``; ``t`` is a step or one step per sample."""
    z0, noise = _tensor(z0), _tensor(noise)
    if z0.shape != noise.shape:
        raise ShapeError(f"z0 {z0.shape} and noise {noise.shape} differ")
    ts = schedule.check(t)
    ab = schedule.alpha_bar
    return z0 * _coef(np.sqrt(ab), ts, z0) + noise * _coef(np.sqrt(1.0 - ab), ts, z0)


def one_step_z0(schedule: NoiseSchedule, z_t, t, eps_hat) -> Tensor:
    """Closed-form clean-latent estimate ``(z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)``."""
    z_t, eps_hat = _tensor(z_t), _tensor(eps_hat)
    ts = schedule.check(t, lo=0)
    ab = schedule.alpha_bar[ts]
    if np.any(ab <= 0):
        raise NumericalError(f"alpha_bar is zero at t={t}; the clean latent cannot be recovered")
    return (z_t - eps_hat * _coef(np.sqrt(1.0 - schedule.alpha_bar), ts, z_t)) * \
        _coef(1.0 / np.sqrt(schedule.alpha_bar), ts, z_t)


def ldm_loss(model, schedule: NoiseSchedule, z0: Tensor, cond, t, rng: np.random.Generator,
             return_parts: bool = False):
    """Noise-prediction MSE with unit weight for every step."""
    noise = rng.standard_normal(z0.shape).astype(z0.dtype)
    z_t = q_sample(schedule, z0, t, noise)
    eps = model.predict_noise(z_t, t, cond)
    loss = T.mse(eps, Tensor(noise))
    if return_parts:
        return loss, z_t, eps
    return loss


def image_loss(decoder, z_hat0: Tensor, skips, x_clean: Tensor) -> Tensor:
    """``mean((x - D(z_hat0))^2)``; ``decoder`` is a VAE or any ``f(z, skips)``."""
    decode = decoder.decode if hasattr(decoder, "decode") else decoder
    out = decode(z_hat0, skips)
    if out.shape != x_clean.shape:
        raise ShapeError(f"decoded image {out.shape} and target {x_clean.shape} differ")
    return T.mse(out, x_clean)


def combined_loss(l_ldm: Tensor, l_image: Optional[Tensor], lam: float = 1.0) -> Tensor:
    if lam < 0:
        raise ConfigError(f"lambda must be non-negative, got {lam}")
    if l_image is None or lam == 0:
        return l_ldm
    return l_ldm + l_image * float(lam)


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 2.0
    null_seed: int = 0

    def __post_init__(self):
        if not self.omega >= 0:
            raise ConfigError(f"guidance weight must be non-negative, got {self.omega}")


# reference weights: 2.0 for SID and LRD style data, 2.5 for ELD style data
DEFAULT_GUIDANCE = {"sid": 2.0, "lrd": 2.0, "eld": 2.5}


def cfg_predict(model, z_t: Tensor, t, cond, guidance: GuidanceConfig, null_cond=None) -> Tensor:
    """``eps_u + omega (eps_c - eps_u)``; ``null_cond`` caches the unconditional features."""
    w = float(guidance.omega)
    if w == 1.0:
        return model.predict_noise(z_t, t, cond)
    if null_cond is None:
        null_cond = model.null_condition(z_t.shape, guidance.null_seed)
    eps_u = model.predict_noise(z_t, t, null_cond)
    if w == 0.0:
        return eps_u
    eps_c = model.predict_noise(z_t, t, cond)
    return eps_u + (eps_c - eps_u) * w


def ancestral_step(model, schedule: NoiseSchedule, z_t: Tensor, t: int, cond, guidance: GuidanceConfig,
                   rng: np.random.Generator, null_cond=None, eps_hat: Optional[Tensor] = None) -> Tensor:
    """One reverse step with ``sigma_t = sqrt(beta_t)``; no noise is added at ``t = 1``."""
    t = int(schedule.check(t))
    if eps_hat is None:
        eps_hat = cfg_predict(model, z_t, t, cond, guidance, null_cond)
    a, ab = schedule.alpha[t], schedule.alpha_bar[t]
    mean = (z_t - eps_hat * float((1.0 - a) / math.sqrt(1.0 - ab))) * float(1.0 / math.sqrt(a))
    if t == 1:
        return mean
    sig = float(schedule.sigma[t])
    if sig == 0.0:
        return mean
    return mean + rng.standard_normal(z_t.shape).astype(z_t.dtype) * sig


def ddim_timesteps(T_steps: int, steps: int) -> List[int]:
    if steps < 1:
        raise ConfigError(f"need at least one sampling step, got {steps}")
    if steps > T_steps:
        raise ConfigError(f"{steps} sampling steps exceed the {T_steps}-step schedule")
    stride = T_steps // steps
    return [T_steps - i * stride for i in range(steps)]


def ddim_step(schedule: NoiseSchedule, z_t: Tensor, t: int, t_prev: int, eps_hat: Tensor) -> Tensor:
    z0 = one_step_z0(schedule, z_t, t, eps_hat)
    ab = schedule.alpha_bar[t_prev]
    return z0 * float(math.sqrt(ab)) + eps_hat * float(math.sqrt(1.0 - ab))


def ddim_sample(model, schedule: NoiseSchedule, cond, steps: int = 50,
                guidance: GuidanceConfig = GuidanceConfig(), rng: Optional[np.random.Generator] = None,
                shape=None, z_T: Optional[Tensor] = None, return_trajectory: bool = False):
    """Deterministic (eta = 0) sampling from ``z_T`` over a uniform-stride subsequence.

    ``z_T`` is drawn from ``rng`` when not given. Returns the final latent, or
    ``(latent, trajectory)`` where the trajectory lists every intermediate ``z``.
    """
    seq = ddim_timesteps(schedule.T, steps)
    if z_T is None:
        if shape is None:
            raise ConfigError("ddim_sample needs either z_T or a latent shape")
        rng = rng if rng is not None else np.random.default_rng(0)
        z_T = Tensor(rng.standard_normal(shape).astype(np.float32))
    null_cond = None
    if guidance.omega != 1.0:
        null_cond = model.null_condition(z_T.shape, guidance.null_seed)
    z = z_T
    traj = [z.data.copy()] if return_trajectory else None
    with T.no_grad():
        for i, t in enumerate(seq):
            t_prev = seq[i + 1] if i + 1 < len(seq) else 0
            eps = cfg_predict(model, z, t, cond, guidance, null_cond)
            z = ddim_step(schedule, z, t, t_prev, eps)
            if traj is not None:
                traj.append(z.data.copy())
    return (z, traj) if return_trajectory else z
