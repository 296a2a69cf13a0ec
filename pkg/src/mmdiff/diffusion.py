"""Noise schedules, forward corruption, ancestral sampling and guidance."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables indexed by t = 0..T; index 0 is the clean state."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_sigma: np.ndarray

    def check(self) -> None:
        b = self.beta[1:]
        if not np.all((b > 0) & (b < 1)):
            raise ConfigError("beta must lie in (0, 1)")
        if self.alpha_bar[0] != 1.0 or not np.all(np.diff(self.alpha_bar) < 0):
            raise ConfigError("alpha_bar must start at 1 and strictly decrease")


def make_schedule(T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2) -> NoiseSchedule:
    """Linear beta schedule over T steps.

    Arrays have length T + 1 with a padding entry at t = 0 (beta 0,
    alpha_bar 1) so that ``alpha_bar[t]`` reads naturally.
    """
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sched = NoiseSchedule(T, beta, alpha, alpha_bar, np.sqrt(beta))
    sched.check()
    return sched


def _check_t(t, sched: NoiseSchedule, lo: int = 0) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < lo) or np.any(t > sched.T):
        raise ValueError(f"timestep out of range [{lo}, {sched.T}]: {t}")
    return t


def _per_sample(values: np.ndarray, t: np.ndarray, ndim: int) -> np.ndarray:
    v = values[t]
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` is an int or one int per leading-batch item. Works on arrays and on
    tensors (gradients flow to both ``x0`` and ``eps``).
    """
    t = _check_t(t, sched)
    if T.as_tensor(x0).shape != T.as_tensor(eps).shape:
        raise T.ShapeError(f"q_sample: x0 {np.shape(x0)} and eps {np.shape(eps)} differ")
    nd = np.ndim(x0.data if isinstance(x0, Tensor) else x0)
    a = np.sqrt(_per_sample(sched.alpha_bar, t, nd))
    s = np.sqrt(1.0 - _per_sample(sched.alpha_bar, t, nd))
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return T.as_tensor(x0) * _coef(a, x0) + T.as_tensor(eps) * _coef(s, eps)
    return a * np.asarray(x0) + s * np.asarray(eps)


def _coef(c, like):
    if np.ndim(c) == 0:
        return float(c)
    shape = T.as_tensor(like).shape
    return Tensor(np.broadcast_to(c, shape).copy())


def loss_eps(eps_model, x0, t, eps, sched: NoiseSchedule):
    """Single-modality noise-prediction MSE: || eps - eps_model(x_t, t) ||^2 (mean)."""
    xt = q_sample(x0, t, eps, sched)
    return T.mse(eps_model(xt, t), eps)


def cfg_combine(eps_uncond, eps_cond, s: float):
    """eps(empty) + s * (eps(y) - eps(empty))."""
    eu, ec = np.asarray(eps_uncond), np.asarray(eps_cond)
    if eu.shape != ec.shape:
        raise T.ShapeError(f"cfg_combine: shapes {eu.shape} and {ec.shape} differ")
    if s == 1:
        return ec.copy()
    if s == 0:
        return eu.copy()
    return eu + s * (ec - eu)


def ddpm_step(x_t, eps_hat, t: int, sched: NoiseSchedule, z) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}; the noise term is dropped at t = 1."""
    t = int(_check_t(t, sched, lo=1))
    x_t, eps_hat = np.asarray(x_t), np.asarray(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise T.ShapeError(f"ddpm_step: x_t {x_t.shape} vs eps_hat {eps_hat.shape}")
    mu = (x_t - sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t]) * eps_hat) / np.sqrt(sched.alpha[t])
    if t == 1:
        return mu
    return mu + sched.posterior_sigma[t] * np.asarray(z)


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 2.0
    uncond_mode: str = "max-noise-condition"

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ConfigError(f"guidance scale must be finite and >= 0, got {self.scale}")
        if self.uncond_mode not in ("null-token", "max-noise-condition"):
            raise ConfigError(f"unknown uncond_mode {self.uncond_mode!r}")


Denoiser = Callable[[np.ndarray, "np.ndarray | None", np.ndarray, np.ndarray], np.ndarray]


def sample_loop(denoiser: Denoiser, condition, sched: NoiseSchedule, guide: GuidanceConfig,
                seed, shape: tuple[int, ...]) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    ``denoiser(x_t, cond, t, cond_t)`` returns the predicted noise; ``t`` and
    ``cond_t`` are int arrays with one entry per batch row. ``cond`` is the
    clean condition (``cond_t`` = 0), its fully noised version (``cond_t`` = T,
    max-noise unconditional branch) or ``None`` (null token). With guidance the
    conditional and unconditional rows are evaluated in one batched call.
    """
    rng = np.random.default_rng(seed)
    B = shape[0]
    x = rng.standard_normal(shape)
    guided = condition is not None and guide.scale != 1.0
    cond = None if condition is None else np.asarray(condition)
    if guided:
        if guide.uncond_mode == "max-noise-condition":
            uncond = q_sample(cond, sched.T, rng.standard_normal(cond.shape), sched)
            uncond_t = sched.T
        else:
            uncond, uncond_t = np.zeros_like(cond), 0
        cond2 = np.concatenate([cond, uncond])
        ct2 = np.concatenate([np.zeros(B, np.int64), np.full(B, uncond_t, np.int64)])
    for t in range(sched.T, 0, -1):
        if guided:
            out = np.asarray(denoiser(np.concatenate([x, x]), cond2, np.full(2 * B, t), ct2))
            if out.shape != (2 * B,) + shape[1:]:
                raise T.ShapeError(f"denoiser returned {out.shape}, expected {(2 * B,) + shape[1:]}")
            eps = cfg_combine(out[B:], out[:B], guide.scale)
        else:
            eps = np.asarray(denoiser(x, cond, np.full(B, t), np.zeros(B, np.int64)))
            if eps.shape != x.shape:
                raise T.ShapeError(f"denoiser returned {eps.shape}, expected {x.shape}")
        z = rng.standard_normal(shape) if t > 1 else np.zeros(shape)
        x = ddpm_step(x, eps, t, sched, z)
    return x
