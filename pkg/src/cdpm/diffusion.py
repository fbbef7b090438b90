"""Noise schedule, forward noising and deterministic reverse sampling.

The reverse sampler is the eta=0 deterministic update in clean-signal
prediction form: the denoiser callback returns an estimate of the clean
series and the step maps it back toward the previous noise level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("beta-cosine", "alpha-bar-cosine")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise tables for K diffusion steps (1-indexed access)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta, alpha, alpha_bar = self.beta, self.alpha, self.alpha_bar
        if beta.ndim != 1 or beta.shape != alpha.shape or beta.shape != alpha_bar.shape:
            raise ValueError("schedule tables must be 1-D and equally sized")
        if not (beta[0] > 0 and beta[-1] < 1):
            raise ValueError(f"beta endpoints out of (0, 1): {beta[0]}, {beta[-1]}")
        if np.any(np.diff(beta) < 0):
            raise ValueError("beta must be nondecreasing")
        if len(beta) > 1 and not np.all(np.diff(alpha_bar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if np.max(np.abs(alpha_bar - np.cumprod(alpha))) > 1e-12:
            raise ValueError("alpha_bar is not the cumulative product of alpha")

    @property
    def K(self) -> int:
        return len(self.beta)

    def abar(self, k: int) -> float:
        """Cumulative signal coefficient at step k in [1, K]; k=0 means clean."""
        if k == 0:
            return 1.0
        if not 1 <= k <= self.K:
            raise ValueError(f"step {k} outside [1, {self.K}]")
        return float(self.alpha_bar[k - 1])


def build_schedule(
    K: int,
    beta_1: float = 1e-4,
    beta_K: float = 0.5,
    kind: str = "beta-cosine",
) -> NoiseSchedule:
    """Construct a K-step noise schedule.

    ``beta-cosine`` interpolates beta between the two endpoints along a
    cosine-shaped ramp, so both endpoints hold exactly. The alternative
    ``alpha-bar-cosine`` is the squared-cosine signal schedule; it ignores
    the beta endpoints.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if not (0 < beta_1 <= beta_K < 1):
        raise ValueError(f"need 0 < beta_1 <= beta_K < 1, got {beta_1}, {beta_K}")
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; choose from {SCHEDULE_KINDS}")
    if kind == "beta-cosine":
        if K == 1:
            beta = np.array([beta_1])
        else:
            k = np.arange(K, dtype=np.float64)
            ramp = (1.0 - np.cos(math.pi * k / (K - 1))) / 2.0
            beta = beta_1 + (beta_K - beta_1) * ramp
    else:
        s = 0.008
        t = np.arange(K + 1, dtype=np.float64) / K
        f = np.cos((t + s) / (1.0 + s) * math.pi / 2.0) ** 2
        abar = f[1:] / f[0]
        beta = np.clip(1.0 - abar / np.concatenate([[1.0], abar[:-1]]), 1e-8, 0.999)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def q_sample(x0: np.ndarray, k: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noisy series at step k: sqrt(abar_k) * x0 + sqrt(1 - abar_k) * eps."""
    if not 1 <= k <= sched.K:
        raise ValueError(f"step {k} outside [1, {sched.K}]")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match series {x0.shape}")
    ab = sched.abar(k)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def ddim_step(
    x_k: np.ndarray,
    x0_hat: np.ndarray,
    k: int,
    k_prev: int,
    sched: NoiseSchedule,
) -> np.ndarray:
    """Deterministic reverse update from step k to k_prev (< k).

    The residual noise implied by the clean estimate is re-injected at the
    lower level; k_prev = 0 returns the clean estimate itself.
    """
    if k_prev >= k:
        raise ValueError(f"k_prev ({k_prev}) must be smaller than k ({k})")
    if k_prev < 0:
        raise ValueError(f"k_prev must be >= 0, got {k_prev}")
    x_k = np.asarray(x_k, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    if k_prev == 0:
        return x0_hat.copy()
    ab = sched.abar(k)
    eps_hat = (x_k - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)
    ab_prev = sched.abar(k_prev)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_step_sequence(K: int, num_steps: int | None = None) -> list[int]:
    """Descending step indices from K, evenly strided, for the sampler."""
    if num_steps is None or num_steps >= K:
        return list(range(K, 0, -1))
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    grid = np.unique(np.round(np.linspace(K, 1, num_steps)).astype(int))
    return [int(v) for v in grid[::-1]]


def sample_loop(
    denoiser,
    cond,
    sched: NoiseSchedule,
    steps: list[int],
    seed: int,
    shape: tuple,
) -> np.ndarray:
    """Run the reverse process from pure noise down to a clean forecast.

    ``denoiser(x_k, k, cond)`` returns the clean-series estimate at step k.
    ``steps`` must start at K and be strictly descending; after the final
    entry the update lands on step 0. The seed fixes the initial Gaussian
    draw, so the loop is a pure function of (seed, cond, parameters).
    """
    steps = [int(k) for k in steps]
    if not steps or steps[0] != sched.K:
        raise ValueError(f"steps must start at K={sched.K}, got {steps[:3]}...")
    if any(b >= a for a, b in zip(steps, steps[1:])) or steps[-1] < 1:
        raise ValueError("steps must be strictly descending within [1, K]")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    for i, k in enumerate(steps):
        x0_hat = np.asarray(denoiser(x, k, cond), dtype=np.float64)
        if not np.all(np.isfinite(x0_hat)):
            raise RuntimeError(f"denoiser returned non-finite values at step k={k}")
        k_prev = steps[i + 1] if i + 1 < len(steps) else 0
        x = ddim_step(x, x0_hat, k, k_prev, sched)
    return x
