"""Diffusion noise schedule and the inversion coefficients derived from it.

Convention: ``alphas[t]`` is the cumulative signal coefficient at step t,
with ``alphas[0] = 1`` (clean data) and ``alphas[T]`` the noisiest level.
The forward marginal is z_t = sqrt(a_t) z_0 + sqrt(1 - a_t) eps.

All arithmetic is float64: c2 is a difference of near-equal terms at small
t and degrades visibly in float32.
"""

from dataclasses import InitVar, dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Fixed sequence a_0..a_T of cumulative signal coefficients.

    Immutable after construction; safe to share across concurrent workers.
    ``strict=False`` skips the monotonicity check so tests can build
    degenerate (constant) schedules; every real construction path is strict.
    """

    alphas: np.ndarray = field(repr=False)
    strict: InitVar[bool] = True

    def __post_init__(self, strict):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        if alphas.ndim != 1 or alphas.size < 1:
            raise ValueError("schedule needs at least a_0")
        if alphas[0] != 1.0:
            raise ValueError(f"a_0 must be exactly 1.0, got {alphas[0]!r}")
        if not np.all(np.isfinite(alphas)):
            raise ValueError("schedule contains non-finite values")
        if np.any(alphas <= 0.0) or np.any(alphas > 1.0):
            raise ValueError("all alphas must lie in (0, 1]")
        if strict and np.any(np.diff(alphas) >= 0.0):
            raise ValueError("alphas must be strictly decreasing")
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)

    @property
    def num_steps(self):
        return len(self.alphas) - 1

    def alpha(self, t: int) -> float:
        """a_t for t in [0, T]."""
        if not 0 <= t <= self.num_steps:
            raise IndexError(f"step {t} outside [0, {self.num_steps}]")
        return float(self.alphas[t])


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                         train_steps: int | None = None) -> NoiseSchedule:
    """Linear-beta schedule: a_t is the cumulative product of (1 - beta_s).

    With ``train_steps`` set, the betas are spaced over that many fine steps
    and the cumulative products are subsampled down to T entries (stride
    selection over a longer training schedule); otherwise the betas are
    spaced over the T steps directly.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    n = T if train_steps is None else int(train_steps)
    if n < T:
        raise ValueError(f"train_steps {n} must be >= T {T}")
    betas = np.linspace(beta_start, beta_end, n, dtype=np.float64)
    cumprod = np.cumprod(1.0 - betas)
    if n == T:
        picked = cumprod
    else:
        # evenly spaced fine-step indices, always including the last
        idx = np.round(np.linspace(n / T, n, T)).astype(int) - 1
        picked = cumprod[idx]
    return NoiseSchedule(np.concatenate(([1.0], picked)))


def c1(schedule: NoiseSchedule, t: int) -> float:
    """sqrt(a_t / a_{t-1}); the rescaling coefficient of the exact inversion relation."""
    _check_step(schedule, t)
    return float(np.sqrt(schedule.alphas[t] / schedule.alphas[t - 1]))


def c2(schedule: NoiseSchedule, t: int) -> float:
    """sqrt(1 - a_t) - sqrt(a_t (1 - a_{t-1}) / a_{t-1}); the noise coefficient.

    Zero exactly when a_t == a_{t-1}; may be negative for slowly decreasing
    schedules.
    """
    _check_step(schedule, t)
    a_t = schedule.alphas[t]
    a_p = schedule.alphas[t - 1]
    return float(np.sqrt(1.0 - a_t) - np.sqrt(a_t * (1.0 - a_p) / a_p))


def _check_step(schedule: NoiseSchedule, t: int):
    if not 1 <= t <= schedule.num_steps:
        raise IndexError(f"step {t} outside [1, {schedule.num_steps}]")
