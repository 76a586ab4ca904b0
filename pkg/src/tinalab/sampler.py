"""Deterministic reverse-process sampling.

One reverse step predicts the clean latent from the current noisy latent,

    z0_hat = (z_t - sqrt(1 - a_t) eps(z_t, t, c)) / sqrt(a_t),

then recombines it at the previous noise level,

    z_{t-1} = sqrt(a_{t-1}) z0_hat + sqrt(1 - a_{t-1}) eps(z_t, t, c).

Both uses share one eps evaluation -- that is part of the contract, not an
optimisation: the algebraic reversal z_t = C1 z_{t-1} + C2 eps holds exactly
only when the same eps value appears on both sides.
"""

from dataclasses import dataclass, field

import numpy as np

from .denoisers import NULL, Condition, Denoiser
from .errors import NumericError
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class Trajectory:
    """Ordered latent path of a full run; length is always T + 1.

    ``latents[i]`` is the i-th latent in traversal order: z_T..z_0 for
    generation, z_0..z_T for inversion.
    """

    latents: np.ndarray = field(repr=False)
    direction: str = "generation"
    guidance: float | None = None

    def __post_init__(self):
        latents = np.asarray(self.latents, dtype=np.float64)
        if latents.ndim != 2:
            raise ValueError("latents must be a (T+1, d) array")
        if not np.all(np.isfinite(latents)):
            raise ValueError("trajectory contains non-finite latents")
        if self.direction not in ("generation", "inversion"):
            raise ValueError(f"unknown direction {self.direction!r}")
        latents.setflags(write=False)
        object.__setattr__(self, "latents", latents)

    @property
    def num_steps(self):
        return len(self.latents) - 1

    @property
    def final(self):
        return self.latents[-1]


def _check_model_schedule(model: Denoiser, schedule: NoiseSchedule):
    if model.num_steps != schedule.num_steps:
        raise ValueError(
            f"model was built for T={model.num_steps} but schedule has T={schedule.num_steps}")


def cfg_epsilon(eps_model: Denoiser, z, t: int, c: Condition, scale: float):
    """Guided prediction eps(null) + scale * (eps(c) - eps(null)).

    The null condition and scale 1 both collapse to a single evaluation.
    """
    if scale < 0:
        raise ValueError(f"guidance scale must be >= 0, got {scale}")
    if c.is_null:
        return eps_model.epsilon(z, t, NULL)
    if scale == 1.0:
        return eps_model.epsilon(z, t, c)
    uncond = eps_model.epsilon(z, t, NULL)
    cond = eps_model.epsilon(z, t, c)
    return uncond + scale * (cond - uncond)


def predict_z0(eps_model: Denoiser, z_t, t: int, c: Condition, schedule: NoiseSchedule,
               guidance: float | None = None):
    """Clean-latent prediction at step t."""
    z0_hat, _, _ = _step_pair(eps_model, z_t, t, c, schedule, guidance)
    return z0_hat


def _step_pair(eps_model, z_t, t, c, schedule, guidance):
    """(z0_hat, eps, z_prev) with a single eps evaluation."""
    _check_model_schedule(eps_model, schedule)
    if not 1 <= t <= schedule.num_steps:
        raise IndexError(f"step {t} outside [1, {schedule.num_steps}]")
    eps = eps_model.epsilon(z_t, t, c) if guidance is None else cfg_epsilon(eps_model, z_t, t, c, guidance)
    a_t = schedule.alpha(t)
    a_prev = schedule.alpha(t - 1)
    z0_hat = (z_t - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
    z_prev = np.sqrt(a_prev) * z0_hat + np.sqrt(1.0 - a_prev) * eps
    return z0_hat, eps, z_prev


def ddim_step(eps_model: Denoiser, z_t, t: int, c: Condition, schedule: NoiseSchedule,
              guidance: float | None = None):
    """One deterministic reverse step z_t -> z_{t-1}."""
    return _step_pair(eps_model, z_t, t, c, schedule, guidance)[2]


def ddim_step_with_eps(eps_model: Denoiser, z_t, t: int, c: Condition, schedule: NoiseSchedule):
    """(z_{t-1}, eps) -- exposes the shared eps for round-trip checks."""
    _, eps, z_prev = _step_pair(eps_model, z_t, t, c, schedule, None)
    return z_prev, eps


def ddim_sample(eps_model: Denoiser, z_T, c: Condition, schedule: NoiseSchedule,
                guidance: float | None = None) -> Trajectory:
    """Full deterministic trajectory z_T -> z_0.

    Pure function of (model, z_T, c, schedule, guidance); identical inputs
    give identical trajectories.
    """
    z = np.asarray(z_T, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("initial latent is non-finite", step=schedule.num_steps)
    path = [z]
    for t in range(schedule.num_steps, 0, -1):
        z = ddim_step(eps_model, z, t, c, schedule, guidance)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"latent went non-finite at step {t}", step=t)
        path.append(z)
    return Trajectory(np.stack(path), direction="generation", guidance=guidance)
