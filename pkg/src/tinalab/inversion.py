"""Backward tracing of the deterministic sampler: approximate and exact.

The sampling step admits an exact algebraic reversal

    z_t = C1(t) z_{t-1} + C2(t) eps(z_t, t, c),

which is implicit in z_t. The standard approximation sidesteps the
circularity by evaluating the noise at the previous latent and timestep,

    z_t ~= C1(t) z_{t-1} + C2(t) eps(z_{t-1}, t-1, c),

trading exactness for a closed form; the per-step error compounds across
the trajectory. The refined inverter instead treats each step as a
fixed-point problem: it minimises the self-consistency residual

    L_t(z) = || C1 z_{t-1} + C2 eps(z, t, null) - z ||^2

by gradient descent on the latent, starting from the standard estimate.
The condition is structurally fixed to null inside the refined path; the
standard path accepts any condition and doubles as the debug entry point
for conditioned-inversion failure analysis.
"""

from dataclasses import dataclass, field

import numpy as np

from .denoisers import NULL, Condition, Denoiser
from .errors import NumericError
from .optim import make_optimizer
from .schedule import NoiseSchedule, c1, c2

T0_CONVENTION = "t=0 noise evaluation reuses the smallest trained level (alpha_1, time input 0)"


@dataclass(frozen=True)
class TinaConfig:
    """Inner-loop settings for the fixed-point refinement."""

    k: int = 25
    eta: float = 1e-3
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    residual_tolerance: float = 1e-10
    # weight decay on a latent iterate is meaningless; kept at zero

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.eta <= 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.residual_tolerance < 0:
            raise ValueError("residual_tolerance must be >= 0")

    def make_optimizer(self):
        return make_optimizer(self.optimizer, self.eta,
                              beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                              weight_decay=0.0)


@dataclass(frozen=True)
class StepRecord:
    t: int
    init_residual: float
    final_residual: float
    iterations_used: int


@dataclass(frozen=True)
class InversionReport:
    """Result of a full backward trace z_0 -> z_T.

    ``latents[i]`` is z_i, so ``latents[-1]`` is the optimized initial noise.
    For the refined mode ``final_residual <= init_residual`` holds at every
    step (best-iterate rule).
    """

    z_T_star: np.ndarray = field(repr=False)
    per_step: tuple
    mode: str
    latents: np.ndarray = field(repr=False)
    condition: str = "null"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("standard", "tina"):
            raise ValueError(f"unknown inversion mode {self.mode!r}")
        if self.mode == "tina":
            for rec in self.per_step:
                if rec.final_residual > rec.init_residual:
                    raise ValueError(
                        f"monotone acceptance violated at t={rec.t}: "
                        f"{rec.final_residual} > {rec.init_residual}")

    def residual_curve(self):
        """(t, init_residual, final_residual, iterations_used) rows."""
        return [(r.t, r.init_residual, r.final_residual, r.iterations_used)
                for r in self.per_step]


def _boundary_epsilon(eps_model: Denoiser, z, t: int, c: Condition):
    """eps at timestep index t-1, mapping the t=1 boundary per T0_CONVENTION."""
    if t == 1:
        return eps_model.epsilon_t0(z, c)
    return eps_model.epsilon(z, t - 1, c)


def standard_inversion_step(eps_model: Denoiser, z_prev, t: int, c: Condition,
                            schedule: NoiseSchedule):
    """Approximate forward step: noise estimated at the previous latent."""
    z_prev = np.asarray(z_prev, dtype=np.float64)
    eps = _boundary_epsilon(eps_model, z_prev, t, c)
    return c1(schedule, t) * z_prev + c2(schedule, t) * eps


def fixed_point_map(eps_model: Denoiser, z_t, z_prev, t: int, c: Condition,
                    schedule: NoiseSchedule):
    """Exact inversion relation evaluated at z_t; its fixed point is the true latent."""
    return c1(schedule, t) * np.asarray(z_prev, dtype=np.float64) \
        + c2(schedule, t) * eps_model.epsilon(z_t, t, c)


def tina_loss(eps_model: Denoiser, z_t, z_prev, t: int, schedule: NoiseSchedule):
    """Self-consistency residual under the null condition, with its gradient.

    Returns (loss, grad): loss = ||f(z_t) - z_t||^2 and
    grad = 2 (C2 J_eps - I)^T r computed through the model's input-vjp
    contract, where r = f(z_t) - z_t.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    r = fixed_point_map(eps_model, z_t, z_prev, t, NULL, schedule) - z_t
    loss = float(np.dot(r, r))
    grad = 2.0 * (c2(schedule, t) * eps_model.input_vjp(z_t, t, NULL, r) - r)
    return loss, grad


def tina_inversion_step(eps_model: Denoiser, z_prev, t: int, schedule: NoiseSchedule,
                        config: TinaConfig):
    """One refined inversion step: standard initialisation, then up to K
    residual-minimisation iterations; returns the best iterate visited.

    The optimizer state is fresh at every timestep.
    """
    z = standard_inversion_step(eps_model, z_prev, t, NULL, schedule)
    loss, grad = tina_loss(eps_model, z, z_prev, t, schedule)
    best_z, best_loss = z, loss
    init_loss = loss
    iterations = 0
    opt = config.make_optimizer()
    for k in range(1, config.k + 1):
        if best_loss < config.residual_tolerance:
            break
        (z,) = opt.update([z], [grad])
        if not np.all(np.isfinite(z)):
            raise NumericError(f"iterate went non-finite at step t={t}, iteration {k}",
                               step=t, iteration=k)
        loss, grad = tina_loss(eps_model, z, z_prev, t, schedule)
        iterations = k
        if loss < best_loss:
            best_z, best_loss = z, loss
    record = StepRecord(t=t, init_residual=init_loss, final_residual=best_loss,
                        iterations_used=iterations)
    return best_z, record


def standard_inversion(eps_model: Denoiser, z0, c: Condition, schedule: NoiseSchedule,
                       record_residuals: bool = True) -> InversionReport:
    """Approximate backward trace z_0 -> z_T under condition ``c``.

    With a non-null condition this is the debug entry point reproducing the
    conditioned-inversion failure mode. The per-step residual
    ||f(z_t) - z_t||^2 is recorded as a diagnostic but never fed back.
    """
    z = np.asarray(z0, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("target latent is non-finite", step=0)
    path = [z]
    records = []
    for t in range(1, schedule.num_steps + 1):
        z = standard_inversion_step(eps_model, path[-1], t, c, schedule)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"latent went non-finite at step {t}", step=t)
        if record_residuals:
            r = fixed_point_map(eps_model, z, path[-1], t, c, schedule) - z
            resid = float(np.dot(r, r))
        else:
            resid = float("nan")
        records.append(StepRecord(t=t, init_residual=resid, final_residual=resid,
                                  iterations_used=0))
        path.append(z)
    return InversionReport(z_T_star=path[-1], per_step=tuple(records), mode="standard",
                           latents=np.stack(path), condition=str(c),
                           metadata={"t0_convention": T0_CONVENTION})


def tina_inversion(eps_model: Denoiser, z0, schedule: NoiseSchedule,
                   config: TinaConfig = TinaConfig()) -> InversionReport:
    """Optimization-based backward trace z_0 -> z_T under the null condition.

    Works on any denoiser exposing the input-vjp contract, erased or not.
    """
    z = np.asarray(z0, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("target latent is non-finite", step=0)
    path = [z]
    records = []
    for t in range(1, schedule.num_steps + 1):
        z, record = tina_inversion_step(eps_model, path[-1], t, schedule, config)
        records.append(record)
        path.append(z)
    return InversionReport(z_T_star=path[-1], per_step=tuple(records), mode="tina",
                           latents=np.stack(path), condition="null",
                           metadata={"t0_convention": T0_CONVENTION,
                                     "k": config.k, "eta": config.eta,
                                     "optimizer": config.optimizer})


def step_consistency_errors(report: InversionReport, eps_model: Denoiser,
                            schedule: NoiseSchedule, condition: Condition = NULL):
    """Re-apply the sampler step to each accepted latent and measure
    ||ddim_step(z_t) - z_{t-1}|| -- the fixed-point constraint restated
    through the sampling equation. Returns [(t, error)] rows.
    """
    from .sampler import ddim_step

    out = []
    for t in range(1, schedule.num_steps + 1):
        back = ddim_step(eps_model, report.latents[t], t, condition, schedule)
        out.append((t, float(np.linalg.norm(back - report.latents[t - 1]))))
    return out
