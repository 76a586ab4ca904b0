"""Training of the network denoiser and fine-tuned concept erasure.

The training objective is the usual denoising regression: diffuse a clean
latent to z_t = sqrt(a_t) z_0 + sqrt(1 - a_t) eps and regress the network
output at (z_t, t, c) onto eps. Timesteps are sampled uniformly over
[1, T]; a fraction of conditions is dropped to null so the unconditional
field is learned alongside the conditional ones.

Fine-tuned erasure regresses the network's predictions under the erased
concept's condition toward the frozen original model's null predictions,
over diffused samples of the concept as generated by the model itself.
Everything is seed-deterministic end to end.
"""

from dataclasses import dataclass

import numpy as np

from .denoisers import NULL, Condition, MlpDenoiser
from .errors import TrainingError
from .optim import make_optimizer
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    epochs: int = 40
    batch_size: int = 128
    batches_per_epoch: int = 50
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    null_fraction: float = 0.15
    optimizer: str = "adamw"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.batches_per_epoch < 1:
            raise ValueError("epochs must be >= 0, batch sizes >= 1")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if not 0.0 <= self.null_fraction <= 1.0:
            raise ValueError("null_fraction must lie in [0, 1]")


def denoising_loss(model: MlpDenoiser, z0, c: Condition, eps, t: int,
                   schedule: NoiseSchedule) -> float:
    """Squared prediction error ||eps - eps_theta(z_t, t, c)||^2 for one sample."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    a_t = schedule.alpha(t)
    z_t = np.sqrt(a_t) * z0 + np.sqrt(1.0 - a_t) * eps
    resid = eps - model.epsilon(z_t, t, c)
    return float(np.dot(resid, resid))


def _sample_batch(rng, sampler, model, config, schedule):
    """One diffused minibatch: (z_t, t_frac, embedding rows, eps targets)."""
    z0, conditions = sampler(rng, config.batch_size)
    z0 = np.asarray(z0, dtype=np.float64)
    n = len(z0)
    rows = np.empty(n, dtype=int)
    drop = rng.random(n) < config.null_fraction
    for j, c in enumerate(conditions):
        rows[j] = 0 if drop[j] else model.embedding_row(c)
    t = rng.integers(1, schedule.num_steps + 1, size=n)
    a_t = schedule.alphas[t]
    eps = rng.standard_normal(z0.shape)
    z_t = np.sqrt(a_t)[:, None] * z0 + np.sqrt(1.0 - a_t)[:, None] * eps
    return z_t, t / schedule.num_steps, rows, eps


def train_denoiser(sampler, concepts, config: TrainConfig, schedule: NoiseSchedule,
                   dim=None, hidden=(64, 64), emb_dim=4, init_model=None):
    """Train a network denoiser on clean samples from ``sampler``.

    ``sampler(rng, n)`` must return (latents (n, d), conditions list).
    Returns (model, history) where history is the per-epoch mean loss.
    Deterministic given ``config.seed``; with 0 epochs the initialization
    is returned unchanged.
    """
    if init_model is not None:
        model = init_model
    else:
        if dim is None:
            raise ValueError("dim is required when no init_model is given")
        model = MlpDenoiser.create(dim, concepts, schedule.num_steps,
                                   hidden=hidden, emb_dim=emb_dim, seed=config.seed)
    rng = np.random.default_rng([config.seed, 0xD1F])
    opt = make_optimizer(config.optimizer, config.lr, beta1=config.beta1,
                         beta2=config.beta2, weight_decay=config.weight_decay)
    params = model.parameters()
    history = []
    for epoch in range(config.epochs):
        losses = np.empty(config.batches_per_epoch)
        for b in range(config.batches_per_epoch):
            z_t, t_frac, rows, eps = _sample_batch(rng, sampler, model, config, schedule)
            loss, grads = model.loss_and_param_grads(z_t, t_frac, rows, eps)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
            params = opt.update(params, grads)
            model = model.with_parameters(params)
            losses[b] = loss
        history.append(float(losses.mean()))
    return model, history


def _generate_pool(model: MlpDenoiser, concept: str, schedule: NoiseSchedule,
                   rng, n: int):
    """Concept exemplars produced by the model itself (batched sampler loop)."""
    z = rng.standard_normal((n, model.dim))
    c = Condition(concept)
    for t in range(schedule.num_steps, 0, -1):
        eps = model.epsilon(z, t, c)
        a_t = schedule.alpha(t)
        a_prev = schedule.alpha(t - 1)
        z0_hat = (z - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        z = np.sqrt(a_prev) * z0_hat + np.sqrt(1.0 - a_prev) * eps
    return z


def finetune_erase(model: MlpDenoiser, concept: str, config: TrainConfig,
                   schedule: NoiseSchedule, pool_size: int = 256,
                   scope: str = "embedding",
                   retention_concepts=(), retention_weight: float = 1.0):
    """Parameter-space erasure: retrain so the concept condition reproduces
    the original model's null predictions on diffused concept samples, as
    generated by the model itself.

    ``scope`` selects which parameters move: "embedding" retrains only the
    erased concept's embedding row (remapping its representation onto the
    null one, leaving every other prediction untouched), "all" retrains the
    full network and perturbs nearby behavior. The original model is left
    unmodified and serves as the frozen regression target. An optional
    retention batch pins other concepts to their original predictions
    (meaningful for scope="all"; off by default). Returns
    (erased_model, history).
    """
    model.check_condition(Condition(concept))
    if scope not in ("embedding", "all"):
        raise ValueError(f"unknown finetune scope {scope!r}")
    rng = np.random.default_rng([config.seed, 0xE5A])
    pool = _generate_pool(model, concept, schedule, rng, pool_size)
    retention_pools = {c: _generate_pool(model, c, schedule, rng, pool_size)
                       for c in retention_concepts}
    original = model
    tuned = model.with_parameters([p.copy() for p in model.parameters()])
    opt = make_optimizer(config.optimizer, config.lr, beta1=config.beta1,
                         beta2=config.beta2, weight_decay=config.weight_decay)
    params = tuned.parameters()
    row = model.embedding_row(Condition(concept))
    history = []
    for epoch in range(config.epochs):
        losses = np.empty(config.batches_per_epoch)
        for b in range(config.batches_per_epoch):
            idx = rng.integers(0, pool_size, size=config.batch_size)
            t = rng.integers(1, schedule.num_steps + 1, size=config.batch_size)
            a_t = schedule.alphas[t]
            noise = rng.standard_normal((config.batch_size, model.dim))
            z_t = np.sqrt(a_t)[:, None] * pool[idx] + np.sqrt(1.0 - a_t)[:, None] * noise
            t_frac = t / schedule.num_steps
            target = original.epsilon_mixed_t(z_t, t, NULL)
            loss, grads = tuned.loss_and_param_grads(z_t, t_frac, row, target)
            if retention_pools:
                for c_keep, keep_pool in retention_pools.items():
                    kidx = rng.integers(0, pool_size, size=config.batch_size)
                    kt = rng.integers(1, schedule.num_steps + 1, size=config.batch_size)
                    ka = schedule.alphas[kt]
                    knoise = rng.standard_normal((config.batch_size, model.dim))
                    kz = np.sqrt(ka)[:, None] * keep_pool[kidx] + np.sqrt(1.0 - ka)[:, None] * knoise
                    ktarget = original.epsilon_mixed_t(kz, kt, Condition(c_keep))
                    kloss, kgrads = tuned.loss_and_param_grads(
                        kz, kt / schedule.num_steps, model.embedding_row(Condition(c_keep)), ktarget)
                    loss += retention_weight * kloss
                    grads = [g + retention_weight * kg for g, kg in zip(grads, kgrads)]
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
            if scope == "embedding":
                masked = [np.zeros_like(g) for g in grads]
                masked[-1][row] = grads[-1][row]
                grads = masked
            params = opt.update(params, grads)
            tuned = tuned.with_parameters(params)
            losses[b] = loss
        history.append(float(losses.mean()))
    return tuned, history
