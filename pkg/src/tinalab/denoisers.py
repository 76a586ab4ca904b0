"""Conditional noise predictors eps(z, t, c).

Three families:

* ``GaussianMixtureDenoiser`` -- analytically exact predictor for data drawn
  from an isotropic Gaussian mixture. Its output is the Bayes-optimal noise
  estimate, eps*(z, t, c) = -sqrt(1 - a_t) * grad_z log p_t(z | c), where
  p_t is the a_t-diffused conditioned mixture.
* ``MlpDenoiser`` -- a small fully-connected network with manual forward and
  reverse passes (no autograd dependency), conditioned by a concatenated
  learned embedding and a scalar t/T time input.
* ``ErasedDenoiser`` -- wrapper simulating text-centric concept erasure by
  remapping erased conditions to the null condition.

Every denoiser is deterministic and immutable once built; concurrent
read-only evaluation is safe. Latents are float64 arrays of shape (d,) or
(n, d); outputs match the input shape.

The t=0 boundary needed by inversion initialisation is exposed as
``epsilon_t0``: the mixture model reuses a_1 (t enters it only through a_t)
and the network embeds t/T = 0.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import CapabilityError, ConditionError, ModelError
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class Condition:
    """Symbolic guidance signal: a registered concept id, or None for null."""

    concept: str | None = None

    @property
    def is_null(self) -> bool:
        return self.concept is None

    def __str__(self):
        return "null" if self.is_null else self.concept


NULL = Condition()


def _as_batch(z, dim, name="z"):
    """Coerce (d,) or (n, d) input to (n, d); return (array, was_single)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
        single = True
    elif z.ndim == 2:
        single = False
    else:
        raise ModelError(f"{name} must be a vector or a batch of vectors, got ndim={z.ndim}")
    if z.shape[1] != dim:
        raise ModelError(f"{name} has dimension {z.shape[1]}, model expects {dim}")
    if not np.all(np.isfinite(z)):
        raise ModelError(f"{name} contains non-finite entries")
    return z, single


class Denoiser:
    """Shared interface: epsilon / input_vjp / epsilon_t0 plus concept registry."""

    dim: int
    num_steps: int

    @property
    def concepts(self) -> tuple:
        raise NotImplementedError

    def check_condition(self, c: Condition):
        if not c.is_null and c.concept not in self.concepts:
            raise ConditionError(f"unknown concept {c.concept!r}; registered: {list(self.concepts)}")

    def _check_t(self, t: int):
        if not 1 <= t <= self.num_steps:
            raise IndexError(f"step {t} outside [1, {self.num_steps}]")

    def epsilon(self, z, t: int, c: Condition):
        raise NotImplementedError

    def input_vjp(self, z, t: int, c: Condition, v):
        raise CapabilityError(f"{type(self).__name__} exposes no input-gradient contract")

    def epsilon_t0(self, z, c: Condition):
        """Boundary evaluation at timestep index 0 (inversion initialisation)."""
        raise NotImplementedError


class GaussianMixtureDenoiser(Denoiser):
    """Exact conditional noise predictor for an isotropic Gaussian mixture.

    Components are N(mu_i, var_i * I) with weights summing to one; each
    concept names a non-empty subset of components and the null condition
    covers all of them. ``variance`` may be a scalar (shared) or one value
    per component. t enters only through a_t.
    """

    def __init__(self, weights, means, variance, concept_table, schedule: NoiseSchedule):
        weights = np.asarray(weights, dtype=np.float64)
        means = np.asarray(means, dtype=np.float64)
        if means.ndim != 2 or weights.ndim != 1 or len(weights) != len(means):
            raise ModelError("means must be (k, d) with one weight per component")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ModelError(f"component weights sum to {weights.sum()!r}, not 1")
        if np.any(weights <= 0):
            raise ModelError("component weights must be positive")
        variances = np.broadcast_to(np.asarray(variance, dtype=np.float64), (len(weights),)).copy()
        if np.any(variances <= 0):
            raise ModelError(f"variance must be positive, got {variance}")
        table = {}
        for concept, idx in concept_table.items():
            idx = tuple(int(i) for i in idx)
            if not idx:
                raise ModelError(f"concept {concept!r} maps to no components")
            if any(not 0 <= i < len(weights) for i in idx):
                raise ModelError(f"concept {concept!r} references unknown component indices")
            table[str(concept)] = idx
        weights.setflags(write=False)
        means.setflags(write=False)
        variances.setflags(write=False)
        self.weights = weights
        self.means = means
        self.variances = variances
        self.concept_table = table
        self.schedule = schedule
        self.dim = means.shape[1]
        self.num_steps = schedule.num_steps

    @property
    def concepts(self):
        return tuple(self.concept_table)

    def _component_indices(self, c: Condition):
        self.check_condition(c)
        if c.is_null:
            return np.arange(len(self.weights))
        return np.asarray(self.concept_table[c.concept], dtype=int)

    def _posterior(self, z, alpha, c):
        """Posterior weights and standardized offsets of the diffused mixture.

        Returns (gamma, m, s2): gamma is (n, k) posterior over the selected
        components, m[:, i, :] = (sqrt(a) mu_i - z)/s2_i, s2 the (k,) diffused
        per-component variances a*var_i + 1 - a.
        """
        idx = self._component_indices(c)
        w = self.weights[idx]
        mu = self.means[idx]
        s2 = alpha * self.variances[idx] + 1.0 - alpha      # (k,)
        centers = np.sqrt(alpha) * mu                       # (k, d)
        diff = centers[None, :, :] - z[:, None, :]          # (n, k, d)
        log_g = (np.log(w) - 0.5 * self.dim * np.log(s2))[None, :] \
            - np.sum(diff ** 2, axis=2) / (2.0 * s2[None, :])
        log_g = log_g - logsumexp(log_g, axis=1, keepdims=True)
        gamma = np.exp(log_g)
        return gamma, diff / s2[None, :, None], s2

    def epsilon(self, z, t, c=NULL):
        self._check_t(t)
        return self._epsilon_at_alpha(z, self.schedule.alpha(t), c)

    def epsilon_t0(self, z, c=NULL):
        return self._epsilon_at_alpha(z, self.schedule.alpha(1), c)

    def _epsilon_at_alpha(self, z, alpha, c):
        z, single = _as_batch(z, self.dim)
        gamma, m, _ = self._posterior(z, alpha, c)
        score = np.einsum("nk,nkd->nd", gamma, m)
        out = -np.sqrt(1.0 - alpha) * score
        return out[0] if single else out

    def input_vjp(self, z, t, c, v):
        """v^T (d eps / d z) via the analytic Jacobian of the posterior score.

        J_score = -sum_i gamma_i I/s2_i + sum_i gamma_i m_i m_i^T - m_bar m_bar^T
        (symmetric), so the product needs no (d, d) matrix.
        """
        self._check_t(t)
        z, single = _as_batch(z, self.dim)
        v, vsingle = _as_batch(v, self.dim, name="v")
        if len(v) != len(z):
            raise ModelError("v batch must match z batch")
        alpha = self.schedule.alpha(t)
        gamma, m, s2 = self._posterior(z, alpha, c)
        m_bar = np.einsum("nk,nkd->nd", gamma, m)
        mv = np.einsum("nkd,nd->nk", m, v)                  # m_i . v
        cov_v = np.einsum("nk,nk,nkd->nd", gamma, mv, m) - m_bar * np.sum(m_bar * v, axis=1, keepdims=True)
        inv_s2 = np.sum(gamma / s2[None, :], axis=1, keepdims=True)
        out = np.sqrt(1.0 - alpha) * (inv_s2 * v - cov_v)
        return out[0] if single and vsingle else out

    def sample_clean(self, rng: np.random.Generator, c: Condition = NULL, n: int = 1):
        """Draw n clean latents from the conditioned mixture."""
        idx = self._component_indices(c)
        w = self.weights[idx]
        w = w / w.sum()
        comp = rng.choice(idx, size=n, p=w)
        sig = np.sqrt(self.variances[comp])[:, None]
        return self.means[comp] + sig * rng.standard_normal((n, self.dim))


def gm_epsilon(model: GaussianMixtureDenoiser, z, t: int, c: Condition = NULL):
    """Bayes-optimal noise prediction of the conditioned diffused mixture."""
    return model.epsilon(z, t, c)


def gm_epsilon_vjp(model: GaussianMixtureDenoiser, z, t: int, c: Condition, v):
    """v^T Jacobian of gm_epsilon with respect to z."""
    return model.input_vjp(z, t, c, v)


def _tanh_prime(h):
    # derivative expressed through the activation value
    return 1.0 - h * h


class MlpDenoiser(Denoiser):
    """Small tanh network predicting eps from (z, t/T, condition embedding).

    Weights ``ws[i]`` have shape (fan_in, fan_out); the input is the
    concatenation of z, the scalar t/T and one learned embedding row
    (row 0 is the null condition, then one row per concept in order).
    """

    def __init__(self, dim, hidden, ws, bs, embeddings, concept_ids, num_steps):
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.ws = [np.asarray(w, dtype=np.float64) for w in ws]
        self.bs = [np.asarray(b, dtype=np.float64) for b in bs]
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.concept_ids = tuple(str(c) for c in concept_ids)
        self.num_steps = int(num_steps)
        self.emb_dim = self.embeddings.shape[1]
        if self.embeddings.shape[0] != len(self.concept_ids) + 1:
            raise ModelError("need one embedding row per concept plus the null row")
        widths = [self.dim + 1 + self.emb_dim, *self.hidden, self.dim]
        if len(self.ws) != len(widths) - 1 or len(self.bs) != len(self.ws):
            raise ModelError("layer count does not match declared widths")
        for i, (w, b) in enumerate(zip(self.ws, self.bs)):
            if w.shape != (widths[i], widths[i + 1]) or b.shape != (widths[i + 1],):
                raise ModelError(f"layer {i} has shape {w.shape}, expected {(widths[i], widths[i + 1])}")
        for arr in (*self.ws, *self.bs, self.embeddings):
            if not np.all(np.isfinite(arr)):
                raise ModelError("model parameters contain non-finite values")

    @classmethod
    def create(cls, dim, concepts, num_steps, hidden=(64, 64), emb_dim=4, seed=0):
        """Seeded Gaussian init, 1/sqrt(fan_in) scaling."""
        rng = np.random.default_rng(seed)
        widths = [dim + 1 + emb_dim, *hidden, dim]
        ws = [rng.standard_normal((widths[i], widths[i + 1])) / np.sqrt(widths[i])
              for i in range(len(widths) - 1)]
        bs = [np.zeros(widths[i + 1]) for i in range(len(widths) - 1)]
        embeddings = rng.standard_normal((len(concepts) + 1, emb_dim)) * 0.5
        return cls(dim, hidden, ws, bs, embeddings, concepts, num_steps)

    @property
    def concepts(self):
        return self.concept_ids

    def _embedding_row(self, c: Condition) -> int:
        self.check_condition(c)
        return 0 if c.is_null else 1 + self.concept_ids.index(c.concept)

    def _embed(self, z, t_frac, c):
        row = self._embedding_row(c)
        n = len(z)
        cols = [z, np.full((n, 1), t_frac), np.repeat(self.embeddings[row][None, :], n, axis=0)]
        return np.concatenate(cols, axis=1), row

    def _forward(self, z, t_frac, c):
        """Returns (output, activations); activations[0] is the embedded input."""
        x, _ = self._embed(z, t_frac, c)
        acts = [x]
        h = x
        for w, b in zip(self.ws[:-1], self.bs[:-1]):
            h = np.tanh(h @ w + b)
            acts.append(h)
        out = h @ self.ws[-1] + self.bs[-1]
        return out, acts

    def epsilon(self, z, t, c=NULL):
        self._check_t(t)
        z, single = _as_batch(z, self.dim)
        out, _ = self._forward(z, t / self.num_steps, c)
        return out[0] if single else out

    def epsilon_t0(self, z, c=NULL):
        z, single = _as_batch(z, self.dim)
        out, _ = self._forward(z, 0.0, c)
        return out[0] if single else out

    def epsilon_mixed_t(self, z, t, c=NULL):
        """Batched evaluation with a per-sample timestep vector."""
        z, _ = _as_batch(z, self.dim)
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.num_steps):
            raise IndexError(f"steps outside [1, {self.num_steps}]")
        row = self._embedding_row(c)
        t_frac = (t / self.num_steps).astype(np.float64)
        x = np.concatenate([z, t_frac[:, None],
                            np.repeat(self.embeddings[row][None, :], len(z), axis=0)], axis=1)
        h = x
        for w, b in zip(self.ws[:-1], self.bs[:-1]):
            h = np.tanh(h @ w + b)
        return h @ self.ws[-1] + self.bs[-1]

    def input_vjp(self, z, t, c, v):
        """v^T (d eps / d z): reverse accumulation, parameters held constant."""
        self._check_t(t)
        z, single = _as_batch(z, self.dim)
        v, vsingle = _as_batch(v, self.dim, name="v")
        if len(v) != len(z):
            raise ModelError("v batch must match z batch")
        _, acts = self._forward(z, t / self.num_steps, c)
        g = v @ self.ws[-1].T
        for w, h in zip(reversed(self.ws[:-1]), reversed(acts[1:])):
            g = (g * _tanh_prime(h)) @ w.T
        out = g[:, :self.dim]
        return out[0] if single and vsingle else out

    def hidden_activations(self, z, t, c, layer: int):
        """Activations of hidden layer ``layer`` (0 = the embedded input)."""
        if not 0 <= layer <= len(self.hidden):
            raise ValueError(f"layer {layer} outside [0, {len(self.hidden)}]")
        if not 0 <= t <= self.num_steps:
            raise IndexError(f"step {t} outside [0, {self.num_steps}]")
        z, single = _as_batch(z, self.dim)
        _, acts = self._forward(z, t / self.num_steps, c)
        out = acts[layer]
        return out[0] if single else out

    def parameters(self):
        """Flat list of parameter arrays, in a stable order (weights, biases, embeddings)."""
        return [*self.ws, *self.bs, self.embeddings]

    def with_parameters(self, params):
        """New model from a flat parameter list in parameters() order."""
        n = len(self.ws)
        return MlpDenoiser(self.dim, self.hidden, params[:n], params[n:2 * n],
                           params[2 * n], self.concept_ids, self.num_steps)

    def loss_and_param_grads(self, z, t_frac, rows, target):
        """Mean per-sample squared-error loss and its parameter gradients.

        ``t_frac`` is a scalar or per-sample vector of t/T values; ``rows``
        a scalar or per-sample vector of embedding row indices. Returns
        (loss, grads) with grads in parameters() order.
        """
        z, _ = _as_batch(z, self.dim)
        target, _ = _as_batch(target, self.dim, name="target")
        n = len(z)
        t_frac = np.broadcast_to(np.asarray(t_frac, dtype=np.float64), (n,))
        rows = np.broadcast_to(np.asarray(rows, dtype=int), (n,))
        x = np.concatenate([z, t_frac[:, None], self.embeddings[rows]], axis=1)
        acts = [x]
        h = x
        for w, b in zip(self.ws[:-1], self.bs[:-1]):
            h = np.tanh(h @ w + b)
            acts.append(h)
        out = h @ self.ws[-1] + self.bs[-1]
        resid = out - target
        loss = float(np.sum(resid ** 2) / n)

        g = 2.0 * resid / n
        w_grads = [None] * len(self.ws)
        b_grads = [None] * len(self.bs)
        for i in range(len(self.ws) - 1, -1, -1):
            w_grads[i] = acts[i].T @ g
            b_grads[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.ws[i].T) * _tanh_prime(acts[i])
        g_input = g @ self.ws[0].T
        emb_grad = np.zeros_like(self.embeddings)
        np.add.at(emb_grad, rows, g_input[:, self.dim + 1:])
        return loss, [*w_grads, *b_grads, emb_grad]

    def embedding_row(self, c: Condition) -> int:
        """Index into the embedding table for a condition (0 is null)."""
        return self._embedding_row(c)


def mlp_forward(model: MlpDenoiser, z, t: int, c: Condition = NULL):
    """Deterministic forward pass of the network denoiser."""
    return model.epsilon(z, t, c)


def mlp_input_vjp(model: MlpDenoiser, z, t: int, c: Condition, v):
    """v^T Jacobian of the network output with respect to its latent input."""
    return model.input_vjp(z, t, c, v)


class ErasedDenoiser(Denoiser):
    """Remap wrapper: erased conditions are answered with the null prediction.

    The base model is untouched; non-erased conditions pass through.
    """

    def __init__(self, base: Denoiser, erased_concepts):
        erased = frozenset(str(c) for c in erased_concepts)
        for concept in erased:
            if concept not in base.concepts:
                raise ConditionError(f"cannot erase unknown concept {concept!r}")
        self.base = base
        self.erased_concepts = erased
        self.dim = base.dim
        self.num_steps = base.num_steps

    @property
    def concepts(self):
        return self.base.concepts

    def _remap(self, c: Condition) -> Condition:
        self.check_condition(c)
        if not c.is_null and c.concept in self.erased_concepts:
            return NULL
        return c

    def epsilon(self, z, t, c=NULL):
        return self.base.epsilon(z, t, self._remap(c))

    def epsilon_t0(self, z, c=NULL):
        return self.base.epsilon_t0(z, self._remap(c))

    def input_vjp(self, z, t, c, v):
        return self.base.input_vjp(z, t, self._remap(c), v)


def erase(base: Denoiser, concepts) -> ErasedDenoiser:
    """Simulated text-centric erasure: remap the given concepts to null."""
    return ErasedDenoiser(base, concepts)
