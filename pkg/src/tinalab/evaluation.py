"""Attack outcome metrics.

The classifier is the analytic Bayes posterior under the ground-truth data
mixture -- also when the attacked denoiser is a trained network -- so
classifier error never confounds the attack measurements. Classification
is defined on clean latents only.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.decomposition import PCA
from sklearn.metrics import silhouette_score

from .denoisers import Condition, GaussianMixtureDenoiser, MlpDenoiser


@dataclass(frozen=True)
class SampleRecord:
    target_concept: str
    predicted_concept: str
    posterior_prob: float
    recon_error_l2: float


@dataclass(frozen=True)
class AttackReport:
    """Per-arm outcome: sample rows plus the exact count-ratio success rate."""

    arm: str
    samples: tuple
    hits: int

    def __post_init__(self):
        expected = sum(1 for s in self.samples if s.predicted_concept == s.target_concept)
        if expected != self.hits:
            raise ValueError(f"hit count {self.hits} does not match samples ({expected})")

    @property
    def asr(self) -> float:
        if not self.samples:
            raise ValueError("no samples")
        return self.hits / len(self.samples)

    @property
    def mean_recon_error(self) -> float:
        return float(np.mean([s.recon_error_l2 for s in self.samples]))


def concept_log_posteriors(data_model: GaussianMixtureDenoiser, z0):
    """Unnormalized log posterior mass per concept under the clean mixture."""
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape != (data_model.dim,):
        raise ValueError(f"latent has shape {z0.shape}, expected ({data_model.dim},)")
    if not np.all(np.isfinite(z0)):
        raise ValueError("latent contains non-finite entries")
    w = data_model.weights
    mu = data_model.means
    var = data_model.variances
    d = data_model.dim
    comp_ll = (np.log(w) - 0.5 * d * np.log(2.0 * np.pi * var)
               - np.sum((z0 - mu) ** 2, axis=1) / (2.0 * var))
    out = {}
    for concept, idx in data_model.concept_table.items():
        out[concept] = float(logsumexp(comp_ll[list(idx)]))
    return out, float(logsumexp(comp_ll))


def bayes_classify(data_model: GaussianMixtureDenoiser, z0):
    """Argmax concept posterior for a clean latent; ties break to the
    lowest-index (earliest registered) concept. Returns (concept, posterior).
    """
    log_post, log_total = concept_log_posteriors(data_model, z0)
    concepts = list(data_model.concept_table)
    values = np.array([log_post[c] for c in concepts])
    best = int(np.argmax(values))  # argmax returns the first maximum
    return concepts[best], float(np.exp(values[best] - log_total))


def attack_success_rate(records, target: str) -> float:
    """Exact count ratio of samples classified as the target concept."""
    records = list(records)
    if not records:
        raise ValueError("need at least one classified sample")
    hits = sum(1 for r in records if r.predicted_concept == target)
    return hits / len(records)


def reconstruction_error(z0, z0_prime) -> float:
    """Euclidean distance between a target latent and its regeneration."""
    z0 = np.asarray(z0, dtype=np.float64)
    z0_prime = np.asarray(z0_prime, dtype=np.float64)
    if z0.shape != z0_prime.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {z0_prime.shape}")
    return float(np.linalg.norm(z0 - z0_prime))


def separability_score(features) -> float:
    """Mean silhouette coefficient (Euclidean) of labelled feature vectors.

    Needs at least two labels and two points per label.
    """
    labels = [lab for lab, _ in features]
    vectors = np.asarray([np.asarray(v, dtype=np.float64) for _, v in features])
    uniq = sorted(set(labels))
    if len(uniq) < 2:
        raise ValueError("need at least two distinct labels")
    for lab in uniq:
        if labels.count(lab) < 2:
            raise ValueError(f"label {lab!r} has fewer than two points")
    if vectors.ndim != 2:
        raise ValueError("feature vectors must share one dimension")
    return float(silhouette_score(vectors, labels, metric="euclidean"))


def extract_features(model: MlpDenoiser, z, t: int, c: Condition, layer: int):
    """Hidden activations of the chosen layer (0 = embedded input)."""
    return model.hidden_activations(z, t, c, layer)


def pca_projection(vectors, n_components: int = 2, seed: int = 0):
    """2-D projection for plotting only; never feeds any score."""
    vectors = np.asarray(vectors, dtype=np.float64)
    return PCA(n_components=n_components, random_state=seed).fit_transform(vectors)
