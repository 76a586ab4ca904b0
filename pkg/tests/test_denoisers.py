import numpy as np
import pytest

from tinalab.denoisers import (
    NULL,
    Condition,
    ErasedDenoiser,
    GaussianMixtureDenoiser,
    MlpDenoiser,
    erase,
    gm_epsilon,
    gm_epsilon_vjp,
    mlp_forward,
    mlp_input_vjp,
)
from tinalab.errors import CapabilityError, ConditionError, ModelError
from tinalab.schedule import NoiseSchedule, make_linear_schedule


def schedule_with_alpha(alpha, T=1):
    """Schedule whose level-1 alpha is exactly the requested value."""
    if T == 1:
        return NoiseSchedule(np.array([1.0, alpha]))
    alphas = np.linspace(1.0, alpha, T + 1)
    return NoiseSchedule(alphas)


def standard_normal_model(alpha=0.64, dim=2):
    sched = schedule_with_alpha(alpha)
    return GaussianMixtureDenoiser(
        weights=[1.0], means=np.zeros((1, dim)), variance=1.0,
        concept_table={"a": [0]}, schedule=sched)


def two_cluster_model(schedule, d=2, sep=6.0, variance=1.0, weights=(0.5, 0.5)):
    means = np.zeros((2, d))
    means[0, 0] = -sep / 2
    means[1, 0] = sep / 2
    return GaussianMixtureDenoiser(
        weights=list(weights), means=means, variance=variance,
        concept_table={"left": [0], "right": [1]}, schedule=schedule)


# ---------------------------------------------------------------------------
# analytic mixture denoiser


def test_standard_normal_closed_form():
    model = standard_normal_model(alpha=0.64)
    z = np.array([1.0, -2.0])
    out = gm_epsilon(model, z, 1, NULL)
    np.testing.assert_allclose(out, [0.6, -1.2], rtol=1e-15)


def test_single_component_general_closed_form():
    # eps* = sqrt(1-a)(z - sqrt(a) mu) / (a sigma^2 + 1 - a)
    sched = schedule_with_alpha(0.49)
    mu = np.array([[1.5, -0.5, 2.0]])
    model = GaussianMixtureDenoiser([1.0], mu, 0.7, {"a": [0]}, sched)
    z = np.array([0.3, 0.9, -1.1])
    s2 = 0.49 * 0.7 + 0.51
    expected = np.sqrt(0.51) * (z - np.sqrt(0.49) * mu[0]) / s2
    np.testing.assert_allclose(model.epsilon(z, 1), expected, rtol=1e-14)


def test_t_zero_rejected_and_boundary_uses_smallest_level():
    model = standard_normal_model()
    z = np.array([0.4, 0.2])
    with pytest.raises(IndexError):
        model.epsilon(z, 0)
    np.testing.assert_array_equal(model.epsilon_t0(z), model.epsilon(z, 1))


def quadrature_score(weights, means, variance, alpha, z, lo=-40.0, hi=40.0, n=20001):
    """Brute-force score of the diffused mixture by trapezoid quadrature.

    p_t(z) = sum_i w_i int N(x; mu_i, var I) N(z; sqrt(a) x, (1-a) I) dx,
    evaluated on a dense grid, gradient taken on the integrand. 1-D only;
    higher dimensions factor per-axis only for product mixtures, so tests
    use d=1 and a d=2 grid below.
    """
    xs = np.linspace(lo, hi, n)
    p = 0.0
    grad = 0.0
    for w, mu in zip(weights, means):
        prior = np.exp(-(xs - mu[0]) ** 2 / (2 * variance)) / np.sqrt(2 * np.pi * variance)
        kern = np.exp(-(z[0] - np.sqrt(alpha) * xs) ** 2 / (2 * (1 - alpha))) / np.sqrt(2 * np.pi * (1 - alpha))
        dkern = kern * (np.sqrt(alpha) * xs - z[0]) / (1 - alpha)
        p += w * np.trapezoid(prior * kern, xs)
        grad += w * np.trapezoid(prior * dkern, xs)
    return grad / p


def quadrature_score_2d(weights, means, variance, alpha, z, half=25.0, n=801):
    xs = np.linspace(-half, half, n)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    p = 0.0
    grad = np.zeros(2)
    for w, mu in zip(weights, means):
        prior = np.exp(-((X - mu[0]) ** 2 + (Y - mu[1]) ** 2) / (2 * variance)) / (2 * np.pi * variance)
        dz = (z[0] - np.sqrt(alpha) * X) ** 2 + (z[1] - np.sqrt(alpha) * Y) ** 2
        kern = np.exp(-dz / (2 * (1 - alpha))) / (2 * np.pi * (1 - alpha))
        joint = prior * kern
        p += w * np.trapezoid(np.trapezoid(joint, xs, axis=1), xs)
        gx = joint * (np.sqrt(alpha) * X - z[0]) / (1 - alpha)
        gy = joint * (np.sqrt(alpha) * Y - z[1]) / (1 - alpha)
        grad[0] += w * np.trapezoid(np.trapezoid(gx, xs, axis=1), xs)
        grad[1] += w * np.trapezoid(np.trapezoid(gy, xs, axis=1), xs)
    return grad / p


def test_epsilon_matches_quadrature_oracle_1d():
    sched = schedule_with_alpha(0.36)
    weights = [0.3, 0.7]
    means = np.array([[-2.0], [1.5]])
    model = GaussianMixtureDenoiser(weights, means, 0.8, {"a": [0], "b": [1]}, sched)
    for z0 in (-1.7, 0.0, 0.4, 2.2):
        z = np.array([z0])
        oracle = -np.sqrt(1 - 0.36) * quadrature_score(weights, means, 0.8, 0.36, z)
        got = model.epsilon(z, 1)[0]
        assert got == pytest.approx(oracle, rel=1e-6)


def test_epsilon_matches_quadrature_oracle_2d_symmetric():
    sched = schedule_with_alpha(0.5)
    weights = [0.5, 0.5]
    means = np.array([[-2.0, 0.0], [2.0, 0.0]])
    model = GaussianMixtureDenoiser(weights, means, 1.0, {"a": [0], "b": [1]}, sched)
    # symmetry point and a generic point
    for z in (np.zeros(2), np.array([0.7, -0.9])):
        oracle = -np.sqrt(0.5) * quadrature_score_2d(weights, means, 1.0, 0.5, z)
        got = model.epsilon(z, 1)
        np.testing.assert_allclose(got, oracle, rtol=1e-6, atol=1e-9)


def test_conditioned_epsilon_uses_component_subset():
    sched = schedule_with_alpha(0.36)
    weights = [0.3, 0.7]
    means = np.array([[-2.0], [1.5]])
    model = GaussianMixtureDenoiser(weights, means, 0.8, {"a": [0], "b": [1]}, sched)
    single = GaussianMixtureDenoiser([1.0], means[:1], 0.8, {"a": [0]}, sched)
    z = np.array([0.25])
    np.testing.assert_allclose(model.epsilon(z, 1, Condition("a")), single.epsilon(z, 1), rtol=1e-14)


def test_unregistered_concept_raises():
    model = standard_normal_model()
    with pytest.raises(ConditionError):
        model.epsilon(np.zeros(2), 1, Condition("nope"))


def test_mixture_invariants_enforced():
    sched = schedule_with_alpha(0.5)
    with pytest.raises(ModelError):
        GaussianMixtureDenoiser([0.6, 0.5], np.zeros((2, 2)), 1.0, {"a": [0]}, sched)
    with pytest.raises(ModelError):
        GaussianMixtureDenoiser([1.0], np.zeros((1, 2)), 0.0, {"a": [0]}, sched)
    with pytest.raises(ModelError):
        GaussianMixtureDenoiser([1.0], np.zeros((1, 2)), 1.0, {"a": []}, sched)
    with pytest.raises(ModelError):
        GaussianMixtureDenoiser([1.0], np.zeros((1, 2)), 1.0, {"a": [3]}, sched)


# ---------------------------------------------------------------------------
# mixture input-gradient contract


def test_vjp_single_standard_normal_is_linear():
    model = standard_normal_model(alpha=0.64)
    v = np.array([1.0, 0.0])
    out = gm_epsilon_vjp(model, np.array([0.3, 0.8]), 1, NULL, v)
    np.testing.assert_allclose(out, [np.sqrt(0.36), 0.0], rtol=1e-14)


def test_vjp_zero_vector_maps_to_zero():
    sched = schedule_with_alpha(0.4)
    model = two_cluster_model(sched)
    out = model.input_vjp(np.array([0.3, -0.1]), 1, NULL, np.zeros(2))
    np.testing.assert_array_equal(out, np.zeros(2))


def finite_difference_vjp(eps_fn, z, v, h=1e-5):
    """Central differences of v . eps along each coordinate of z."""
    out = np.zeros_like(z)
    for i in range(len(z)):
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        out[i] = np.dot(v, eps_fn(zp) - eps_fn(zm)) / (2 * h)
    return out


def test_vjp_matches_finite_differences_generic_point():
    sched = schedule_with_alpha(0.55)
    model = two_cluster_model(sched, sep=3.0)
    z = np.array([0.4, -0.7])
    v = np.array([0.9, -1.3])
    fd = finite_difference_vjp(lambda zz: model.epsilon(zz, 1), z, v)
    got = model.input_vjp(z, 1, NULL, v)
    np.testing.assert_allclose(got, fd, rtol=1e-6)


def test_vjp_matches_finite_differences_100_probes():
    sched = make_linear_schedule(10, 1e-3, 0.08)
    rng = np.random.default_rng(12)
    means = rng.normal(scale=2.0, size=(3, 4))
    model = GaussianMixtureDenoiser([0.2, 0.5, 0.3], means, 0.9,
                                    {"a": [0], "b": [1, 2]}, sched)
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(1, 11))
        z = rng.normal(scale=2.0, size=4)
        v = rng.normal(size=4)
        fd = finite_difference_vjp(lambda zz: model.epsilon(zz, t), z, v)
        got = model.input_vjp(z, t, NULL, v)
        rel = np.linalg.norm(got - fd) / max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, rel)
    assert worst < 1e-4


def test_batched_calls_match_single_calls():
    sched = schedule_with_alpha(0.42)
    model = two_cluster_model(sched, sep=4.0)
    rng = np.random.default_rng(3)
    Z = rng.normal(size=(5, 2))
    V = rng.normal(size=(5, 2))
    batch_eps = model.epsilon(Z, 1)
    batch_vjp = model.input_vjp(Z, 1, NULL, V)
    for i in range(5):
        np.testing.assert_array_equal(batch_eps[i], model.epsilon(Z[i], 1))
        np.testing.assert_array_equal(batch_vjp[i], model.input_vjp(Z[i], 1, NULL, V[i]))


def test_denoisers_are_deterministic():
    sched = schedule_with_alpha(0.42)
    model = two_cluster_model(sched)
    z = np.array([0.123, -0.456])
    a = model.epsilon(z, 1)
    b = model.epsilon(z, 1)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# network denoiser


def test_zero_network_outputs_zero():
    m = MlpDenoiser.create(dim=3, concepts=("a",), num_steps=10, hidden=(5,), emb_dim=2, seed=0)
    zeroed = m.with_parameters([np.zeros_like(p) for p in m.parameters()])
    out = mlp_forward(zeroed, np.array([1.0, 2.0, 3.0]), 5, NULL)
    np.testing.assert_array_equal(out, np.zeros(3))


def test_single_linear_layer_is_plain_matrix_product():
    rng = np.random.default_rng(5)
    m = MlpDenoiser.create(dim=2, concepts=("a",), num_steps=4, hidden=(), emb_dim=2, seed=1)
    W = rng.normal(size=(2 + 1 + 2, 2))
    m = m.with_parameters([W, np.zeros(2), m.embeddings])
    z = np.array([0.5, -1.0])
    x = np.concatenate([z, [2 / 4], m.embeddings[0]])
    np.testing.assert_allclose(mlp_forward(m, z, 2, NULL), x @ W, rtol=1e-15)


def test_mlp_vjp_zero_network():
    m = MlpDenoiser.create(dim=3, concepts=("a",), num_steps=10, hidden=(5,), emb_dim=2, seed=0)
    zeroed = m.with_parameters([np.zeros_like(p) for p in m.parameters()])
    out = mlp_input_vjp(zeroed, np.ones(3), 5, NULL, np.ones(3))
    np.testing.assert_array_equal(out, np.zeros(3))


def test_mlp_vjp_single_linear_layer_restricts_to_z_block():
    m = MlpDenoiser.create(dim=2, concepts=("a",), num_steps=4, hidden=(), emb_dim=2, seed=1)
    W = np.random.default_rng(6).normal(size=(5, 2))
    m = m.with_parameters([W, np.zeros(2), m.embeddings])
    v = np.array([1.5, -0.5])
    np.testing.assert_allclose(mlp_input_vjp(m, np.zeros(2), 1, NULL, v), (W @ v)[:2], rtol=1e-15)


def test_mlp_vjp_matches_finite_differences():
    m = MlpDenoiser.create(dim=4, concepts=("a", "b"), num_steps=12, hidden=(16, 16, 16), emb_dim=3, seed=9)
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(1, 13))
        c = (NULL, Condition("a"), Condition("b"))[int(rng.integers(3))]
        z = rng.normal(size=4)
        v = rng.normal(size=4)
        fd = finite_difference_vjp(lambda zz: m.epsilon(zz, t, c), z, v)
        got = m.input_vjp(z, t, c, v)
        rel = np.linalg.norm(got - fd) / max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, rel)
    assert worst < 1e-4


def test_hidden_activations_layer0_is_embedded_input():
    m = MlpDenoiser.create(dim=2, concepts=("a",), num_steps=8, hidden=(6,), emb_dim=2, seed=2)
    z = np.array([0.3, -0.2])
    feats = m.hidden_activations(z, 4, NULL, 0)
    np.testing.assert_array_equal(feats, np.concatenate([z, [0.5], m.embeddings[0]]))
    zeroed = m.with_parameters([np.zeros_like(p) for p in m.parameters()])
    np.testing.assert_array_equal(zeroed.hidden_activations(z, 4, NULL, 1), np.zeros(6))
    with pytest.raises(ValueError):
        m.hidden_activations(z, 4, NULL, 2)


def test_mlp_shape_mismatch_raises():
    m = MlpDenoiser.create(dim=3, concepts=("a",), num_steps=10, hidden=(5,), emb_dim=2, seed=0)
    with pytest.raises(ModelError):
        m.epsilon(np.zeros(4), 1, NULL)
    with pytest.raises(ModelError):
        m.epsilon(np.array([np.nan, 0.0, 0.0]), 1, NULL)


# ---------------------------------------------------------------------------
# erasure wrapper


def test_erase_remaps_to_null_exactly():
    sched = make_linear_schedule(6, 1e-3, 0.05)
    model = two_cluster_model(sched, sep=4.0)
    wrapped = erase(model, {"left"})
    rng = np.random.default_rng(0)
    for _ in range(25):
        z = rng.normal(scale=3.0, size=2)
        t = int(rng.integers(1, 7))
        diff = wrapped.epsilon(z, t, Condition("left")) - model.epsilon(z, t, NULL)
        assert np.max(np.abs(diff)) == 0.0
        np.testing.assert_array_equal(wrapped.epsilon(z, t, Condition("right")),
                                      model.epsilon(z, t, Condition("right")))


def test_erase_empty_set_is_identity():
    sched = make_linear_schedule(4, 1e-3, 0.05)
    model = two_cluster_model(sched)
    wrapped = erase(model, set())
    z = np.array([0.4, 0.1])
    for c in (NULL, Condition("left"), Condition("right")):
        np.testing.assert_array_equal(wrapped.epsilon(z, 2, c), model.epsilon(z, 2, c))


def test_erase_unknown_concept_rejected():
    sched = make_linear_schedule(4, 1e-3, 0.05)
    model = two_cluster_model(sched)
    with pytest.raises(ConditionError):
        erase(model, {"ghost"})


def test_erase_vjp_and_boundary_delegate():
    sched = make_linear_schedule(4, 1e-3, 0.05)
    model = two_cluster_model(sched)
    wrapped = erase(model, {"left"})
    z = np.array([0.4, 0.1])
    v = np.array([1.0, -1.0])
    np.testing.assert_array_equal(wrapped.input_vjp(z, 2, Condition("left"), v),
                                  model.input_vjp(z, 2, NULL, v))
    np.testing.assert_array_equal(wrapped.epsilon_t0(z, Condition("left")),
                                  model.epsilon_t0(z, NULL))


def test_capability_error_for_gradient_free_model():
    class NoGrad(ErasedDenoiser.__mro__[1]):  # plain Denoiser
        dim = 2
        num_steps = 3

        @property
        def concepts(self):
            return ()

        def epsilon(self, z, t, c=NULL):
            return np.zeros(2)

    with pytest.raises(CapabilityError):
        NoGrad().input_vjp(np.zeros(2), 1, NULL, np.ones(2))
