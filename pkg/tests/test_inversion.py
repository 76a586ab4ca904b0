import numpy as np
import pytest

from tinalab.denoisers import NULL, Condition, GaussianMixtureDenoiser, MlpDenoiser, erase
from tinalab.errors import NumericError
from tinalab.inversion import (
    InversionReport,
    StepRecord,
    TinaConfig,
    fixed_point_map,
    standard_inversion,
    standard_inversion_step,
    step_consistency_errors,
    tina_inversion,
    tina_inversion_step,
    tina_loss,
)
from tinalab.sampler import ddim_sample
from tinalab.schedule import NoiseSchedule, c1, c2, make_linear_schedule


def zero_model(dim, schedule):
    m = MlpDenoiser.create(dim=dim, concepts=("a",), num_steps=schedule.num_steps,
                           hidden=(4,), emb_dim=2, seed=0)
    return m.with_parameters([np.zeros_like(p) for p in m.parameters()])


def standard_normal_model(schedule, dim=2):
    return GaussianMixtureDenoiser([1.0], np.zeros((1, dim)), 1.0, {"a": [0]}, schedule)


def mixture_model(schedule, dim=2, seed=5, k=2, scale=2.5):
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(k, dim)) * scale
    w = rng.uniform(0.5, 1.5, size=k)
    w /= w.sum()
    table = {"a": [0], "b": list(range(1, k))} if k > 1 else {"a": [0]}
    return GaussianMixtureDenoiser(w, means, 1.0, table, schedule)


# alphas [1, 0.8, 0.64] at t=2: C1 = sqrt(0.8), C2 = 0.2, and the
# standard-normal denoiser has eps = sqrt(1 - 0.64) z = 0.6 z there.
PAIR = NoiseSchedule(np.array([1.0, 0.8, 0.64]))


def closed_form_fixed_point(schedule, t, z_prev):
    """Unique fixed point of the linear (standard-normal) denoiser step."""
    a = np.sqrt(1.0 - schedule.alpha(t))
    return c1(schedule, t) * z_prev / (1.0 - c2(schedule, t) * a)


# ---------------------------------------------------------------------------
# approximate forward step


def test_standard_step_zero_model():
    m = zero_model(2, PAIR)
    z = np.array([1.0, -0.5])
    np.testing.assert_allclose(standard_inversion_step(m, z, 2, NULL, PAIR),
                               c1(PAIR, 2) * z, rtol=1e-15)


def test_standard_step_linear_denoiser_value():
    m = standard_normal_model(PAIR)
    out = standard_inversion_step(m, np.array([1.0, 1.0]), 2, NULL, PAIR)
    # C1 + C2 * sqrt(1 - a_{t-1}) evaluated at the previous latent
    expected = np.sqrt(0.8) + 0.2 * np.sqrt(0.2)
    np.testing.assert_allclose(out, [expected, expected], rtol=1e-12)
    assert out[0] == pytest.approx(0.983870, abs=5e-7)


def test_standard_step_constant_schedule_is_identity():
    sched = NoiseSchedule(np.array([1.0, 1.0, 1.0]), strict=False)
    m = mixture_model(make_linear_schedule(2, 1e-3, 0.05))
    # same model, degenerate coefficients: C1 = 1, C2 = 0
    z = np.array([0.3, -0.9])
    out = c1(sched, 2) * z + c2(sched, 2) * m.epsilon(z, 1, NULL)
    np.testing.assert_array_equal(out, z)


def test_standard_step_t1_uses_boundary_convention():
    sched = make_linear_schedule(4, 1e-3, 0.05)
    m = MlpDenoiser.create(dim=2, concepts=("a",), num_steps=4, hidden=(6,), emb_dim=2, seed=3)
    z = np.array([0.4, 0.7])
    got = standard_inversion_step(m, z, 1, NULL, sched)
    expected = c1(sched, 1) * z + c2(sched, 1) * m.epsilon_t0(z, NULL)
    np.testing.assert_array_equal(got, expected)
    # the time input is 0, not 1/T: differs from an epsilon(t=1) evaluation
    assert not np.array_equal(m.epsilon_t0(z, NULL), m.epsilon(z, 1, NULL))


# ---------------------------------------------------------------------------
# whole standard inversion


def test_standard_inversion_degenerate_t0():
    sched = NoiseSchedule(np.array([1.0]))
    m = zero_model(2, sched)
    rep = standard_inversion(m, np.array([0.1, 0.2]), NULL, sched)
    np.testing.assert_array_equal(rep.z_T_star, [0.1, 0.2])
    assert rep.per_step == ()
    assert rep.mode == "standard"


def test_standard_inversion_zero_model_round_trips_exactly():
    sched = make_linear_schedule(10, 1e-3, 0.07)
    m = zero_model(3, sched)
    z0 = np.array([0.4, -1.2, 0.8])
    rep = standard_inversion(m, z0, NULL, sched)
    np.testing.assert_allclose(rep.z_T_star, np.sqrt(sched.alpha(10)) * z0, rtol=1e-13)
    back = ddim_sample(m, rep.z_T_star, NULL, sched).final
    np.testing.assert_allclose(back, z0, rtol=1e-12)


def test_standard_inversion_records_pure_diagnostics():
    sched = make_linear_schedule(6, 1e-3, 0.06)
    m = mixture_model(sched)
    rep = standard_inversion(m, np.array([0.5, 0.1]), NULL, sched)
    assert len(rep.per_step) == 6
    for rec in rep.per_step:
        assert rec.iterations_used == 0
        assert rec.final_residual == rec.init_residual
        assert rec.init_residual >= 0.0


# ---------------------------------------------------------------------------
# fixed-point map and its loss


def test_fixed_point_map_constant_schedule_ignores_z():
    sched = NoiseSchedule(np.array([1.0, 1.0, 1.0]), strict=False)
    m = standard_normal_model(make_linear_schedule(2, 1e-3, 0.05))

    class Wrap:
        num_steps = 2

        def epsilon(self, z, t, c=NULL):
            return m.epsilon(z, min(t, 2), c)

    z_prev = np.array([0.7, -0.2])
    out_a = fixed_point_map(Wrap(), np.array([5.0, 5.0]), z_prev, 2, NULL, sched)
    out_b = fixed_point_map(Wrap(), np.array([-3.0, 1.0]), z_prev, 2, NULL, sched)
    np.testing.assert_array_equal(out_a, z_prev)
    np.testing.assert_array_equal(out_b, z_prev)


def test_fixed_point_closed_form_linear_denoiser():
    m = standard_normal_model(PAIR)
    z_prev = np.array([1.0, 1.0])
    z_star = closed_form_fixed_point(PAIR, 2, z_prev)
    assert z_star[0] == pytest.approx(1.016394, abs=1e-6)
    out = fixed_point_map(m, z_star, z_prev, 2, NULL, PAIR)
    np.testing.assert_allclose(out, z_star, rtol=1e-12)


def test_tina_loss_zero_at_fixed_point():
    m = standard_normal_model(PAIR)
    z_prev = np.array([1.0, 1.0])
    z_star = closed_form_fixed_point(PAIR, 2, z_prev)
    loss, grad = tina_loss(m, z_star, z_prev, 2, PAIR)
    assert loss == pytest.approx(0.0, abs=1e-25)
    np.testing.assert_allclose(grad, np.zeros(2), atol=1e-12)


def test_tina_loss_linear_expansion_oracle():
    # loss = ((C2 a - 1) ||delta||)^2, grad = 2 (C2 a - 1)^2 delta
    m = standard_normal_model(PAIR)
    z_prev = np.array([1.0, 1.0])
    z_star = closed_form_fixed_point(PAIR, 2, z_prev)
    delta = np.array([0.03, -0.02])
    factor = c2(PAIR, 2) * 0.6 - 1.0
    loss, grad = tina_loss(m, z_star + delta, z_prev, 2, PAIR)
    assert loss == pytest.approx(factor ** 2 * float(np.dot(delta, delta)), rel=1e-12)
    np.testing.assert_allclose(grad, 2.0 * factor ** 2 * delta, rtol=1e-10)


def test_tina_loss_gradient_matches_finite_differences():
    sched = make_linear_schedule(8, 1e-3, 0.08)
    rng = np.random.default_rng(2)
    means = rng.normal(size=(3, 4)) * 2
    model = GaussianMixtureDenoiser([0.25, 0.4, 0.35], means, 0.9,
                                    {"a": [0], "b": [1], "c": [2]}, sched)
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(1, 9))
        z_prev = rng.normal(scale=1.5, size=4)
        z = rng.normal(scale=1.5, size=4)
        _, grad = tina_loss(model, z, z_prev, t, sched)
        fd = np.zeros(4)
        for i in range(4):
            zp, zm = z.copy(), z.copy()
            zp[i] += h
            zm[i] -= h
            fd[i] = (tina_loss(model, zp, z_prev, t, sched)[0]
                     - tina_loss(model, zm, z_prev, t, sched)[0]) / (2 * h)
        rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, rel)
    assert worst < 1e-4


# ---------------------------------------------------------------------------
# refined step


def test_tina_step_k0_returns_standard_initialisation():
    sched = make_linear_schedule(5, 1e-3, 0.07)
    m = mixture_model(sched)
    z_prev = np.array([0.2, -0.4])
    z, rec = tina_inversion_step(m, z_prev, 3, sched, TinaConfig(k=0))
    np.testing.assert_array_equal(z, standard_inversion_step(m, z_prev, 3, NULL, sched))
    assert rec.iterations_used == 0
    assert rec.final_residual == rec.init_residual


def test_tina_step_descent_reaches_linear_fixed_point():
    m = standard_normal_model(PAIR)
    z_prev = np.array([1.0, 1.0])
    cfg = TinaConfig(k=25, eta=0.4, optimizer="gd", residual_tolerance=0.0)
    z, rec = tina_inversion_step(m, z_prev, 2, sched := PAIR, cfg)
    z_star = closed_form_fixed_point(sched, 2, z_prev)
    assert float(np.max(np.abs(z - z_star))) < 1e-6
    assert rec.final_residual <= rec.init_residual


def test_tina_step_early_stops_when_converged():
    sched = make_linear_schedule(6, 1e-3, 0.06)
    m = zero_model(2, sched)
    # zero denoiser: the standard initialisation is already the exact fixed point
    z_prev = np.array([1.0, 2.0])
    z, rec = tina_inversion_step(m, z_prev, 2, sched, TinaConfig(k=25))
    assert rec.iterations_used <= 1
    np.testing.assert_array_equal(z, standard_inversion_step(m, z_prev, 2, NULL, sched))


def test_tina_config_validation():
    with pytest.raises(ValueError):
        TinaConfig(k=-1)
    with pytest.raises(ValueError):
        TinaConfig(eta=0.0)
    with pytest.raises(ValueError):
        TinaConfig(residual_tolerance=-1e-3)


# ---------------------------------------------------------------------------
# whole refined inversion


def test_tina_inversion_zero_model_equals_standard():
    sched = make_linear_schedule(9, 1e-3, 0.06)
    m = zero_model(2, sched)
    z0 = np.array([0.8, -0.6])
    rep_t = tina_inversion(m, z0, sched, TinaConfig(k=25))
    rep_s = standard_inversion(m, z0, NULL, sched)
    np.testing.assert_array_equal(rep_t.z_T_star, rep_s.z_T_star)
    np.testing.assert_array_equal(rep_t.latents, rep_s.latents)


def test_tina_inversion_linear_model_matches_chained_fixed_points():
    sched = make_linear_schedule(12, 1e-3, 0.08)
    m = standard_normal_model(sched, dim=3)
    z0 = np.array([0.9, -0.5, 1.4])
    cfg = TinaConfig(k=25, eta=0.4, optimizer="gd", residual_tolerance=1e-24)
    rep = tina_inversion(m, z0, sched, cfg)
    z = z0.copy()
    for t in range(1, 13):
        z = closed_form_fixed_point(sched, t, z)
        assert float(np.max(np.abs(rep.latents[t] - z))) < 1e-6


def test_tina_inversion_monotone_acceptance_and_self_consistency():
    sched = make_linear_schedule(10, 1e-3, 0.09)
    m = mixture_model(sched, dim=3, seed=8, k=3)
    z0 = np.array([1.1, 0.2, -0.7])
    rep = tina_inversion(m, z0, sched, TinaConfig(k=25, eta=0.05))
    for rec in rep.per_step:
        assert rec.final_residual <= rec.init_residual
    for t, err in step_consistency_errors(rep, m, sched):
        resid = rep.per_step[t - 1].final_residual
        assert err <= np.sqrt(resid) / c1(sched, t) + 1e-12


def test_tina_beats_standard_round_trip_on_nonlinear_model():
    sched = make_linear_schedule(15, 1e-3, 0.1)
    m = mixture_model(sched, dim=3, seed=13, k=3, scale=3.0)
    rng = np.random.default_rng(3)
    wins = 0
    n = 12
    for _ in range(n):
        z0 = m.sample_clean(rng, NULL, 1)[0]
        rep_t = tina_inversion(m, z0, sched, TinaConfig(k=25, eta=0.05))
        rep_s = standard_inversion(m, z0, NULL, sched, record_residuals=False)
        err_t = np.linalg.norm(ddim_sample(m, rep_t.z_T_star, NULL, sched).final - z0)
        err_s = np.linalg.norm(ddim_sample(m, rep_s.z_T_star, NULL, sched).final - z0)
        wins += err_t <= err_s
    assert wins >= n - 1


def test_tina_inversion_is_null_conditioned_and_reports_metadata():
    sched = make_linear_schedule(4, 1e-3, 0.05)
    m = mixture_model(sched)
    rep = tina_inversion(m, np.array([0.5, 0.5]), sched, TinaConfig(k=2))
    assert rep.condition == "null"
    assert rep.mode == "tina"
    assert "t0_convention" in rep.metadata


def test_conditioned_debug_inversion_uses_given_condition():
    sched = make_linear_schedule(5, 1e-3, 0.06)
    m = mixture_model(sched, k=2)
    z0 = np.array([0.4, -0.2])
    rep_a = standard_inversion(m, z0, Condition("a"), sched)
    rep_n = standard_inversion(m, z0, NULL, sched)
    assert rep_a.condition == "a"
    assert not np.array_equal(rep_a.z_T_star, rep_n.z_T_star)


def test_conditioned_inversion_on_remap_erased_model_equals_null():
    sched = make_linear_schedule(5, 1e-3, 0.06)
    m = mixture_model(sched, k=2)
    wrapped = erase(m, {"a"})
    z0 = np.array([0.4, -0.2])
    rep_a = standard_inversion(wrapped, z0, Condition("a"), sched)
    rep_n = standard_inversion(wrapped, z0, NULL, sched)
    np.testing.assert_array_equal(rep_a.z_T_star, rep_n.z_T_star)


def test_monotone_acceptance_enforced_by_report_type():
    rec = StepRecord(t=1, init_residual=0.1, final_residual=0.2, iterations_used=3)
    with pytest.raises(ValueError):
        InversionReport(z_T_star=np.zeros(2), per_step=(rec,), mode="tina",
                        latents=np.zeros((2, 2)))


def test_non_finite_target_raises():
    sched = make_linear_schedule(3, 1e-3, 0.05)
    m = mixture_model(sched)
    with pytest.raises(NumericError):
        tina_inversion(m, np.array([np.nan, 0.0]), sched, TinaConfig())
