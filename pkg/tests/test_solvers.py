import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reactgen.core import ConfigError
from reactgen.losses import forward_diffuse, target_score
from reactgen.schedule import NoiseSchedule, build_cosine_schedule
from reactgen.score_net import ConditionBundle, NetConfig, ScoreNet
from reactgen.solvers import (
    cfg_combine,
    data_prediction,
    data_prediction_at,
    guided_data_model,
    initial_state,
    solve_euler_reference,
    solve_ode_2m,
    solve_sde_2m,
)


def gaussian_model(c=1.0):
    """Exact posterior mean for data ~ N(0, c^2)."""
    return lambda x, a, s: c * c * a * x / (c * c * a * a + s * s)


def exact_flow(x_T, schedule, c):
    # the probability flow keeps x / sqrt(c^2 alpha^2 + sigma^2) constant
    scale = lambda i: np.sqrt(c * c * schedule.alpha[i] ** 2 + schedule.sigma[i] ** 2)
    return x_T * scale(0) / scale(schedule.T)


def test_cfg_examples(rng):
    c, u = rng.standard_normal((4, 58)), rng.standard_normal((4, 58))
    assert np.array_equal(cfg_combine(c, u, 0.0), u)
    np.testing.assert_allclose(cfg_combine(c, u, 1.0), c, atol=1e-15)
    np.testing.assert_allclose(cfg_combine(c, np.zeros_like(u), 2.0), 2 * c, atol=0)


@given(st.floats(-4, 4), st.floats(-4, 4), st.integers(0, 2**31))
def test_cfg_affine_in_scale(s1, s2, seed):
    r = np.random.default_rng(seed)
    c, u = r.standard_normal(5), r.standard_normal(5)
    mid = cfg_combine(c, u, (s1 + s2) / 2)
    np.testing.assert_allclose(mid, (cfg_combine(c, u, s1) + cfg_combine(c, u, s2)) / 2, atol=1e-12)


def test_data_prediction_inverts_target_score(rng):
    sch = build_cosine_schedule(50)
    x0, eps = rng.standard_normal((4, 58)), rng.standard_normal((4, 58))
    for t in (1, 10, 30):
        xt = forward_diffuse(x0, t, eps, sch)
        np.testing.assert_allclose(data_prediction(xt, target_score(x0, xt, t, sch), t, sch), x0, atol=1e-10)
    x = rng.standard_normal(7)
    assert np.array_equal(data_prediction_at(x, np.zeros(7), 1.0, 0.3), x)
    s = rng.standard_normal(7)
    np.testing.assert_allclose(data_prediction_at(x, s, 0.6, 0.8), (x + 0.64 * s) / 0.6, rtol=1e-15)
    with pytest.raises(ZeroDivisionError):
        data_prediction_at(x, s, 0.0, 1.0)


def test_initial_state_scale():
    sch = build_cosine_schedule(20)
    x = initial_state(np.random.default_rng(0), (20000,), sch)
    assert abs(x.std() - sch.sigma[sch.T]) < 0.02


def test_zero_prediction_telescopes(rng):
    sch = build_cosine_schedule(20)
    x_T = rng.standard_normal((4, 58))
    traj = solve_ode_2m(x_T, sch, lambda x, a, s: np.zeros_like(x))
    assert len(traj.states) == sch.T + 1 and traj.noise_draws == []
    assert traj.states[0] is not x_T and np.array_equal(traj.states[0], x_T)
    np.testing.assert_allclose(traj.final, x_T * sch.sigma[0] / sch.sigma[sch.T], rtol=1e-12)


def test_sde_eta_zero_is_ode_bitwise(rng):
    sch = build_cosine_schedule(30)
    x_T = rng.standard_normal((3, 5))
    model = gaussian_model(1.7)
    ode = solve_ode_2m(x_T, sch, model)
    sde = solve_sde_2m(x_T, sch, model, eta=0.0, rng=np.random.default_rng(1))
    for a, b in zip(ode.states, sde.states):
        assert np.array_equal(a, b)


def test_ode_is_deterministic(rng):
    sch = build_cosine_schedule(15)
    x_T = rng.standard_normal(6)
    a, b = solve_ode_2m(x_T, sch, gaussian_model(2.0)), solve_ode_2m(x_T, sch, gaussian_model(2.0))
    assert all(np.array_equal(p, q) for p, q in zip(a.states, b.states))


def test_sde_seeds(rng):
    sch = build_cosine_schedule(15)
    x_T = rng.standard_normal(6)
    run = lambda seed: solve_sde_2m(x_T, sch, gaussian_model(), rng=np.random.default_rng(seed))
    a, b, c = run(3), run(3), run(4)
    assert all(np.array_equal(p, q) for p, q in zip(a.states, b.states))
    assert len(a.noise_draws) == sch.T
    assert all(np.all(p != q) for p, q in zip(a.states[1:], c.states[1:]))


def test_solver_errors():
    model = gaussian_model()
    with pytest.raises(ConfigError):
        solve_ode_2m(np.zeros(2), build_cosine_schedule(1), model)
    with pytest.raises(ConfigError):
        solve_sde_2m(np.zeros(2), build_cosine_schedule(5), model, eta=-0.1, rng=np.random.default_rng(0))
    with pytest.raises(ConfigError):
        solve_sde_2m(np.zeros(2), build_cosine_schedule(5), model, eta=1.0)
    with pytest.raises(ConfigError):
        solve_euler_reference(np.zeros(2), build_cosine_schedule(5), model, substeps=4)


@pytest.mark.parametrize("c", [1.0, 0.5])
def test_ode_second_order_on_gaussian_data(c):
    x_T = np.linspace(-2, 2, 9)
    Ts = [10, 20, 40, 80]
    errs = []
    for T in Ts:
        sch = build_cosine_schedule(T)
        errs.append(np.max(np.abs(solve_ode_2m(x_T, sch, gaussian_model(c)).final - exact_flow(x_T, sch, c))))
    slope = -np.polyfit(np.log(Ts), np.log(errs), 1)[0]
    assert slope >= 1.7


def test_euler_reference_first_order():
    x_T = np.linspace(-2, 2, 9)
    sch = build_cosine_schedule(10)
    exact = exact_flow(x_T, sch, 2.0)
    errs = [np.max(np.abs(solve_euler_reference(x_T, sch, gaussian_model(2.0), substeps=n) - exact))
            for n in (320, 640, 1280, 2560)]
    slope = -np.polyfit(np.log([320, 640, 1280, 2560]), np.log(errs), 1)[0]
    assert 0.9 < slope < 1.1
    again = solve_euler_reference(x_T, sch, gaussian_model(2.0), substeps=80)
    assert np.array_equal(again, solve_euler_reference(x_T, sch, gaussian_model(2.0), substeps=80))


def short_schedule(u0, du):
    u = np.array([u0, u0 + du / 2, u0 + du])
    a = np.cos((u + 0.008) / 1.008 * np.pi / 2)
    s = np.sqrt(1 - a * a)
    return NoiseSchedule(T=2, t_grid=u, alpha=a, sigma=s, lam=np.log(a / s))


def test_euler_matches_2m_to_second_order_in_step():
    # over a short interval both agree up to O(h^2)
    x = np.linspace(-2, 2, 9)
    m = gaussian_model(2.0)
    gaps = []
    for du in (0.04, 0.02, 0.01, 0.005):
        sch = short_schedule(0.4, du)
        gaps.append(np.max(np.abs(solve_euler_reference(x, sch, m, substeps=2) - solve_ode_2m(x, sch, m).final)))
    slope = np.polyfit(np.log([0.04, 0.02, 0.01, 0.005]), np.log(gaps), 1)[0]
    assert slope > 1.8


def test_unit_gaussian_flow_is_stationary():
    # for N(0, 1) data the exact flow is the identity map
    sch = build_cosine_schedule(20)
    x = np.array([0.3, -1.2])
    np.testing.assert_array_equal(solve_euler_reference(x, sch, gaussian_model(1.0), substeps=200), x)


def test_sde_terminal_variance_small_problem():
    sch = build_cosine_schedule(30)
    r = np.random.default_rng(11)
    x_T = initial_state(r, (4000,), sch)
    out = solve_sde_2m(x_T, sch, gaussian_model(2.0), eta=1.0, rng=r).final
    assert abs(out.mean()) < 0.15
    assert abs(out.var() / 4.0 - 1) < 0.1


def test_guided_model_scale_endpoints(rng):
    cfg = NetConfig(audio_dim=3, window=4, hidden=8, blocks=1, groups=2, embed=4)
    net = ScoreNet(cfg, seed=1)
    cond = ConditionBundle(rng.standard_normal((4, 58)), rng.standard_normal((4, 3)), 0.0, 0.0, 4,
                           rng.standard_normal(58))
    x, a, s = rng.standard_normal((4, 58)), 0.6, 0.8

    def direct(dropped):
        c = ConditionBundle(cond.speaker_face, cond.speaker_audio, a, s, 4, cond.past_frame, dropped)
        return data_prediction_at(x, net.forward(x, c), a, s)

    np.testing.assert_allclose(guided_data_model(net, cond, 0.0)(x, a, s), direct(True), atol=1e-12)
    np.testing.assert_allclose(guided_data_model(net, cond, 1.0)(x, a, s), direct(False), atol=1e-12)
    batched = guided_data_model(net, cond, 1.5)(np.stack([x, x]), a, s)
    np.testing.assert_allclose(batched[0], guided_data_model(net, cond, 1.5)(x, a, s), atol=1e-12)
