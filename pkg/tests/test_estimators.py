import json
import math

import numpy as np
import pytest
from scipy.linalg import expm

from hyperest.estimators import (
    DimensionMismatch,
    GradientConfig,
    InconsistentData,
    MissingRegressor,
    ObserverConfig,
    RegressionData,
    build_error_system,
    norm_arc,
    run_continuous_gradient,
    run_continuous_observer,
    run_discrete_gradient,
    run_discrete_observer,
    run_hybrid_gradient,
    run_hybrid_observer,
    terminal_norm,
)
from hyperest.excitation import check_hpe
from hyperest.hybrid_sim import SimConfig, check_ues_bound, fit_exponential_envelope, simulate_linear
from hyperest.hybrid_time import HybridArc, make_domain, periodic_domain, read_arc_csv
from hyperest.scenarios import BALL_X0, build_bouncing_ball

GRADIENTS = (run_hybrid_gradient, run_continuous_gradient, run_discrete_gradient)
OBSERVERS = (run_hybrid_observer, run_continuous_observer, run_discrete_observer)


def regression(dom, psi_flow, psi_jump, theta, h=0.01):
    th = np.asarray(theta, dtype=float)
    psi = HybridArc.from_function(dom, psi_flow, h, jump_fn=psi_jump)
    y = psi.map(lambda v: v.T @ th.reshape(-1, 1))
    return RegressionData(psi, y, th)


def norm_at(arc, s):
    return [float(np.linalg.norm(v)) for t, j, v in arc.samples() if t + j <= s + 1e-9][-1]


def test_single_jump_halves_error():
    dom = make_domain([(0, 0, 0), (0, 0, 1)])
    data = regression(dom, lambda t, j: [1.0], lambda t, j: [1.0], [1.0])
    tr = run_hybrid_gradient(data, GradientConfig(1.0, 1.0, (0.0,)))
    assert tr.theta_hat.values[1][0, 0, 0] == pytest.approx(0.5)


@pytest.mark.parametrize("run", GRADIENTS)
def test_gradient_exact_initialization(run, eq261):
    data, _ = eq261
    tr = run(data, GradientConfig(1.0, 1.0, (1.0, -2.0)))
    assert all(np.all(v == 0) for _, _, v in tr.theta_err.samples())


@pytest.mark.xfail(strict=True, reason="gamma = 1 reaches about 0.0195 at t + j = 60; see decisions ledger")
def test_hybrid_gradient_eq261_converges_by_60(eq261):
    data, _ = eq261
    tr = run_hybrid_gradient(data, GradientConfig(1.0, 1.0, (0.0, 0.0)))
    assert norm_at(tr.theta_err, 60.0) < 1e-3


def test_hybrid_gradient_eq261_decays(eq261):
    data, _ = eq261
    tr = run_hybrid_gradient(data, GradientConfig(1.0, 1.0, (0.0, 0.0)))
    e = [norm_at(tr.theta_err, s) for s in (0, 20, 40, 60)]
    assert e[0] > e[1] > e[2] > e[3] and e[3] < 0.01 * e[0]


def test_continuous_gradient_eq261_stalls(eq261):
    data, _ = eq261
    tr = run_continuous_gradient(data, GradientConfig(1.0, 1.0, (0.0, 0.0)))
    # second component is never excited on flows: |theta_err_2| = 2 throughout
    assert terminal_norm(tr.theta_err) >= 0.5 * 2.0
    assert tr.theta_err.values[-1][-1, 1, 0] == pytest.approx(2.0)


def test_continuous_gradient_sincos_converges():
    dom = make_domain([(0, 80, 0)])
    data = regression(dom, lambda t, j: [math.sin(t), math.cos(t)], None, [1.0, -2.0])
    tr = run_continuous_gradient(data, GradientConfig(1.0, 1.0, (0.0, 0.0)))
    assert terminal_norm(tr.theta_err) < 1e-3


def test_discrete_gradient_eq261_plateaus(eq261):
    data, _ = eq261
    tr = run_discrete_gradient(data, GradientConfig(1.0, 1.0, (0.0, 0.0)))
    n = norm_arc(tr.theta_err)
    assert terminal_norm(tr.theta_err) > 0.5
    # nothing moves on flows
    for vs in tr.theta_err.values:
        assert np.all(vs == vs[0])
    assert n.values[-1][-1, 0, 0] < n.values[0][0, 0, 0]


def test_discrete_gradient_alternating_22_jumps():
    dom = periodic_domain(0.5, 23)
    data = regression(
        dom, lambda t, j: [0.0, 0.0], lambda t, j: [1.0, 0.0] if j % 2 == 0 else [0.0, 1.0], [1.0, 1.0]
    )
    tr = run_discrete_gradient(data, GradientConfig(1.0, 1.0, (0.0, 0.0)))
    assert terminal_norm(tr.theta_err) < 1e-3
    assert tr.theta_err.values[1][0, 0, 0] == pytest.approx(-0.5)


def test_data_validation():
    dom = periodic_domain(1.0, 2)
    psi = HybridArc.constant(dom, [1.0, 0.0])
    with pytest.raises(InconsistentData):
        RegressionData(psi, HybridArc.constant(dom, 3.0), np.array([1.0, 0.0]))
    with pytest.raises(DimensionMismatch):
        RegressionData(psi, HybridArc.constant(periodic_domain(1.0, 3), 1.0))
    data = RegressionData(psi, HybridArc.constant(dom, 1.0), np.array([1.0, 5.0]))
    with pytest.raises(DimensionMismatch):
        run_hybrid_gradient(data, GradientConfig(1, 1, (0.0,)))
    with pytest.raises(ValueError):
        GradientConfig(0.0, 1.0)


def test_error_system_eq261(eq261):
    data, _ = eq261
    tr = run_hybrid_gradient(data, GradientConfig(1.0, 1.0, (0.0, 0.0)))
    sys = build_error_system(tr)
    assert np.allclose(sys.A.value_at(2.0, 0), np.diag([math.sin(2.0) ** 2, 0.0]), atol=1e-4)
    assert np.allclose(sys.B.jumps[0], [[0.1111, 0.2222], [0.2222, 0.4444]], atol=1e-4)


def test_error_system_zero_regressor_and_missing():
    dom = periodic_domain(1.0, 3)
    data = regression(dom, lambda t, j: [0.0, 0.0], None, [1.0, 2.0])
    tr = run_hybrid_gradient(data, GradientConfig(1, 1, (0.0, 0.0)))
    sys = build_error_system(tr)
    assert not sys.A.flat_values().any() and not sys.B.jumps.any()
    tr.psi = None
    with pytest.raises(MissingRegressor):
        build_error_system(tr)


def test_observer_error_pair_hpe(ball_traces):
    sys = build_error_system(ball_traces[(20.0, "hybrid")])
    r = check_hpe(sys.A, sys.B, 2.0)
    assert 0.7 * 0.7 <= r.mu <= 0.7 * 1.3


# --- observers ----------------------------------------------------------------


def test_ball_u0_state_converges_parameter_does_not(ball_traces):
    tr = ball_traces[(0.0, "hybrid")]
    assert terminal_norm(tr.state_err) < 1e-2
    assert terminal_norm(tr.theta_err) >= 0.2


def test_ball_u20_hybrid_converges(ball_traces):
    tr = ball_traces[(20.0, "hybrid")]
    assert tr.domain.t_final <= 40.0 + 1e-9
    assert terminal_norm(tr.state_err) < 1e-2 and terminal_norm(tr.theta_err) < 1e-2


def test_ball_u20_baselines_fail(ball_traces):
    assert terminal_norm(ball_traces[(20.0, "continuous")].theta_err) >= 0.1
    d = ball_traces[(20.0, "discrete")]
    assert terminal_norm(d.theta_err) >= 0.1 and terminal_norm(d.state_err) >= 0.1


def test_continuous_observer_reset_variant():
    plant, cfg, sim = build_bouncing_ball(9.81, 20.0)
    tr = run_continuous_observer(plant, [9.81], 20.0, BALL_X0, cfg, sim, reset_at_jumps=True)
    # with the plant jump map applied to x_hat the flow regressor alone identifies theta
    assert terminal_norm(tr.theta_err) < 1e-2


def _exact_run(run, **kw):
    plant, cfg, sim = build_bouncing_ball(9.81, 20.0)
    exact = ObserverConfig(cfg.K_c, cfg.K_d, cfg.gamma_c, cfg.gamma_d, np.array(BALL_X0), np.array([9.81]),
                           np.array([[-1.0], [0.3]]), np.array([[0.5], [2.0]]))
    tr = run(plant, [9.81], 20.0, BALL_X0, exact, SimConfig(h=0.01, T_max=15.0, J_max=25), **kw)
    e = max(np.abs(v).max() for _, _, v in tr.state_err.samples())
    th = max(np.abs(v).max() for _, _, v in tr.theta_err.samples())
    return e, th


@pytest.mark.parametrize(
    "run, kw",
    [(run_hybrid_observer, {}), (run_continuous_observer, {"reset_at_jumps": True})],
)
def test_observer_exact_initialization(run, kw):
    e, th = _exact_run(run, **kw)
    assert e < 1e-12 and th < 1e-12


@pytest.mark.xfail(strict=True, reason="x_hat is held on flows or across jumps; see decisions ledger")
@pytest.mark.parametrize("run", [run_continuous_observer, run_discrete_observer])
def test_baseline_observer_exact_initialization(run):
    e, th = _exact_run(run)
    assert e < 1e-12 and th < 1e-12


def test_observer_dimension_mismatch():
    plant, cfg, sim = build_bouncing_ball()
    bad = ObserverConfig(cfg.K_c, cfg.K_d, 0.4, 0.8, np.zeros(3), cfg.theta_hat0, cfg.Gamma_c0, cfg.Gamma_d0)
    with pytest.raises(DimensionMismatch):
        run_hybrid_observer(plant, [9.81], 0.0, BALL_X0, bad, sim)


def test_observer_traces_share_domain(ball_traces):
    tr = ball_traces[(20.0, "hybrid")]
    bps = tr.domain.breakpoints()
    for name, arc in tr.arcs().items():
        assert arc.domain.breakpoints() == bps, name
    # the recorded regressor uses Gamma_d before its update at jumps
    H = np.array([[1.0, 0.0]])
    assert np.allclose(tr.psi_bar.jumps, np.swapaxes(tr.Gamma_d.jumps, 1, 2) @ H.T)
    assert not np.allclose(tr.Gamma_d_plus.jumps, tr.Gamma_d.jumps)


def test_trace_write(tmp_path, ball_traces):
    tr = ball_traces[(20.0, "hybrid")]
    m = tr.write(tmp_path, prefix="h_", scenario_hash="abc")
    manifest = json.loads(m.read_text())
    assert manifest["scenario_hash"] == "abc"
    for e in manifest["arcs"]:
        arc = read_arc_csv(tmp_path / e["file"], tuple(e["shape"]))
        assert arc.domain.num_jumps == tr.domain.num_jumps


# --- invariants ---------------------------------------------------------------


def test_gradient_matches_error_system(eq261):
    data, _ = eq261
    tr = run_hybrid_gradient(data, GradientConfig(1.0, 1.0, (0.3, 0.7)))
    z = simulate_linear(build_error_system(tr), tr.theta_err.values[0][0])
    for a, b in zip(tr.theta_err.values, z.values):
        assert np.max(np.abs(a - b)) < 1e-6


def test_gradient_jump_contraction_and_flow_monotone(eq261):
    data, _ = eq261
    tr = run_hybrid_gradient(data, GradientConfig(1.0, 1.0, (0.0, 0.0)))
    sys = build_error_system(tr)
    assert all(np.linalg.eigvalsh(B)[-1] <= 1.0 for B in sys.B.jumps)
    e = tr.theta_err
    for k in range(e.domain.num_jumps):
        assert np.linalg.norm(e.values[k + 1][0]) <= np.linalg.norm(e.jumps[k]) + 1e-15
    for vs in e.values:
        n2 = np.sum(vs**2, axis=(1, 2))
        assert np.all(np.diff(n2) <= 1e-12)


def test_observer_eta_identity(ball_traces):
    plant, cfg, _ = build_bouncing_ball()
    H = np.array([[1.0, 0.0]])
    A_eta = plant.A_c(0, 0, None, None, None) - cfg.K_c @ H
    B_eta = plant.A_d(0, 0, None, None, None) - cfg.K_d @ H
    tr = ball_traces[(20.0, "hybrid")]
    eta = tr.eta
    for k, ts in enumerate(eta.times):
        vs = eta.values[k]
        for i in range(len(ts) - 1):
            pred = expm(A_eta * (ts[i + 1] - ts[i])) @ vs[i]
            assert np.max(np.abs(pred - vs[i + 1])) < 1e-4
    # across jumps: eta built with Gamma_d on both sides
    post = tr.state_err.map(lambda v: v)
    for k in range(eta.domain.num_jumps):
        e_post = post.values[k + 1][0]
        th_post = tr.theta_err.values[k + 1][0]
        eta_post = e_post + tr.Gamma_d_plus.jumps[k] @ th_post
        assert np.max(np.abs(eta_post - B_eta @ eta.jumps[k])) < 1e-4


def test_corollary_envelope(eq261):
    data, sys = eq261
    tr = run_hybrid_gradient(data, GradientConfig(1.0, 1.0, (0.0, 0.0)))
    assert check_hpe(sys.A, sys.B, 2 * math.pi + 1).holds
    kappa, lam = fit_exponential_envelope(tr.theta_err, 0.2)
    assert lam > 0
    ok, margin = check_ues_bound(tr.theta_err, kappa, lam)
    assert ok, margin
