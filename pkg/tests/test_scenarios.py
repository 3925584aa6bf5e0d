import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperest.estimators import InconsistentData
from hyperest.excitation import check_cpe, check_dpe, check_hpe
from hyperest.scenarios import (
    MisalignedOldData,
    ParseError,
    ValidationError,
    build_bouncing_ball,
    build_mixed_data_scenario,
    build_old_data_plant,
    build_regressor_eq261,
    bundled_names,
    bundled_path,
    error_system,
    evaluate_expectations,
    from_dict,
    load_scenario,
    loads,
    regression_data,
    run_scenario,
    save_scenario,
)

TWO_PI = 2 * math.pi


def test_bundled_files_present():
    assert set(bundled_names()) >= {f"{n}.scn" for n in ("eq261", "bouncing_ball_u0", "bouncing_ball_u20", "mixed_data")}


def test_load_eq261():
    spec = load_scenario(bundled_path("eq261"))
    assert spec.kind == "regression"
    psi = regression_data(spec).psi
    assert psi.domain.num_jumps >= 1
    assert np.allclose(psi.value_at(1.0, 0).ravel(), [math.sin(1.0), 0.0])
    assert np.allclose(psi.jumps[0].ravel(), [0.5, 1.0])
    assert psi.domain.intervals[0].t_end == pytest.approx(TWO_PI)


def test_load_bouncing_ball():
    spec = load_scenario(bundled_path("bouncing_ball_u20"))
    assert spec.kind == "plant" and spec.plant["model"] == "bouncing_ball"
    assert spec.plant["u"] == 20


def test_empty_file_is_parse_error(tmp_path):
    p = tmp_path / "empty.scn"
    p.write_text("")
    with pytest.raises(ParseError):
        load_scenario(p)
    with pytest.raises(ParseError):
        loads("name = [unterminated")


@pytest.mark.parametrize(
    "doc, path",
    [
        ({"name": "x", "kind": "bogus"}, "kind"),
        ({"name": "x", "kind": "regression", "theta": [1.0], "signals": {"psi": {}},
          "domain": {"period": 1.0, "num_periods": 0}}, "domain.num_periods"),
        ({"name": "x", "kind": "regression", "theta": [1.0], "domain": {"period": 1.0, "num_periods": 2}},
         "signals.psi"),
        ({"name": "x", "kind": "plant", "plant": {"model": "pendulum", "x0": [0, 0]}}, "plant.model"),
        ({"name": "x", "kind": "plant", "plant": {"model": "bouncing_ball", "x0": [0, 0]}, "sim": {"h": -1}},
         "sim.h"),
        ({"name": "x", "kind": "plant", "plant": {"model": "bouncing_ball", "x0": [0, 0]},
          "expect": [{"metric": "hybrid.theta_err", "op": "~", "value": 1}]}, "expect[0].op"),
        ({"name": "x", "kind": "plant", "colour": "red"}, "colour"),
    ],
)
def test_validation_error_paths(doc, path):
    with pytest.raises(ValidationError) as info:
        from_dict(doc)
    assert info.value.path == path


def test_eq261_num_periods_zero_rejected():
    with pytest.raises(ValueError):
        build_regressor_eq261(1.0, 0)


def test_eq261_builder_matrices():
    data, sys = build_regressor_eq261(1.0, 2)
    assert np.allclose(sys.A.value_at(1.3, 0), np.diag([math.sin(1.3) ** 2, 0.0]))
    assert np.allclose(sys.B.jumps[0], [[0.1111, 0.2222], [0.2222, 0.4444]], atol=1e-4)
    assert data.residual() < 1e-12


@pytest.mark.parametrize("name", ["eq261", "bouncing_ball_u0", "bouncing_ball_u20", "mixed_data"])
def test_round_trip(name, tmp_path):
    spec = load_scenario(bundled_path(name))
    p = tmp_path / f"{name}.scn"
    save_scenario(spec, p)
    again = load_scenario(p)
    assert again == spec and again.hash == spec.hash


@settings(max_examples=30, deadline=None)
@given(
    period=st.floats(0.5, 10.0),
    n=st.integers(1, 20),
    h=st.floats(1e-3, 0.1),
    gamma=st.floats(0.1, 5.0),
    theta=st.lists(st.floats(-10, 10), min_size=1, max_size=3),
)
def test_round_trip_property(tmp_path_factory, period, n, h, gamma, theta):
    doc = {
        "name": "prop",
        "kind": "regression",
        "theta": theta,
        "sim": {"h": h},
        "domain": {"period": period, "num_periods": n},
        "signals": {"psi": {"flow": [[{"fn": "cos", "freq": 2.0}]] * len(theta)}},
        "gradient": {"gamma": gamma},
        "expect": [{"metric": "hybrid.theta_err", "op": "<", "value": 1.0, "tol": 0.5}],
    }
    spec = from_dict(doc)
    assert loads(spec.dumps()) == spec


@pytest.mark.parametrize("name", ["eq261", "bouncing_ball_u0", "bouncing_ball_u20", "mixed_data"])
def test_bundled_expectations_pass(name):
    spec = load_scenario(bundled_path(name))
    verdicts = evaluate_expectations(spec, run_scenario(spec))
    assert verdicts and all(v["pass"] for v in verdicts), verdicts


def test_eq261_separation():
    spec = load_scenario(bundled_path("eq261"))
    psi = regression_data(spec).psi
    sys = error_system(spec)
    assert check_hpe(sys.A, sys.B, TWO_PI + 1).holds
    assert not check_cpe(psi, TWO_PI + 1).holds
    assert not check_dpe(psi, 3).holds


# --- mixed data -----------------------------------------------------------------


def sin_regressor():
    return (lambda t: [math.sin(t), 0.0], lambda t: math.sin(t) * 1.0)


def test_mixed_reproduces_eq261():
    theta = np.array([1.0, -2.0])
    old = [([0.5, 1.0], 0.5 * 1.0 + 1.0 * -2.0)] * 2
    data = build_mixed_data_scenario(sin_regressor(), old, [TWO_PI, 2 * TWO_PI], 3 * TWO_PI, theta_true=theta)
    ref, _ = build_regressor_eq261(1.0, 3)
    assert data.psi.domain.breakpoints() == pytest.approx(ref.psi.domain.breakpoints())
    for a, b in zip(data.psi.values, ref.psi.values):
        assert np.allclose(a, b)
    assert np.allclose(data.psi.jumps, ref.psi.jumps)
    assert data.residual() < 1e-12


def test_mixed_without_old_data_is_continuous():
    data = build_mixed_data_scenario(sin_regressor(), [], [], 10.0)
    assert data.psi.domain.num_jumps == 0 and data.psi.domain.t_final == 10.0


def test_mixed_inconsistent_old_output():
    with pytest.raises(InconsistentData):
        build_mixed_data_scenario(sin_regressor(), [([0.5, 1.0], 7.0)], [3.0], 6.0, theta_true=[1.0, -2.0])


@pytest.mark.parametrize(
    "old, times, horizon",
    [
        ([([1.0, 0.0], 1.0)], [], 5.0),
        ([([1.0, 0.0], 1.0)] * 2, [2.0, 1.0], 5.0),
        ([([1.0, 0.0], 1.0)], [5.0], 5.0),
        ([([1.0, 0.0], 1.0)], [0.0], 5.0),
    ],
)
def test_mixed_misaligned(old, times, horizon):
    with pytest.raises(MisalignedOldData):
        build_mixed_data_scenario(sin_regressor(), old, times, horizon)


# --- old-data plant ---------------------------------------------------------------


def test_old_data_zero_generator():
    pairs = build_old_data_plant(lambda t: np.zeros((2, 2)), lambda t: np.array([[t], [1.0]]), [0.0, 1.0, 3.0])
    (A0, B0), (A1, B1) = pairs
    assert np.allclose(A0, np.eye(2)) and np.allclose(A1, np.eye(2))
    assert np.allclose(B0.ravel(), [0.5, 1.0]) and np.allclose(B1.ravel(), [4.0, 2.0])


@pytest.mark.parametrize("a", [-1.5, 0.3, 2.0])
def test_old_data_scalar_exponential(a):
    taus = [0.0, 0.4, 1.0, 1.7]
    pairs = build_old_data_plant(lambda t: np.array([[a]]), lambda t: np.array([[1.0]]), taus)
    for (A, B), t0, t1 in zip(pairs, taus, taus[1:]):
        d = t1 - t0
        assert abs(A[0, 0] - math.exp(a * d)) < 1e-8
        assert abs(B[0, 0] - (math.exp(a * d) - 1) / a) < 1e-8


def test_old_data_zero_input():
    pairs = build_old_data_plant(lambda t: np.array([[0.0, 1.0], [-1.0, 0.0]]), lambda t: np.zeros((2, 1)),
                                 [0.0, 1.0, 2.0])
    assert all(not B.any() for _, B in pairs)
    assert np.allclose(pairs[0][0], [[math.cos(1), math.sin(1)], [-math.sin(1), math.cos(1)]], atol=1e-10)


# --- bouncing ball ------------------------------------------------------------------


def test_bouncing_ball_defaults():
    plant, cfg, sim = build_bouncing_ball()
    assert np.allclose(cfg.K_c.ravel(), [0.7215, 1.1184])
    assert np.allclose(cfg.K_d.ravel(), [-0.5, 0.5])
    assert (cfg.gamma_c, cfg.gamma_d) == (0.4, 0.8)
    assert np.allclose(cfg.x_hat0, [4.0, 0.1]) and np.allclose(cfg.theta_hat0, [8.0])
    assert np.allclose(cfg.Gamma_c0.ravel(), [2.0, 4.0]) and np.allclose(cfg.Gamma_d0.ravel(), [4.0, 3.0])
    assert (sim.T_max, sim.J_max) == (40.0, 25)
    x = np.array([[0.0], [-3.0]])
    assert np.allclose(plant.Psi_d(0, 0, None, None, x).ravel(), [0.0, 3.0 / 12.2625])
    assert np.allclose(plant.A_c(0, 0, None, None, x), [[0, 1], [0, -0.1]])
    assert plant.jump_set(x) and not plant.jump_set(np.array([[0.1], [-3.0]]))


def test_bouncing_ball_scenarios_tagged():
    u0 = load_scenario(bundled_path("bouncing_ball_u0"))
    u20 = load_scenario(bundled_path("bouncing_ball_u20"))
    assert any(e.metric == "hybrid.theta_err" and e.op == ">=" for e in u0.expect)
    assert any(e.metric == "hybrid.theta_err" and e.op == "<" for e in u20.expect)
