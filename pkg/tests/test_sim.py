"""Integrator, trace plumbing, and closed-loop determinism."""

from types import SimpleNamespace

import numpy as np
import pytest

from pcbf.barriers import ClassK, Dynamics, Pcbf
from pcbf.sim import (
    ControlDecision,
    EmptyTrace,
    NonFinite,
    SimConfig,
    TraceRecord,
    read_trace_csv,
    rk4_step,
    run,
    trace_csv_string,
    trace_stats,
    write_trace_csv,
)

from oracles import expm_propagate


def test_rk4_zero_field():
    dyn = Dynamics(n=2, m=1, f=lambda x: np.zeros(2),
                   g=lambda x: np.zeros((2, 1)))
    x = np.array([1.0, -2.0])
    np.testing.assert_array_equal(rk4_step(dyn, x, np.zeros(1), 0.1), x)


def test_rk4_constant_field_exact():
    dyn = Dynamics(n=1, m=1, f=lambda x: np.ones(1),
                   g=lambda x: np.zeros((1, 1)))
    out = rk4_step(dyn, np.array([2.0]), np.zeros(1), 0.1)
    assert out[0] == pytest.approx(2.1, abs=1e-16)


def test_rk4_double_integrator_exact():
    dyn = Dynamics(n=2, m=1, f=lambda x: np.array([x[1], 0.0]),
                   g=lambda x: np.array([[0.0], [1.0]]))
    out = rk4_step(dyn, np.zeros(2), np.array([1.0]), 0.5)
    np.testing.assert_allclose(out, [0.125, 0.5], atol=1e-16)


def test_rk4_rejects_nonpositive_dt_and_nonfinite():
    dyn = Dynamics(n=1, m=1, f=lambda x: np.array([1.0 / x[0]]),
                   g=lambda x: np.zeros((1, 1)))
    with pytest.raises(ValueError):
        rk4_step(dyn, np.ones(1), np.zeros(1), 0.0)
    with np.errstate(divide="ignore"):
        with pytest.raises(NonFinite):
            rk4_step(dyn, np.zeros(1), np.zeros(1), 0.1)


def still_scenario():
    """Zero dynamics, a state-independent barrier, no validity constraints."""
    dyn = Dynamics(n=2, m=1, f=lambda x: np.zeros(2),
                   g=lambda x: np.zeros((2, 1)))
    pc = Pcbf(
        n_k=1,
        h=lambda x, k: k[0],
        grad_x=lambda x, k: np.zeros(2),
        grad_k=lambda x, k: np.array([1.0]),
        alpha=ClassK.linear(1.0),
    )
    return SimpleNamespace(dyn=dyn, x0=np.array([1.0, 2.0]),
                           k0=np.array([0.5]), hopcbf=pc.to_hopcbf(),
                           rho_list=[], clearance=None)


def zero_controller(x, k, t):
    return ControlDecision(u=np.zeros(1), v=np.zeros(1), u_ref=np.zeros(1))


def test_run_zero_dynamics_holds_state():
    trace = run(still_scenario(), zero_controller, SimConfig(t_final=0.5))
    assert len(trace) == 50
    for r in trace:
        np.testing.assert_array_equal(r.x, [1.0, 2.0])
    np.testing.assert_allclose(
        [r.t for r in trace], np.arange(50) * 0.01, atol=0.0)


def test_run_rejects_unsafe_start():
    scen = still_scenario()
    scen.k0 = np.array([-0.5])
    with pytest.raises(ValueError):
        run(scen, zero_controller, SimConfig(t_final=0.1))


def test_parameter_update_is_exact():
    scen = still_scenario()
    v = np.array([0.3])

    def drift_controller(x, k, t):
        return ControlDecision(u=np.zeros(1), v=v, u_ref=np.zeros(1))

    trace = run(scen, drift_controller, SimConfig(t_final=0.02))
    # After exactly one period the parameter moved by dt·v, bit for bit.
    assert trace[1].k[0] == scen.k0[0] + 0.01 * 0.3


def test_run_attaches_partial_trace_on_divergence():
    dyn = Dynamics(n=1, m=1, f=lambda x: np.array([x[0] ** 3]),
                   g=lambda x: np.zeros((1, 1)))
    pc = Pcbf(n_k=1, h=lambda x, k: k[0], grad_x=lambda x, k: np.zeros(1),
              grad_k=lambda x, k: np.array([1.0]), alpha=ClassK.linear(1.0))
    scen = SimpleNamespace(dyn=dyn, x0=np.array([2.0]), k0=np.array([1.0]),
                           hopcbf=pc.to_hopcbf(), rho_list=[], clearance=None)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NonFinite) as exc:
            run(scen, zero_controller, SimConfig(t_final=5.0))
    assert len(exc.value.partial_trace) >= 1


def test_run_determinism_bitwise():
    scen = still_scenario()

    def wiggle(x, k, t):
        return ControlDecision(u=np.array([np.sin(3 * t)]),
                               v=np.array([np.cos(t) * 1e-3]),
                               u_ref=np.array([np.sin(3 * t)]))

    a = run(scen, wiggle, SimConfig(t_final=1.0))
    b = run(scen, wiggle, SimConfig(t_final=1.0))
    assert trace_csv_string(a) == trace_csv_string(b)


def test_rk4_matches_matrix_exponential_on_linear_loop():
    # Triple integrator under the constant stabilizing gain (1, 2, 2):
    # fold the loop into the drift and integrate with no input.
    K = np.array([1.0, 2.0, 2.0])
    A = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    B = np.array([[0.0], [0.0], [1.0]])
    Acl = A - B @ K[None, :]
    dyn = Dynamics(n=3, m=1, f=lambda x: Acl @ x, g=lambda x: B)
    x = np.array([5.0, 0.0, 0.0])
    dt = 1e-3
    n = 10_000
    for _ in range(n):
        x = rk4_step(dyn, x, np.zeros(1), dt)
    ref = expm_propagate(Acl, [5.0, 0.0, 0.0], dt, n)[-1]
    assert np.max(np.abs(x - ref)) <= 1e-8


def test_trace_stats_and_empty_guard():
    with pytest.raises(EmptyTrace):
        trace_stats([])
    trace = run(still_scenario(), zero_controller, SimConfig(t_final=0.2))
    stats = trace_stats(trace)
    assert stats["min_phi"] == pytest.approx(0.5, abs=0.0)
    assert stats["min_rho"] == np.inf
    assert np.isnan(stats["min_clearance"])
    assert stats["max_abs_u"] == 0.0
    assert stats["int_u_sq"] == 0.0
    assert stats["n_steps"] == 20


def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(1)
    trace = []
    for i in range(5):
        trace.append(TraceRecord(
            t=i * 0.01,
            x=rng.normal(size=3), k=rng.normal(size=2),
            u_ref=rng.normal(size=1), u=rng.normal(size=1),
            v=rng.normal(size=2),
            phi_values=rng.normal(size=2), rho_values=rng.normal(size=1),
            clearance=float(rng.normal()),
            qp_iterations=int(rng.integers(0, 9)),
            qp_status="optimal",
            slack=None if i % 2 else float(rng.normal()),
        ))
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path)
    back = read_trace_csv(path)
    assert len(back) == 5
    for a, b in zip(trace, back):
        assert a.t == b.t
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.k, b.k)
        np.testing.assert_array_equal(a.u_ref, b.u_ref)
        np.testing.assert_array_equal(a.u, b.u)
        np.testing.assert_array_equal(a.v, b.v)
        np.testing.assert_array_equal(a.phi_values, b.phi_values)
        np.testing.assert_array_equal(a.rho_values, b.rho_values)
        assert a.clearance == b.clearance
        assert a.qp_iterations == b.qp_iterations
        assert a.qp_status == b.qp_status
        assert a.slack == b.slack
    header = path.read_text().splitlines()[0]
    assert header == ("t,x0,x1,x2,k0,k1,uref0,u0,v0,v1,phi0,phi1,rho0,"
                      "clearance,qp_iters,qp_status,slack")
