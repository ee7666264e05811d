"""Fixed-step closed-loop simulation of the augmented plant.

The plant state integrates with classical RK4 under zero-order-hold control;
the barrier parameter integrates exactly (its velocity is constant over a
control period, so k ← k + dt·v is the true solution). Each control step
appends one trace record carrying everything the plots, statistics, and
acceptance checks need.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .barriers import MatrixParamConstraint, membership
from .qp import min_eigenpair


class NonFinite(RuntimeError):
    """An integration stage produced NaN or Inf."""


class EmptyTrace(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    t_final: float
    dt_ctrl: float = 0.01
    substeps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.dt_ctrl <= 0 or self.t_final <= 0 or self.substeps < 1:
            raise ValueError("need dt_ctrl > 0, t_final > 0, substeps >= 1")


@dataclass(frozen=True)
class TraceRecord:
    t: float
    x: np.ndarray
    k: np.ndarray
    u_ref: np.ndarray
    u: np.ndarray
    v: np.ndarray
    phi_values: np.ndarray
    rho_values: np.ndarray
    clearance: float
    qp_iterations: int
    qp_status: str
    slack: float | None


@dataclass(frozen=True)
class ControlDecision:
    """What a controller hands the simulator for one control period."""

    u: np.ndarray
    v: np.ndarray
    u_ref: np.ndarray
    qp_iterations: int = 0
    qp_status: str = "none"
    slack: float | None = None


def rk4_step(dyn, x, u, dt):
    """One classical Runge-Kutta step of ẋ = f(x) + g(x)·u with u frozen."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    x = np.asarray(x, float)
    xdot = dyn.xdot
    k1 = xdot(x, u)
    k2 = xdot(x + 0.5 * dt * k1, u)
    k3 = xdot(x + 0.5 * dt * k2, u)
    k4 = xdot(x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    # Non-finite stage values propagate into the sum (inf - inf gives nan),
    # so one check on the result covers all four stages.
    if not np.all(np.isfinite(out)):
        raise NonFinite(f"integration step diverged from state {x!r}")
    return out


def _integrate_hold(dyn, x, u, dt, n):
    """n RK4 substeps with u frozen; same arithmetic as rk4_step.

    The per-call entry checks are hoisted out of the substep loop; run()
    validates the end state once per control period, and non-finite values
    propagate through the stages, so nothing is lost by checking late.
    Stage combinations go through two scratch buffers: the values match
    rk4_step bit for bit (multiplies happen first and float addition
    commutes), only the temporaries are gone.
    """
    xdot = dyn.xdot_fn
    if xdot is None:
        f, g = dyn.f, dyn.g

        def xdot(xs, uu):
            return f(xs) + g(xs) @ uu

    half = 0.5 * dt
    sixth = dt / 6.0
    y = np.array(x, float)
    t1 = np.empty_like(y)
    acc = np.empty_like(y)
    for _ in range(n):
        k1 = xdot(y, u)
        np.multiply(k1, half, t1)
        t1 += y
        k2 = xdot(t1, u)
        np.multiply(k2, half, t1)
        t1 += y
        k3 = xdot(t1, u)
        np.multiply(k3, dt, t1)
        t1 += y
        k4 = xdot(t1, u)
        np.multiply(k2, 2.0, acc)
        acc += k1
        np.multiply(k3, 2.0, t1)
        acc += t1
        acc += k4
        acc *= sixth
        y += acc
    return y


def _rho_snapshot(rho_list, k, t):
    vals = []
    for con in rho_list:
        if isinstance(con, MatrixParamConstraint):
            lam, _ = min_eigenpair(con.rho(k))
            vals.append(lam)
        else:
            vals.extend(np.atleast_1d(np.asarray(con.rho(k, t), float)))
    return np.array(vals)


def run(scenario, controller, config: SimConfig):
    """Closed-loop rollout; returns one TraceRecord per control step.

    The controller is any callable (x, k, t) -> ControlDecision; the scenario
    supplies dyn, x0, k0, hopcbf, rho_list, and optionally clearance(x).
    On SafetyFault or NonFinite the partial trace is attached to the raised
    exception as `partial_trace`.
    """
    x = np.asarray(scenario.x0, float).copy()
    k = np.asarray(scenario.k0, float).copy()
    min_phi, min_rho = membership(scenario.hopcbf, scenario.rho_list, x, k, 0.0)
    if min(min_phi, min_rho) < -1e-9:
        raise ValueError(
            f"initial pair is outside the safe set: min_phi={min_phi:.3e} "
            f"min_rho={min_rho:.3e}"
        )
    clearance_fn = getattr(scenario, "clearance", None)
    records: list[TraceRecord] = []
    n_steps = int(round(config.t_final / config.dt_ctrl))
    h = config.dt_ctrl / config.substeps
    try:
        for i in range(n_steps):
            t = i * config.dt_ctrl
            dec = controller(x, k, t)
            phis = np.array([float(p.value(x, k)) for p in scenario.hopcbf.phi])
            records.append(TraceRecord(
                t=t, x=x.copy(), k=k.copy(),
                u_ref=np.asarray(dec.u_ref, float).copy(),
                u=np.asarray(dec.u, float).copy(),
                v=np.asarray(dec.v, float).copy(),
                phi_values=phis,
                rho_values=_rho_snapshot(scenario.rho_list, k, t),
                clearance=float(clearance_fn(x)) if clearance_fn else float("nan"),
                qp_iterations=dec.qp_iterations,
                qp_status=dec.qp_status,
                slack=dec.slack,
            ))
            u = np.asarray(dec.u, float)
            x = _integrate_hold(scenario.dyn, x, u, h, config.substeps)
            # v is constant over the period: one exact update, no drift.
            k = k + config.dt_ctrl * np.asarray(dec.v, float)
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(k))):
                raise NonFinite(f"state diverged after step {i}")
    except Exception as exc:
        exc.partial_trace = records
        raise
    return records


def trace_stats(trace):
    """Aggregate safety margins and cost integrals over a trace."""
    if not trace:
        raise EmptyTrace("no records to summarize")
    dt = trace[1].t - trace[0].t if len(trace) > 1 else 0.0
    min_phi = min(float(np.min(r.phi_values)) for r in trace)
    rho_mins = [float(np.min(r.rho_values)) for r in trace if r.rho_values.size]
    clearances = [r.clearance for r in trace if np.isfinite(r.clearance)]
    return {
        "min_phi": min_phi,
        "min_rho": min(rho_mins) if rho_mins else float("inf"),
        "min_clearance": min(clearances) if clearances else float("nan"),
        "max_abs_u": max(float(np.max(np.abs(r.u))) for r in trace),
        "int_u_sq": dt * sum(float(r.u @ r.u) for r in trace),
        "int_v_sq": dt * sum(float(r.v @ r.v) for r in trace),
        "int_dev_sq": dt * sum(float((r.u - r.u_ref) @ (r.u - r.u_ref))
                               for r in trace),
        "n_steps": len(trace),
    }


def _fmt(v):
    return f"{v:.17g}"


def trace_header(record: TraceRecord):
    cols = ["t"]
    cols += [f"x{i}" for i in range(record.x.size)]
    cols += [f"k{i}" for i in range(record.k.size)]
    cols += [f"uref{i}" for i in range(record.u_ref.size)]
    cols += [f"u{i}" for i in range(record.u.size)]
    cols += [f"v{i}" for i in range(record.v.size)]
    cols += [f"phi{i}" for i in range(record.phi_values.size)]
    cols += [f"rho{i}" for i in range(record.rho_values.size)]
    cols += ["clearance", "qp_iters", "qp_status", "slack"]
    return cols


def write_trace_csv(trace, path):
    """One row per record; floats at 17 significant digits (round-trip exact)."""
    with open(path, "w", newline="") as fh:
        fh.write(trace_csv_string(trace))


def read_trace_csv(path):
    """Inverse of write_trace_csv; shapes recovered from the header."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise EmptyTrace(f"no records in {path}")
    header = rows[0]

    def count(prefix):
        return sum(1 for c in header if c.startswith(prefix)
                   and c[len(prefix):].isdigit())

    # The digit-suffix requirement keeps "uref0" out of the "u" count.
    sizes = {p: count(p) for p in ("x", "k", "uref", "u", "v", "phi", "rho")}
    records = []
    for row in rows[1:]:
        it = iter(row)
        t = float(next(it))
        arrs = {}
        for p in ("x", "k", "uref", "u", "v", "phi", "rho"):
            arrs[p] = np.array([float(next(it)) for _ in range(sizes[p])])
        clearance = float(next(it))
        qp_iters = int(next(it))
        qp_status = next(it)
        slack_s = next(it)
        records.append(TraceRecord(
            t=t, x=arrs["x"], k=arrs["k"], u_ref=arrs["uref"], u=arrs["u"],
            v=arrs["v"], phi_values=arrs["phi"], rho_values=arrs["rho"],
            clearance=clearance, qp_iterations=qp_iters, qp_status=qp_status,
            slack=None if slack_s == "" else float(slack_s),
        ))
    return records


def trace_csv_string(trace):
    """CSV text of a trace (used for byte-level determinism checks)."""
    if not trace:
        raise EmptyTrace("refusing to serialize an empty trace")
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(trace_header(trace[0]))
    for r in trace:
        row = [_fmt(r.t)]
        for arr in (r.x, r.k, r.u_ref, r.u, r.v, r.phi_values, r.rho_values):
            row += [_fmt(val) for val in arr]
        row += [_fmt(r.clearance), str(r.qp_iterations), r.qp_status,
                "" if r.slack is None else _fmt(r.slack)]
        w.writerow(row)
    return buf.getvalue()
