"""Scenario container, controller factories, and the JSON config loader."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..barriers import Dynamics, Hopcbf, InputPolytope, OperatingBox, membership
from ..filter import FilterConfig, SafetyFilter
from ..sim import ControlDecision, _integrate_hold


@dataclass
class Scenario:
    """Everything one closed-loop study needs, immutable by convention.

    uref is a ready-to-use reference policy (t, x) -> u; uref_factory, when
    set, builds a fresh policy per controller so stateful references replay
    deterministically. clf switches the filter to its stabilizing variant.
    u_clip optionally snaps the filtered input onto a box input set (the
    solver satisfies box rows only to tolerance; the snap is within it).
    hold_floor, when set, arms the end-of-hold guard in make_controller:
    every filtered step is checked against the value the barriers and
    validity margins will actually show at the next sample and backed off
    if any would land below the floor. This closes the gap the continuous
    time certificate leaves open under zero-order hold, where a constraint
    row satisfied at the sample instant can still be driven through zero
    inside the hold by curvature of the constraint surface. When the
    scenario also defines clearance, the guard additionally requires the
    predicted clearance to stay nonnegative: a small sampled-data dip in
    the barrier is harmless away from obstacles but converts one-for-one
    into overlap at contact configurations, so the geometric gap gets its
    own, stricter line.
    """

    name: str
    dyn: Dynamics
    x0: np.ndarray
    k0: np.ndarray
    hopcbf: Hopcbf
    rho_list: list
    input_polytope: InputPolytope
    filter_config: FilterConfig
    t_final_default: float
    uref: Callable | None = None
    uref_factory: Callable | None = None
    clf: Callable | None = None
    clearance: Callable | None = None
    fallback_input: Callable | None = None
    baseline: Callable | None = None
    u_clip: tuple | None = None
    box_x: OperatingBox | None = None
    box_k: OperatingBox | None = None
    hold_floor: float | None = None
    metadata: dict = field(default_factory=dict)


def make_controller(scenario: Scenario, dt_ctrl: float = 0.01,
                    substeps: int = 10, reuse_horizon: int = 5,
                    reuse_tol: float = 0.05):
    """Safety-filtered controller (x, k, t) -> ControlDecision.

    Owns a fresh SafetyFilter (and reference policy) per call, so every
    controller instance replays identically. The filter is exposed as the
    `.filter` attribute for diagnostics.

    dt_ctrl and substeps describe the hold the plant will apply between
    samples; they are consulted only when the scenario sets hold_floor.
    With the guard armed, each step's (u, v) is committed only after the
    barrier, validity, and clearance values at the end of the hold are
    computed with the same integrator the simulator runs, so a step that a
    constraint row certifies at the sample instant but that curvature
    would drive below the floor inside the hold is backed off before it
    happens. The number of steps where the guard overrode the QP is
    tracked on the returned controller as `.guard_hits`.

    The guard also enables deadline-friendly reuse: while the reference
    has moved less than reuse_tol since the last solve and the solve is at
    most reuse_horizon steps old, the previous QP solution is re-submitted
    to the guard instead of re-solving. Every applied command still passes
    the end-of-hold check, so reuse trades a little tracking freshness for
    cycle budget, never safety.
    """
    filt = SafetyFilter(scenario.hopcbf, scenario.dyn,
                        scenario.input_polytope, scenario.rho_list,
                        scenario.filter_config)
    m = scenario.dyn.m
    clip = scenario.u_clip
    floor = scenario.hold_floor
    # The landing prediction integrates the hold with one RK4 step; for the
    # smooth plants used here that sits orders of magnitude below any
    # meaningful floor (fifth-order local error), and unlike the plant's
    # finer substepping it is paid on every single control step.
    n_pred = 1
    h_pred = dt_ctrl / n_pred

    def end_state(x, u):
        return _integrate_hold(scenario.dyn, x, u, h_pred, n_pred)

    clearance = scenario.clearance

    def memb_slack(xe, k, t, v):
        mp, mr = membership(scenario.hopcbf, scenario.rho_list, xe,
                            k + dt_ctrl * v, t + dt_ctrl)
        return min(mp, mr) - floor

    # Backoff rungs, nearest the QP decision first: shrink the parameter
    # motion (it is what constraint curvature turns against us over the
    # hold), then swap the input for the scenario's safe fallback, then
    # stop. Group 0 is the QP input, 1 the fallback, 2 zero input.
    if scenario.fallback_input is not None:
        rungs = ((0, 1.0), (0, 0.5), (0, 0.25), (0, 0.0),
                 (1, 0.5), (1, 0.0), (2, 0.0))
    else:
        rungs = ((0, 1.0), (0, 0.5), (0, 0.25), (0, 0.0), (2, 0.0))

    def guard(x, k, t, u_qp, v_qp, r_prev):
        """Return the first rung in test order whose landing is safe.

        Rung 0, the raw QP decision, is always tested first so a backed-off
        phase snaps fully open the moment pressure lifts. If it fails, the
        ladder resumes one rung shallower than last step's winner, skipping
        intermediate rungs a settled transient has already ruled out; the
        skipped rungs are retried one per step as the transient fades. A
        rung is accepted on its measured landing, never on its position.
        The hold end-state and clearance are shared per input group. When
        no rung lands safely the best landing wins, with the membership
        part evaluated lazily only for rungs that could still lead.
        """
        if r_prev >= 2:
            order = (0, *range(r_prev - 1, len(rungs)))
        else:
            order = range(len(rungs))
        u_groups = {0: u_qp}
        ends = {}
        tried = []
        for ri in order:
            gi, s = rungs[ri]
            u_c = u_groups.get(gi)
            if u_c is None:
                if gi == 1:
                    u_c = np.asarray(scenario.fallback_input(x, k), float)
                    if clip is not None:
                        u_c = np.clip(u_c, clip[0], clip[1])
                else:
                    u_c = np.zeros(m)
                u_groups[gi] = u_c
            cached = ends.get(gi)
            if cached is None:
                xe = end_state(x, u_c)
                cl = float(clearance(xe)) if clearance is not None else np.inf
                ends[gi] = (xe, cl)
            else:
                xe, cl = cached
            v_c = v_qp * s
            if cl >= 0.0:
                ms = memb_slack(xe, k, t, v_c)
                if ms >= 0.0:
                    return u_c, v_c, ri
            else:
                ms = None
            tried.append((ri, u_c, v_c, xe, cl, ms))
        # Nothing lands clean: apply the least-bad landing. A candidate's
        # score is at most its clearance, so membership is only computed
        # where the clearance alone could still beat the running best.
        best_val, best = -np.inf, None
        for ri, u_c, v_c, xe, cl, ms in tried:
            if ms is None:
                if cl <= best_val:
                    continue
                ms = memb_slack(xe, k, t, v_c)
            val = min(ms, cl)
            if val > best_val:
                best_val, best = val, (u_c, v_c, ri)
        if best is None:
            return u_qp, v_qp, 0
        return best

    if scenario.clf is not None:
        def controller(x, k, t):
            out = filt.clf_filter_step(x, k, t, scenario.clf)
            return ControlDecision(u=out.u, v=out.v, u_ref=np.zeros(m),
                                   qp_iterations=out.qp.iterations,
                                   qp_status=out.qp.status.value,
                                   slack=out.slack)
    else:
        policy = (scenario.uref_factory() if scenario.uref_factory
                  else scenario.uref)
        last = {"u": None, "v": None, "u_ref": None, "age": 0, "rung": 0,
                "iters": 0, "status": "none"}

        def controller(x, k, t):
            u_ref = np.asarray(policy(t, x), float)
            stale_ok = (
                floor is not None and last["u"] is not None
                and last["age"] < reuse_horizon
                and float(np.max(np.abs(u_ref - last["u_ref"]))) <= reuse_tol
            )
            if not stale_ok:
                out = filt.filter_step(x, k, t, u_ref)
                u_qp = (np.clip(out.u, clip[0], clip[1]) if clip is not None
                        else out.u)
                last.update(u=u_qp, v=out.v, u_ref=u_ref, age=0,
                            iters=out.qp.iterations,
                            status=out.qp.status.value)
            else:
                last["age"] += 1
            u, v = last["u"], last["v"]
            if floor is not None:
                u, v, rung = guard(x, k, t, u, v, last["rung"])
                if rung > 0:
                    controller.guard_hits += 1
                last["rung"] = rung
            return ControlDecision(u=u, v=v, u_ref=u_ref,
                                   qp_iterations=last["iters"],
                                   qp_status=last["status"], slack=None)

    controller.filter = filt
    controller.guard_hits = 0
    return controller


def make_baseline_controller(scenario: Scenario):
    """Unfiltered comparison law: applies scenario.baseline, freezes k."""
    if scenario.baseline is None:
        raise ValueError(f"scenario {scenario.name!r} defines no baseline")
    n_k = scenario.k0.size

    def controller(x, k, t):
        u = np.atleast_1d(np.asarray(scenario.baseline(x), float))
        return ControlDecision(u=u, v=np.zeros(n_k), u_ref=u,
                               qp_iterations=0, qp_status="baseline",
                               slack=None)

    return controller


_TOP_KEYS = {"scenario", "seed", "profile", "t_final", "overrides"}


def load_scenario(config: dict) -> Scenario:
    """Build a scenario from a parsed config mapping.

    Schema: {"scenario": "rover"|"acc"|"linear", "seed": int,
    "profile": 1|2|3, "t_final": seconds, "overrides": {constant: value}}.
    Unknown top-level keys and unknown override names are rejected.
    """
    unknown = set(config) - _TOP_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    name = config.get("scenario")
    overrides = dict(config.get("overrides") or {})

    from . import acc as _acc
    from . import linear as _linear
    from . import rover as _rover

    try:
        if name == "rover":
            scenario = _rover.make_rover(seed=int(config.get("seed", 0)),
                                         **overrides)
        elif name == "acc":
            scenario = _acc.make_acc(profile=int(config.get("profile", 1)),
                                     **overrides)
        elif name == "linear":
            scenario = _linear.make_linear(**overrides)
        else:
            raise ValueError(f"unknown scenario: {name!r}")
    except TypeError as exc:
        raise ValueError(f"bad scenario overrides: {exc}") from exc

    if "t_final" in config:
        scenario.t_final_default = float(config["t_final"])
    return scenario
