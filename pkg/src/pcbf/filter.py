"""Constraint-row assembly and the per-step safety filters.

One control step solves a small strictly convex QP over the stacked decision
vector (u, v[, s]): the plant input, the barrier-parameter velocity, and an
optional stabilization slack. Rows come in four kinds: chain rows that keep
every barrier level set forward-invariant, one order-r row where the input
finally appears, scalar parameter-validity rows, and matrix validity rows
handled as semidefinite constraints through spectral cuts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .barriers import (
    Dynamics,
    Hopcbf,
    InputPolytope,
    MatrixParamConstraint,
    membership,
)
from .qp import (
    CutSet,
    LmiConstraint,
    QpStatus,
    QuadraticProgram,
    min_eigenpair,
    solve_qp_with_lmi,
)

log = logging.getLogger("pcbf.filter")

V_BOX_BOUND = 1e6          # keeps the QP bounded even under degenerate costs
MEMBERSHIP_TOL = -1e-6     # transient dips beyond this are logged, not fatal
CUT_PRUNE_AFTER = 50       # consecutive inactive solves before a cut is dropped


class SafetyFault(RuntimeError):
    """The step QP failed while the state was inside the safe set.

    Signals broken parameter validity or solver trouble, never a routine
    actuation limit. Carries a full diagnostic dump for post-mortems.
    """

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class FilterConfig:
    """Cost weights and solver knobs for one filter instance.

    mu scales the parameter-velocity penalty; W and V are diagonal weights
    (defaulting to ones) for the input and velocity norms; nu and alpha_clf
    only matter for the stabilizing variant.
    """

    mu: float
    W: np.ndarray | None = None
    V: np.ndarray | None = None
    nu: float | None = None
    alpha_clf: object = None
    tol_psd: float = 1e-8
    max_cuts: int = 200

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be > 0")
        if self.nu is not None and self.nu <= 0:
            raise ValueError("nu must be > 0")
        for name in ("W", "V"):
            w = getattr(self, name)
            if w is not None:
                w = np.asarray(w, float).reshape(-1)
                if np.any(w <= 0):
                    raise ValueError(f"{name} diagonal must be positive")
                object.__setattr__(self, name, w)

    def w_diag(self, m):
        return np.ones(m) if self.W is None else self.W

    def v_diag(self, n_k):
        return np.ones(n_k) if self.V is None else self.V


@dataclass(frozen=True)
class FilterOutput:
    u: np.ndarray
    v: np.ndarray
    slack: float | None
    rows_active: tuple
    qp: object


@dataclass(frozen=True)
class RowSet:
    """Assembled scalar rows A·(u,v) ≤ b plus lifted matrix constraints."""

    A: np.ndarray
    b: np.ndarray
    lmis: list
    labels: tuple

    @property
    def n_rows(self):
        return self.b.shape[0]


_label_cache: dict = {}


def _row_labels(r, sizes, n_lmi):
    """Fixed label tuple for a row layout; cached, the layout never changes."""
    key = (r, sizes, n_lmi)
    hit = _label_cache.get(key)
    if hit is None:
        labels = [f"phi:{j}" for j in range(1, r)] + ["order_r"]
        n_scalar = 0
        for sz in sizes:
            labels.extend(f"rho:{n_scalar + j}" for j in range(sz))
            n_scalar += sz
        labels.extend(f"lmi:{i}" for i in range(n_lmi))
        hit = tuple(labels)
        _label_cache[key] = hit
    return hit


def assemble_rows(hopcbf: Hopcbf, dyn: Dynamics, rho_list, x, k, t) -> RowSet:
    """Build the safety rows at one (x, k, t) over the stacked (u, v).

    Row order is fixed: chain rows for j = 1..r−1 (no input term), then the
    order-r row where the input enters, then one row per scalar validity
    constraint, with matrix constraints returned separately as LMIs in v.
    Every scalar row is expressed as A·(u,v) ≤ b, i.e. the negation of the
    assembled "expression ≥ 0".
    """
    x = np.asarray(x, float)
    k = np.asarray(k, float)
    m = dyn.m
    n_k = k.size
    d = m + n_k
    fx = dyn.f(x)
    gx = dyn.g(x)
    r = hopcbf.r

    # Evaluate the scalar validity blocks first so the row matrix can be
    # sized once and written in place.
    scalar_blocks = []
    lmis = []
    for i, con in enumerate(rho_list):
        if isinstance(con, MatrixParamConstraint):
            coeffs = np.zeros((d,) + np.asarray(con.rho(k), float).shape)
            for j in range(n_k):
                e = np.zeros(n_k)
                e[j] = 1.0
                coeffs[m + j] = np.asarray(con.dir_deriv(k, e), float)
            lmis.append(LmiConstraint.build(con.gamma * np.asarray(con.rho(k), float),
                                            coeffs))
        else:
            # One constraint object may stack several conditions (vector rho).
            vals = np.atleast_1d(np.asarray(con.rho(k, t), float))
            grads = np.atleast_2d(np.asarray(con.grad_k(k, t), float))
            scalar_blocks.append((vals, grads, con))

    n_rows = r + sum(blk[0].size for blk in scalar_blocks)
    A = np.zeros((n_rows, d))
    b = np.empty(n_rows)

    for j in range(1, r):
        prev = hopcbf.phi[j - 1]
        A[j - 1, m:] = -np.asarray(prev.grad_k(x, k), float)
        b[j - 1] = float(hopcbf.phi[j].value(x, k))

    last = hopcbf.phi[r - 1]
    gx_last = np.asarray(last.grad_x(x, k), float)
    gk_last = np.asarray(last.grad_k(x, k), float)
    A[r - 1, :m] = -(gx_last @ gx)
    A[r - 1, m:] = -gk_last
    b[r - 1] = float(gx_last @ fx) \
        + hopcbf.alphas[r - 1].value(float(last.value(x, k)), k)

    pos = r
    for vals, grads, con in scalar_blocks:
        sz = vals.size
        A[pos:pos + sz, m:] = -grads
        b[pos:pos + sz] = con.beta.value(vals) + con.time_partial(k, t)
        pos += sz

    labels = _row_labels(r, tuple(blk[0].size for blk in scalar_blocks),
                         len(lmis))
    return RowSet(A, b, lmis, labels)


class _StoredCut:
    __slots__ = ("lmi", "xi", "inactive")

    def __init__(self, lmi, xi, inactive=0):
        self.lmi = lmi
        self.xi = xi
        self.inactive = inactive


class SafetyFilter:
    """Per-step QP filter for one barrier family on one plant.

    Owns mutable warm-start state (the spectral-cut store), so one instance
    belongs to one control loop; everything else is pure. Construct with
    already-validated closed forms.
    """

    def __init__(self, hopcbf: Hopcbf, dyn: Dynamics, input_polytope: InputPolytope,
                 rho_list, config: FilterConfig):
        self.hopcbf = hopcbf
        self.dyn = dyn
        self.input_polytope = input_polytope
        self.rho_list = list(rho_list)
        self.config = config
        self.n_membership_violations = 0
        self._cuts: list[_StoredCut] = []
        self._static_rows = {}
        self._cost_cache = {}
        self._warm_rows = {}

    # ------------------------------------------------------------- helpers

    def _check_membership(self, x, k, t):
        min_phi, min_rho = membership(self.hopcbf, self.rho_list, x, k, t)
        inside = min(min_phi, min_rho) >= MEMBERSHIP_TOL
        if not inside:
            self.n_membership_violations += 1
            # Scenarios that ride the boundary trip this on thousands of
            # consecutive steps; log the first offence, then sample.
            if (self.n_membership_violations == 1
                    or self.n_membership_violations % 1000 == 0):
                log.warning(
                    "filter entered outside the safe set: min_phi=%.3e "
                    "min_rho=%.3e (t=%.4f, occurrence %d); attempting the "
                    "step anyway", min_phi, min_rho, t,
                    self.n_membership_violations,
                )
        return min_phi, min_rho, inside

    def _lift_rows(self, rowset: RowSet, n_extra):
        """Append n_extra trailing zero columns (slack variables) everywhere."""
        if n_extra == 0:
            return rowset
        A = np.hstack([rowset.A, np.zeros((rowset.n_rows, n_extra))])
        lmis = []
        for lmi in rowset.lmis:
            pad = np.zeros((n_extra,) + lmi.base.shape)
            lmis.append(LmiConstraint.build(lmi.base,
                                            np.concatenate([lmi.coeffs, pad])))
        return RowSet(A, rowset.b, lmis, rowset.labels)

    def _cost(self, m, n_k, n_slack=0):
        """Validated cost prototype, its exact inverse, and the input weights.

        The curvature is diagonal and fixed for the life of the filter, so
        the convexity check runs once and the inverse is written down rather
        than factorized. Returns (prototype program, H_inv, w).
        """
        key = (m, n_k, n_slack)
        hit = self._cost_cache.get(key)
        if hit is None:
            w = self.config.w_diag(m)
            vdiag = self.config.mu * self.config.v_diag(n_k)
            parts = [w, vdiag]
            if n_slack:
                parts.append(np.full(n_slack, self.config.nu))
            diag = np.concatenate(parts)
            proto = QuadraticProgram(2.0 * np.diag(diag), np.zeros(diag.size))
            H_inv = np.diag(0.5 / diag)
            H_inv.setflags(write=False)
            hit = (proto, H_inv, w)
            self._cost_cache[key] = hit
        return hit

    def _input_and_box_rows(self, d, m, n_k):
        """Polytope rows on u plus the large box on v, lifted to dimension d."""
        cached = self._static_rows.get(d)
        if cached is not None:
            return cached
        U = self.input_polytope
        A_in = np.zeros((U.A_u.shape[0], d))
        A_in[:, :m] = U.A_u
        rows = [A_in]
        bs = [U.b_u]
        if n_k:
            box = np.zeros((2 * n_k, d))
            for j in range(n_k):
                box[2 * j, m + j] = 1.0
                box[2 * j + 1, m + j] = -1.0
            rows.append(box)
            bs.append(np.full(2 * n_k, V_BOX_BOUND))
        self._static_rows[d] = (np.vstack(rows), np.concatenate(bs))
        return self._static_rows[d]

    def _solve(self, qp, lmis, context, H_inv=None):
        # context is a zero-argument callable: failure diagnostics carry
        # full state, but the happy path never pays for building them.
        initial = CutSet([(c.lmi, c.xi) for c in self._cuts]) if self._cuts else None
        # Warm starts are keyed by row count: the row layout is fixed for a
        # given assembly path, so last step's active set names the same
        # constraints and usually is the optimal set again.
        warm_key = qp.n_rows
        sol, cutset = solve_qp_with_lmi(
            qp, lmis, tol_psd=self.config.tol_psd,
            max_cuts=self.config.max_cuts, initial_cuts=initial,
            warm_start=self._warm_rows.get(warm_key), H_inv=H_inv,
        )
        if sol.status is QpStatus.OPTIMAL:
            self._warm_rows[warm_key] = sol.active_set
        if sol.status is QpStatus.OPTIMAL:
            n0 = qp.n_rows
            fresh = []
            for pos, (i, xi) in enumerate(cutset.cuts):
                active = sol.multipliers[n0 + pos] > 1e-12
                if pos < len(self._cuts):
                    c = self._cuts[pos]
                    c.inactive = 0 if active else c.inactive + 1
                    if c.inactive <= CUT_PRUNE_AFTER:
                        fresh.append(c)
                else:
                    # Merge with a stored near-parallel direction on the same
                    # matrix instead of piling up copies as the eigenvector
                    # drifts step to step (dropping or replacing a stored cut
                    # is always sound: cuts only relax back to the true LMI).
                    cut = _StoredCut(i, xi, 0 if active else 1)
                    for c in fresh:
                        if c.lmi == i and abs(float(c.xi @ xi)) > 0.999:
                            c.xi = xi
                            c.inactive = min(c.inactive, cut.inactive)
                            break
                    else:
                        fresh.append(cut)
            # Least-recently-active eviction keeps headroom under the per-solve
            # budget so discovery never starves in long runs.
            cap = max(8, self.config.max_cuts - 32)
            if len(fresh) > cap:
                fresh.sort(key=lambda c: c.inactive)
                fresh = fresh[:cap]
            self._cuts = fresh
        else:
            diag = dict(context())
            diag["qp_status"] = sol.status.value
            diag["farkas_ray"] = sol.farkas_ray
            raise SafetyFault(
                f"step QP returned {sol.status.value} inside the safe set"
                if diag.get("inside", True)
                else f"step QP returned {sol.status.value} while already outside "
                     f"the safe set",
                diagnostics=diag,
            )
        return sol

    def _recheck(self, sol, rowset_lifted, lmis, z, m, n_k):
        """Independent satisfaction check of every safety row at the solution."""
        margins = rowset_lifted.b - rowset_lifted.A @ z
        scalar_labels = rowset_lifted.labels[:rowset_lifted.n_rows]
        bad = [(lab, float(mg)) for lab, mg in zip(scalar_labels, margins)
               if mg < -1e-8]
        lam_mins = []
        for lmi in lmis:
            lam, _ = min_eigenpair(lmi.evaluate(z))
            lam_mins.append(lam)
        bad += [(lab, lam) for lab, lam in
                zip(rowset_lifted.labels[rowset_lifted.n_rows:], lam_mins)
                if lam < -self.config.tol_psd]
        u = z[:m]
        if not self.input_polytope.contains(u, tol=1e-8):
            bad.append(("input", float(np.max(self.input_polytope.A_u @ u
                                              - self.input_polytope.b_u))))
        if bad:
            raise SafetyFault(f"post-solve row check failed: {bad}",
                              diagnostics={"violations": bad, "z": z.tolist()})
        active = [lab for lab, mg in zip(scalar_labels, margins)
                  if abs(mg) <= 1e-8]
        active += [lab for lab, lam in
                   zip(rowset_lifted.labels[rowset_lifted.n_rows:], lam_mins)
                   if lam <= self.config.tol_psd]
        return tuple(active)

    # ---------------------------------------------------------------- steps

    def filter_step(self, x, k, t, u_ref) -> FilterOutput:
        """Minimally perturb u_ref (and move k) so the safety rows hold."""
        x = np.asarray(x, float)
        k = np.asarray(k, float)
        u_ref = np.asarray(u_ref, float)
        m, n_k = self.dyn.m, k.size
        d = m + n_k
        _, _, inside = self._check_membership(x, k, t)

        rowset = assemble_rows(self.hopcbf, self.dyn, self.rho_list, x, k, t)
        proto, H_inv, w = self._cost(m, n_k)
        f = np.concatenate([-2.0 * w * u_ref, np.zeros(n_k)])
        A_extra, b_extra = self._input_and_box_rows(d, m, n_k)
        qp = proto.with_data(f, np.vstack([rowset.A, A_extra]),
                             np.concatenate([rowset.b, b_extra]))

        def context():
            return {
                "x": x.tolist(), "k": k.tolist(), "t": t,
                "u_ref": u_ref.tolist(), "rows": rowset.labels,
                "inside": inside, "n_cuts": len(self._cuts),
            }

        sol = self._solve(qp, rowset.lmis, context, H_inv=H_inv)
        active = self._recheck(sol, rowset, rowset.lmis, sol.z, m, n_k)
        return FilterOutput(u=sol.z[:m].copy(), v=sol.z[m:].copy(), slack=None,
                            rows_active=active, qp=sol)

    def clf_filter_step(self, x, k, t, clf_value_and_grad) -> FilterOutput:
        """Stabilizing variant: no reference input, a soft convergence row.

        Minimizes ‖u‖²_W + μ‖v‖²_V + ν·s² subject to the safety rows and
        L_f V + L_g V·u + α_clf(V) ≤ s with s free in sign.
        """
        if self.config.nu is None or self.config.alpha_clf is None:
            raise ValueError("stabilizing step needs nu and alpha_clf configured")
        x = np.asarray(x, float)
        k = np.asarray(k, float)
        m, n_k = self.dyn.m, k.size
        d = m + n_k + 1
        _, _, inside = self._check_membership(x, k, t)

        rowset = self._lift_rows(
            assemble_rows(self.hopcbf, self.dyn, self.rho_list, x, k, t), 1
        )
        V_val, dV = clf_value_and_grad(x)
        fx, gx = self.dyn.f(x), self.dyn.g(x)
        clf_row = np.zeros(d)
        clf_row[:m] = np.asarray(dV, float) @ gx
        clf_row[-1] = -1.0
        clf_b = -float(np.asarray(dV, float) @ fx) \
            - self.config.alpha_clf.value(float(V_val), k)

        proto, H_inv, _ = self._cost(m, n_k, n_slack=1)
        f = np.zeros(d)
        A_extra, b_extra = self._input_and_box_rows(d, m, n_k)
        qp = proto.with_data(
            f,
            np.vstack([rowset.A, clf_row[None, :], A_extra]),
            np.concatenate([rowset.b, [clf_b], b_extra]),
        )
        def context():
            return {
                "x": x.tolist(), "k": k.tolist(), "t": t,
                "rows": rowset.labels, "inside": inside,
                "n_cuts": len(self._cuts), "clf": float(V_val),
            }

        sol = self._solve(qp, rowset.lmis, context, H_inv=H_inv)
        active = self._recheck(sol, rowset, rowset.lmis, sol.z, m, n_k)
        return FilterOutput(u=sol.z[:m].copy(), v=sol.z[m:m + n_k].copy(),
                            slack=float(sol.z[-1]), rows_active=active, qp=sol)
