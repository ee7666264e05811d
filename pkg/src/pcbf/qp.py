"""Dense strictly convex QP solver with cutting-plane handling of semidefinite rows.

Everything here is deliberately small-scale: decision dimensions around twenty,
a few dozen inequality rows, matrix constraints of size two to four. The solver
is a dual active-set method that starts from the unconstrained minimum and adds
violated rows one at a time, so no phase-1 is ever needed and infeasibility
comes with a Farkas certificate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

_SYM_TOL = 1e-12


class QpError(Exception):
    pass


class NonSymmetricError(QpError):
    """Matrix handed to a symmetric-only routine is not symmetric."""


class CutBudgetExceeded(QpError):
    """Cutting-plane loop hit its cut budget with a semidefinite row still violated."""

    def __init__(self, msg, worst_lambda=None, n_cuts=None):
        super().__init__(msg)
        self.worst_lambda = worst_lambda
        self.n_cuts = n_cuts


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITERATION_LIMIT = "iteration_limit"


def _check_symmetric(M, name="matrix"):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    scale = 1.0 + float(np.max(np.abs(M))) if M.size else 1.0
    if float(np.max(np.abs(M - M.T))) > _SYM_TOL * scale:
        raise NonSymmetricError(f"{name} is not symmetric")
    return 0.5 * (M + M.T)


class QuadraticProgram:
    """min ½ zᵀH z + fᵀz  s.t.  A z ≤ b, with H symmetric positive definite.

    Immutable after construction. Strict convexity (smallest eigenvalue of H
    at least 1e-10) is verified with a shifted Cholesky factorization.
    """

    def __init__(self, H, f, A=None, b=None):
        self.H = _check_symmetric(H, "H")
        self.f = np.asarray(f, dtype=float).reshape(-1)
        d = self.f.shape[0]
        if self.H.shape != (d, d):
            raise ValueError("H and f dimensions disagree")
        if A is None:
            A = np.zeros((0, d))
        if b is None:
            b = np.zeros(0)
        self.A = np.asarray(A, dtype=float).reshape(-1, d)
        self.b = np.asarray(b, dtype=float).reshape(-1)
        if self.A.shape[0] != self.b.shape[0]:
            raise ValueError("A and b row counts disagree")
        try:
            np.linalg.cholesky(self.H - 1e-10 * np.eye(d))
        except np.linalg.LinAlgError:
            raise ValueError("H is not strictly convex (smallest eigenvalue < 1e-10)")
        self.H.setflags(write=False)
        self.f.setflags(write=False)
        self.A.setflags(write=False)
        self.b.setflags(write=False)

    @property
    def dim(self):
        return self.f.shape[0]

    @property
    def n_rows(self):
        return self.b.shape[0]

    def with_rows(self, A_extra, b_extra):
        """New program with extra inequality rows appended.

        H and f are shared with this program and were already validated, so
        the convexity and symmetry checks are skipped.
        """
        A_extra = np.asarray(A_extra, dtype=float).reshape(-1, self.dim)
        b_extra = np.asarray(b_extra, dtype=float).reshape(-1)
        if A_extra.shape[0] != b_extra.shape[0]:
            raise ValueError("A and b row counts disagree")
        out = object.__new__(QuadraticProgram)
        out.H = self.H
        out.f = self.f
        out.A = np.vstack([self.A, A_extra])
        out.b = np.concatenate([self.b, b_extra])
        out.A.setflags(write=False)
        out.b.setflags(write=False)
        return out

    def with_data(self, f, A, b):
        """New program sharing this (already validated) H with fresh data.

        For per-step reassembly in control loops: the cost curvature never
        changes there, so re-running the symmetry and convexity checks on
        every step would only burn the cycle budget.
        """
        f = np.asarray(f, dtype=float).reshape(-1)
        if f.shape[0] != self.dim:
            raise ValueError("f dimension disagrees with H")
        A = np.asarray(A, dtype=float).reshape(-1, self.dim)
        b = np.asarray(b, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise ValueError("A and b row counts disagree")
        out = object.__new__(QuadraticProgram)
        out.H = self.H
        out.f = f
        out.A = A
        out.b = b
        for arr in (out.f, out.A, out.b):
            arr.setflags(write=False)
        return out


@dataclass(frozen=True)
class QpSolution:
    z: np.ndarray
    status: QpStatus
    active_set: tuple
    multipliers: np.ndarray
    iterations: int
    farkas_ray: dict | None = None

    def kkt_residuals(self, qp: QuadraticProgram):
        """(stationarity, primal feasibility, complementarity) infinity norms."""
        lam = self.multipliers
        stat = qp.H @ self.z + qp.f
        if qp.n_rows:
            stat = stat + qp.A.T @ lam
        slack = qp.A @ self.z - qp.b if qp.n_rows else np.zeros(0)
        r_stat = float(np.max(np.abs(stat))) if stat.size else 0.0
        r_feas = float(np.max(slack)) if slack.size else 0.0
        r_comp = float(np.max(np.abs(lam * slack))) if slack.size else 0.0
        return r_stat, r_feas, r_comp


def _solve_spd(S, rhs):
    """Solve with the working-set Gram matrix, tolerating rank loss.

    Near-parallel rows can make S numerically singular; the least-squares
    pseudo-solution keeps the step well defined in that case.
    """
    try:
        return np.linalg.solve(S, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(S, rhs, rcond=None)[0]


def solve_qp(qp: QuadraticProgram, warm_start=None, H_inv=None) -> QpSolution:
    """Dual active-set solve of a strictly convex inequality-constrained QP.

    Deterministic: among violated rows the most violated (lowest index on
    ties) is added; dual blocking drops the lowest-index blocking row.
    warm_start is an optional iterable of row indices used to seed the
    working set; the minimizer is unique either way, so warm starting only
    changes the path taken, never the answer. H_inv, when supplied, must be
    the inverse of qp.H (callers that solve many programs sharing one H
    avoid refactorizing it every call).
    """
    d, m = qp.dim, qp.n_rows
    if H_inv is None:
        H_inv = np.linalg.inv(qp.H)
    z = -(H_inv @ qp.f)
    if m == 0:
        return QpSolution(z, QpStatus.OPTIMAL, (), np.zeros(0), 0)

    A, b = qp.A, qp.b
    AHi = A @ H_inv  # row i is H⁻¹aᵢ, reused throughout
    # Per-row tolerance: one global scale would let a large bound (say a
    # 1e6 input box) mask genuine violations of small-scale rows.
    feas_tol = 1e-10 * (1.0 + np.abs(b))
    max_iter = 50 * (d + m)
    W: list[int] = []
    lam_W: list[float] = []
    iters = 0

    if warm_start:
        W = sorted({int(i) for i in warm_start if 0 <= int(i) < m})
        # Equality-solve on the seeded set, then drop rows with negative
        # multipliers until the start state is dual feasible.
        while W:
            S = AHi[W] @ A[W].T
            lam = _solve_spd(S, -(b[W] + AHi[W] @ qp.f))
            j = int(np.argmin(lam))
            if lam[j] >= -1e-12:
                lam_W = [max(float(lv), 0.0) for lv in lam]
                z = -(H_inv @ (qp.f + A[W].T @ np.array(lam_W)))
                # A rank-deficient seed leaves a residual on the seeded
                # rows; the exit test below would then see a feasible point
                # with multipliers on inactive rows and wrongly call it
                # optimal. Fall back to a cold start in that case.
                res = np.abs(A[W] @ z - b[W]) - 1e-8 * (1.0 + np.abs(b[W]))
                if float(np.max(res)) > 0.0:
                    W, lam_W = [], []
                    z = -(H_inv @ qp.f)
                break
            del W[j]

    def finish(status, ray=None):
        lam = np.zeros(m)
        z_out = z
        if status is QpStatus.OPTIMAL and W:
            # Canonical restatement of the optimum from the sorted working
            # set: the incremental path (cold or warm started) then has no
            # imprint on the returned bits, and replays compare bitwise.
            # One refinement pass keeps λ·slack tight even when the active
            # rows are nearly dependent and the multipliers large.
            Ws = sorted(W)
            A_W = A[Ws]
            nw = len(Ws)
            K = np.zeros((d + nw, d + nw))
            K[:d, :d] = qp.H
            K[:d, d:] = A_W.T
            K[d:, :d] = A_W
            rhs = np.concatenate([-qp.f, b[Ws]])
            try:
                v = np.linalg.solve(K, rhs)
                # One unconditional refinement pass: ill-scaled multipliers
                # push complementarity residuals above tolerance otherwise.
                v = v + np.linalg.solve(K, rhs - K @ v)
            except np.linalg.LinAlgError:
                v = np.linalg.lstsq(K, rhs, rcond=None)[0]
                v = v + np.linalg.lstsq(K, rhs - K @ v, rcond=None)[0]
            z_new = v[:d]
            # Trust the restatement only if it lands on the feasible set and
            # does not worsen the objective: with a nearly dependent working
            # set the KKT solve can wander arbitrarily far off, and the
            # incremental iterate is the safer answer then.
            obj_old = float(0.5 * z @ (qp.H @ z) + qp.f @ z)
            obj_new = float(0.5 * z_new @ (qp.H @ z_new) + qp.f @ z_new)
            if (float(np.max(A @ z_new - b - feas_tol)) <= 0.0
                    and obj_new <= obj_old + 1e-9 * (1.0 + abs(obj_old))):
                z_out = z_new
                lam[Ws] = np.maximum(v[d:], 0.0)
            else:
                for idx, lv in zip(W, lam_W):
                    lam[idx] = lv
        else:
            for idx, lv in zip(W, lam_W):
                lam[idx] = lv
        return QpSolution(z_out, status, tuple(sorted(W)), lam, iters, farkas_ray=ray)

    while True:
        slack = A @ z - b - feas_tol
        p = int(np.argmax(slack))
        if slack[p] <= 0.0:
            return finish(QpStatus.OPTIMAL)

        a_p = A[p]
        Hi_ap = AHi[p]
        lam_p = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                return finish(QpStatus.ITERATION_LIMIT)
            # Direction of increasing λ_p while holding the working set tight.
            if W:
                A_W = A[W]
                S = AHi[W] @ A_W.T
                dmu = _solve_spd(S, A_W @ Hi_ap)
                dz = -(Hi_ap - AHi[W].T @ dmu)
                dmu = -dmu
            else:
                dmu = np.zeros(0)
                dz = -Hi_ap

            denom = float(a_p @ dz)
            s_p = float(a_p @ z - b[p])
            t_full = np.inf if denom >= -1e-14 else -s_p / denom

            t_dual = np.inf
            j_drop = -1
            for pos, dm in enumerate(dmu):
                if dm < -1e-14:
                    tj = -lam_W[pos] / dm
                    if tj < t_dual - 1e-15:
                        t_dual, j_drop = tj, pos

            if not np.isfinite(t_full) and not np.isfinite(t_dual):
                # dz = 0 and dmu ≥ 0: a_p = −A_Wᵀ·dmu, so y = e_p + Σ dmuⱼ e_wⱼ
                # satisfies y ≥ 0, Aᵀy = 0, bᵀy = −s_p < 0 (Farkas ray).
                ray = {"row": p, "working": list(W), "coeffs": dmu.tolist()}
                y = np.zeros(m)
                y[p] = 1.0
                for idx, cf in zip(W, dmu):
                    y[idx] += cf
                if np.max(np.abs(A.T @ y)) > 1e-7 * (1 + np.max(np.abs(A))) or b @ y >= 0:
                    return finish(QpStatus.ITERATION_LIMIT)
                return finish(QpStatus.INFEASIBLE, ray=ray)

            t = min(t_full, t_dual)
            z = z + t * dz
            lam_p += t
            lam_W = [lv + t * dm for lv, dm in zip(lam_W, dmu)]
            if t_dual < t_full:
                del W[j_drop]
                del lam_W[j_drop]
            else:
                W.append(p)
                lam_W.append(lam_p)
                break


@dataclass(frozen=True)
class LmiConstraint:
    """Affine matrix inequality M(z) = base + Σ zⱼ coeffs[j] ⪰ 0."""

    base: np.ndarray
    coeffs: np.ndarray  # (d, p, p)

    @staticmethod
    def build(base, coeffs):
        base = _check_symmetric(base, "LMI base")
        p = base.shape[0]
        stack = np.stack([_check_symmetric(C, "LMI coefficient") for C in coeffs]) \
            if len(coeffs) else np.zeros((0, p, p))
        if stack.size and stack.shape[1:] != (p, p):
            raise ValueError("LMI coefficient dimension mismatch")
        base.setflags(write=False)
        stack.setflags(write=False)
        return LmiConstraint(base, stack)

    @property
    def p(self):
        return self.base.shape[0]

    def evaluate(self, z):
        z = np.asarray(z, dtype=float)
        if self.coeffs.shape[0] == 0:
            return self.base.copy()
        return self.base + np.tensordot(z, self.coeffs, axes=1)

    def cut_row(self, xi):
        """Scalar row ξᵀM(z)ξ ≥ 0 in A z ≤ b form: (-c, ξᵀ·base·ξ)."""
        c = np.einsum("i,kij,j->k", xi, self.coeffs, xi) if self.coeffs.shape[0] else \
            np.zeros(0)
        return -c, float(xi @ self.base @ xi)


@dataclass
class CutSet:
    """Finite set of spectral cuts, each a unit direction probing one LMI."""

    cuts: list = field(default_factory=list)  # (lmi_index, xi)

    def __post_init__(self):
        for _, xi in self.cuts:
            if abs(np.linalg.norm(xi) - 1.0) > 1e-10:
                raise ValueError("cut direction must be a unit vector")

    def __len__(self):
        return len(self.cuts)


def _boundary_direction(lmi, z_star, base_psd, levels=3, n_grid=17):
    """Eigendirection of M at the PSD-boundary crossing of the segment 0→z*.

    Only meaningful when M(0) is itself PSD (base_psd); returns None
    otherwise. A cut taken at the crossing point supports the feasible set
    far closer to it than a cut at the violated optimum, so the outer
    approximation tightens in few rounds even when the minimizer slides
    along a curved boundary. The crossing is bracketed by batched
    eigenvalue evaluation on a refining grid; direction accuracy well below
    the grid resolution is not needed for a supporting cut.
    """
    if not base_psd:
        return None
    D = lmi.evaluate(z_star) - lmi.base
    lo, hi = 0.0, 1.0
    for _ in range(levels):
        taus = np.linspace(lo, hi, n_grid)
        lams = np.linalg.eigvalsh(lmi.base + taus[:, None, None] * D)[:, 0]
        neg = np.nonzero(lams < 0.0)[0]
        if neg.size == 0 or neg[0] == 0:
            break
        j = int(neg[0])
        lo, hi = taus[j - 1], taus[j]
    _, xi = min_eigenpair(lmi.evaluate(hi * z_star))
    return xi


def solve_qp_with_lmi(qp, lmis, tol_psd=1e-8, max_cuts=200, initial_cuts=None,
                      warm_start=None, H_inv=None):
    """Solve a QP subject to extra affine matrix-semidefiniteness constraints.

    Outer approximation: repeatedly solve the scalar QP, check the smallest
    eigenvalue of every matrix constraint at the solution, and add the
    violated eigendirections as scalar cuts until all matrices are
    positive semidefinite to tol_psd. Each violated matrix also contributes
    a supporting cut at the point where the segment from the origin to the
    minimizer crosses the PSD boundary (when the origin is feasible), which
    keeps the round count small on curved boundaries.

    Returns (QpSolution, CutSet). The cut set replays: passing it back as
    initial_cuts reproduces the same minimizer without rediscovery.
    """
    if tol_psd <= 0:
        raise ValueError("tol_psd must be positive")
    cuts = list(initial_cuts.cuts) if initial_cuts is not None else []
    for idx, _ in cuts:
        if idx >= len(lmis):
            raise ValueError("cut refers to unknown LMI")
    base_psd = [min_eigenpair(lmi.base)[0] >= -1e-12 for lmi in lmis]

    def is_duplicate(i, xi):
        # A direction the cut list already holds adds a row the solver has
        # seen; re-adding it cannot move the minimizer.
        return any(j == i and abs(float(xi @ x0)) > 1.0 - 1e-10 for j, x0 in cuts)

    # Cut rows are immutable once generated; build them incrementally
    # instead of re-deriving the whole list every round.
    row_cache = [lmis[i].cut_row(xi) for i, xi in cuts]
    warm = warm_start
    while True:
        if cuts:
            A_extra = np.array([r[0] for r in row_cache])
            b_extra = np.array([r[1] for r in row_cache])
            qp_aug = qp.with_rows(A_extra, b_extra)
        else:
            qp_aug = qp
        sol = solve_qp(qp_aug, warm_start=warm, H_inv=H_inv)
        if sol.status is not QpStatus.OPTIMAL:
            return sol, CutSet(cuts)
        warm = sol.active_set

        new_cuts = []
        worst = 0.0
        for i, lmi in enumerate(lmis):
            lam, xi = min_eigenpair(lmi.evaluate(sol.z))
            if lam < -tol_psd:
                worst = min(worst, lam)
                if not is_duplicate(i, xi):
                    new_cuts.append((i, xi))
                xi_b = _boundary_direction(lmi, sol.z, base_psd[i])
                if xi_b is not None and abs(float(xi_b @ xi)) < 1.0 - 1e-12 \
                        and not is_duplicate(i, xi_b):
                    new_cuts.append((i, xi_b))
        if worst >= -tol_psd:
            return sol, CutSet(cuts)
        if not new_cuts or len(cuts) + len(new_cuts) > max_cuts:
            # Either the budget is spent or every violated direction is
            # already cut, i.e. the scalar relaxation cannot be tightened
            # further at this accuracy.
            raise CutBudgetExceeded(
                f"cut budget {max_cuts} exhausted with smallest eigenvalue {worst:.3e}",
                worst_lambda=worst, n_cuts=len(cuts),
            )
        cuts.extend(new_cuts)
        row_cache.extend(lmis[i].cut_row(xi) for i, xi in new_cuts)


def min_eigenpair(M):
    """Smallest eigenvalue and eigenvector of a symmetric matrix via cyclic Jacobi.

    Full accuracy at the sizes used here (p ≤ 10); the returned vector is
    unit length with a deterministic sign (largest-magnitude entry positive).
    """
    A = _check_symmetric(M, "M")
    n = A.shape[0]
    V = np.eye(n)
    if n == 1:
        return float(A[0, 0]), np.array([1.0])

    scale = 1.0 + float(np.max(np.abs(A)))
    skip_tol = 1e-18 * scale
    for _sweep in range(60):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = abs(A[p, q])
                if apq > off:
                    off = apq
        if off <= 1e-15 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= skip_tol:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if theta >= 0:
                    t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A ← JᵀAJ with the rotation in the (p, q) plane.
                Ap, Aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * Ap - s * Aq
                A[:, q] = s * Ap + c * Aq
                Ap, Aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * Ap - s * Aq
                A[q, :] = s * Ap + c * Aq
                A[p, q] = 0.0
                A[q, p] = 0.0
                Vp, Vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * Vp - s * Vq
                V[:, q] = s * Vp + c * Vq

    diag = np.diag(A)
    idx = int(np.argmin(diag))
    xi = V[:, idx]
    xi = xi / np.linalg.norm(xi)
    j = int(np.argmax(np.abs(xi)))
    if xi[j] < 0:
        xi = -xi
    return float(diag[idx]), xi
