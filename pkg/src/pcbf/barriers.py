"""Domain types for parametrized barrier filtering.

Dynamics, input polytopes, class-K rates, barrier families with a continuous
parameter k, and the validity constraints that k itself must satisfy. All
closed forms (barrier chains, gradients) are supplied by the scenario author;
the validation utilities at the bottom certify those supplies against finite
differences and chain-consistency identities before a filter will accept them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .qp import QpStatus, QuadraticProgram, min_eigenpair, solve_qp


class ValidationError(ValueError):
    """A supplied closed form failed a consistency or regularity check."""


@dataclass(frozen=True)
class OperatingBox:
    """Axis-aligned box on which validity checks sample points."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, float))
        object.__setattr__(self, "hi", np.asarray(self.hi, float))
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ValidationError("malformed operating box")

    @property
    def dim(self):
        return self.lo.size

    def sample(self, rng, n):
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))


@dataclass(frozen=True)
class Dynamics:
    """Control-affine plant ẋ = f(x) + g(x)·u.

    xdot_fn is an optional fused evaluator of the same sum; supplying one
    avoids two array constructions per integrator stage on hot loops. It must
    agree with f + g·u (check_dynamics verifies this on the operating box).
    """

    n: int
    m: int
    f: Callable
    g: Callable
    jac_f: Callable | None = None
    jac_g: Callable | None = None
    xdot_fn: Callable | None = None

    def xdot(self, x, u):
        if self.xdot_fn is not None:
            return self.xdot_fn(x, u)
        return self.f(x) + self.g(x) @ u


class InputPolytope:
    """Admissible inputs {u : A_u·u ≤ b_u}; must be nonempty."""

    def __init__(self, A_u, b_u):
        self.A_u = np.asarray(A_u, float)
        self.b_u = np.asarray(b_u, float).reshape(-1)
        if self.A_u.ndim != 2 or self.A_u.shape[0] != self.b_u.shape[0]:
            raise ValidationError("input polytope rows disagree")
        m = self.A_u.shape[1]
        probe = solve_qp(QuadraticProgram(np.eye(m), np.zeros(m), self.A_u, self.b_u))
        if probe.status is not QpStatus.OPTIMAL:
            raise ValidationError("input polytope is empty")
        self.interior_point = probe.z

    @property
    def m(self):
        return self.A_u.shape[1]

    @staticmethod
    def box(lo, hi):
        lo = np.asarray(lo, float).reshape(-1)
        hi = np.asarray(hi, float).reshape(-1)
        m = lo.size
        A = np.vstack([np.eye(m), -np.eye(m)])
        return InputPolytope(A, np.concatenate([hi, -lo]))

    def contains(self, u, tol=1e-9):
        return bool(np.all(self.A_u @ u <= self.b_u + tol))


@dataclass(frozen=True)
class ClassK:
    """Strictly increasing rate with value(0) = 0, optionally parametrized by k.

    derivative is only needed when the rate appears inside a barrier chain
    (the chain author differentiates through it by hand); plain filter rows
    use values only.
    """

    value: Callable  # (y, k=None) -> float
    derivative: Callable | None = None

    @staticmethod
    def linear(c):
        if c <= 0:
            raise ValidationError("linear rate needs c > 0")
        return ClassK(lambda y, k=None: c * y, lambda y, k=None: c)

    @staticmethod
    def from_scalar(fn, dfn=None):
        deriv = (lambda y, k=None: dfn(y)) if dfn is not None else None
        return ClassK(lambda y, k=None: fn(y), deriv)


def check_classk(alpha: ClassK, y_max, k=None, n_grid=100):
    """Zero at zero (1e-12) and strictly increasing on a grid of [0, y_max]."""
    v0 = alpha.value(0.0, k)
    if abs(v0) > 1e-12:
        raise ValidationError(f"rate value at 0 is {v0!r}, not 0")
    ys = np.linspace(0.0, y_max, n_grid)
    vals = np.array([alpha.value(float(y), k) for y in ys])
    if np.any(np.diff(vals) <= 0):
        raise ValidationError("rate is not strictly increasing on the check grid")


@dataclass(frozen=True)
class PhiTerm:
    """One member of a barrier chain: value and both partial gradients."""

    value: Callable   # (x, k) -> float
    grad_x: Callable  # (x, k) -> (n,)
    grad_k: Callable  # (x, k) -> (n_k,)


@dataclass(frozen=True)
class Pcbf:
    """Relative-degree-one parametrized barrier h(x, k) with its rate."""

    n_k: int
    h: Callable
    grad_x: Callable
    grad_k: Callable
    alpha: ClassK

    def to_hopcbf(self):
        return Hopcbf(r=1, phi=[PhiTerm(self.h, self.grad_x, self.grad_k)],
                      alphas=[self.alpha])


@dataclass(frozen=True)
class Hopcbf:
    """Barrier chain φ₀..φ_{r−1} with rates α₁..α_r.

    The chain must satisfy φⱼ = L_f φ_{j−1} + αⱼ(φ_{j−1}, k) and every
    φ_{j−1} with j < r must have zero sensitivity to the input (relative
    degree r). Both are certified by validate_hopcbf, not assumed.
    """

    r: int
    phi: list
    alphas: list

    def __post_init__(self):
        if self.r < 1 or len(self.phi) != self.r or len(self.alphas) != self.r:
            raise ValidationError("chain length must equal the relative degree")


@dataclass(frozen=True)
class ScalarParamConstraint:
    """Scalar validity condition ρ(k, t) ≥ 0 on the barrier parameter.

    rho may return a single float or a vector of n stacked conditions; in the
    vector case grad_k returns the (n, n_k) Jacobian and beta is applied
    elementwise. Stacking keeps per-step assembly to one call for constraint
    families that share intermediate quantities.
    """

    rho: Callable      # (k, t) -> float or (n,)
    grad_k: Callable   # (k, t) -> (n_k,) or (n, n_k)
    beta: ClassK
    dt: Callable | None = None  # explicit time partial, default 0

    def time_partial(self, k, t):
        if self.dt is None:
            return 0.0
        out = self.dt(k, t)
        return float(out) if np.ndim(out) == 0 else np.asarray(out, float)


@dataclass(frozen=True)
class MatrixParamConstraint:
    """Matrix validity condition ρ(k) ⪰ 0 with directional derivative in k̇.

    dir_deriv(k, v) is the derivative of ρ along parameter velocity v and
    must be linear in v; the decay rate is the single linear coefficient
    gamma (linearity keeps the filtered condition semidefinite).
    """

    rho: Callable        # k -> (p, p) symmetric
    dir_deriv: Callable  # (k, v) -> (p, p)
    gamma: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValidationError("matrix constraint rate gamma must be > 0")


# ------------------------------------------------------------- evaluation ops


def chain_residual(hopcbf: Hopcbf, dyn: Dynamics, x, k):
    """Defect of φⱼ − (L_f φ_{j−1} + αⱼ(φ_{j−1})) for j = 1..r−1.

    A well-formed chain returns zeros (≤ 1e-8); any entry reproduces a
    corruption of the supplied φⱼ verbatim.
    """
    x = np.asarray(x, float)
    k = np.asarray(k, float)
    res = np.zeros(hopcbf.r - 1)
    fx = dyn.f(x)
    for j in range(1, hopcbf.r):
        prev = hopcbf.phi[j - 1]
        lf = float(prev.grad_x(x, k) @ fx)
        rate = hopcbf.alphas[j - 1].value(float(prev.value(x, k)), k)
        res[j - 1] = float(hopcbf.phi[j].value(x, k)) - (lf + rate)
    return res


def relative_degree_defect(hopcbf: Hopcbf, dyn: Dynamics, x, k):
    """‖∇ₓφ_{j−1}·g(x)‖∞ for j = 1..r−1; zero when the degree truly is r."""
    x = np.asarray(x, float)
    k = np.asarray(k, float)
    gx = dyn.g(x)
    out = np.zeros(hopcbf.r - 1)
    for j in range(1, hopcbf.r):
        row = hopcbf.phi[j - 1].grad_x(x, k) @ gx
        out[j - 1] = float(np.max(np.abs(row))) if np.size(row) else 0.0
    return out


def gradient_check(fun, grad, point, step=None):
    """Max relative error between a supplied gradient and central differences."""
    point = np.asarray(point, float)
    if step is None:
        step = 1e-6 * (1.0 + float(np.linalg.norm(point)))
    analytic = np.asarray(grad(point), float).reshape(-1)
    fd = np.zeros_like(analytic)
    for i in range(point.size):
        e = np.zeros_like(point)
        e[i] = step
        fd[i] = (fun(point + e) - fun(point - e)) / (2.0 * step)
    return float(np.max(np.abs(analytic - fd) / (1.0 + np.abs(analytic))))


def membership(hopcbf: Hopcbf, constraints, x, k, t=0.0):
    """(min over chain values, min over validity margins) at one point.

    Matrix constraints contribute their smallest eigenvalue. The pair
    (x, k) is inside the parametrized safe set iff both returns are ≥ 0.
    An empty constraint list yields min_rho = +inf.
    """
    x = np.asarray(x, float)
    k = np.asarray(k, float)
    min_phi = min(float(p.value(x, k)) for p in hopcbf.phi)
    min_rho = np.inf
    for c in constraints:
        if isinstance(c, MatrixParamConstraint):
            val, _ = min_eigenpair(c.rho(k))
        else:
            v = c.rho(k, t)
            val = float(v.min()) if np.ndim(v) else float(v)
        min_rho = min(min_rho, val)
    return min_phi, min_rho


# ------------------------------------------------------------- registration


def check_dynamics(dyn: Dynamics, box: OperatingBox, rng, n=100):
    """Finiteness of f, g on the box; supplied Jacobians vs finite differences."""
    pts = box.sample(rng, n)
    for x in pts:
        fx = np.asarray(dyn.f(x), float)
        gx = np.asarray(dyn.g(x), float)
        if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(gx))):
            raise ValidationError("dynamics not finite on the operating box")
        if fx.shape != (dyn.n,) or gx.shape != (dyn.n, dyn.m):
            raise ValidationError("dynamics shape mismatch")
    if dyn.xdot_fn is not None:
        u_probe = rng.standard_normal((n, dyn.m))
        for x, u in zip(pts, u_probe):
            fused = np.asarray(dyn.xdot_fn(x, u), float)
            composed = np.asarray(dyn.f(x), float) + np.asarray(dyn.g(x), float) @ u
            _require_close(fused, composed, 1e-10, "xdot_fn")
    if dyn.jac_f is None and dyn.jac_g is None:
        return
    for x in pts:
        step = 1e-6 * (1.0 + float(np.linalg.norm(x)))
        if dyn.jac_f is not None:
            J = np.asarray(dyn.jac_f(x), float)
            fd = _fd_jac(dyn.f, x, step)
            _require_close(J, fd, 1e-5, "jac_f")
        if dyn.jac_g is not None:
            J = np.asarray(dyn.jac_g(x), float)
            fd = _fd_jac(dyn.g, x, step)
            _require_close(J, fd, 1e-5, "jac_g")


def _fd_jac(fun, x, step):
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.asarray(fun(x + e), float) - np.asarray(fun(x - e), float))
                    / (2 * step))
    return np.stack(cols, axis=-1)


def _require_close(a, b, rtol, what):
    err = np.max(np.abs(a - b) / (1.0 + np.abs(a)))
    if err > rtol:
        raise ValidationError(f"{what} disagrees with finite differences: {err:.2e}")


def validate_hopcbf(hopcbf: Hopcbf, dyn: Dynamics, box_x: OperatingBox,
                    box_k: OperatingBox, rng, n=200,
                    tol_chain=1e-8, tol_degree=1e-10):
    """Certify chain consistency and relative degree on sampled (x, k) pairs."""
    xs = box_x.sample(rng, n)
    ks = box_k.sample(rng, n)
    worst_chain = 0.0
    worst_deg = 0.0
    for x, k in zip(xs, ks):
        res = chain_residual(hopcbf, dyn, x, k)
        if res.size:
            worst_chain = max(worst_chain, float(np.max(np.abs(res))))
        deg = relative_degree_defect(hopcbf, dyn, x, k)
        if deg.size:
            worst_deg = max(worst_deg, float(np.max(deg)))
    if worst_chain > tol_chain:
        raise ValidationError(f"chain residual {worst_chain:.2e} exceeds {tol_chain}")
    if worst_deg > tol_degree:
        raise ValidationError(f"input sensitivity {worst_deg:.2e} breaks the stated "
                              f"relative degree")
    return worst_chain, worst_deg


def check_scalar_constraint(con: ScalarParamConstraint, box_k: OperatingBox,
                            rng, n=200, t_range=(0.0, 0.0)):
    """Regularity on the zero set and admissibility of the time variation.

    Zero-set points are located by bisecting sampled segments with a sign
    change; the parameter gradient must not vanish there (otherwise the
    filter row loses authority exactly where it matters). Wherever ρ ≥ 0 the
    explicit time drift must satisfy ∂ₜρ + β(ρ) ≥ 0, or no parameter
    velocity can maintain validity.
    """
    ks = box_k.sample(rng, n)
    ts = rng.uniform(t_range[0], t_range[1], size=n)
    vals = np.array([float(con.rho(k, t)) for k, t in zip(ks, ts)])

    def require_regular(k, t):
        gnorm = float(np.linalg.norm(con.grad_k(k, t)))
        if gnorm <= 1e-8:
            raise ValidationError("constraint gradient vanishes on its zero set")

    for i in range(n - 1):
        if abs(vals[i]) <= 1e-9:
            require_regular(ks[i], ts[i])
        if vals[i] * vals[i + 1] < 0:
            a, b = ks[i], ks[i + 1]
            t = ts[i]
            fa = vals[i]
            for _ in range(80):
                mid = 0.5 * (a + b)
                fm = float(con.rho(mid, t))
                if fa * fm <= 0:
                    b = mid
                else:
                    a, fa = mid, fm
            require_regular(0.5 * (a + b), t)

    for k, t, r in zip(ks, ts, vals):
        if r >= 0:
            margin = con.time_partial(k, t) + con.beta.value(r)
            if margin < -1e-12:
                raise ValidationError(
                    f"time drift defeats the validity rate (margin {margin:.2e})")


def check_matrix_constraint(con: MatrixParamConstraint, box_k: OperatingBox,
                            rng, n=50):
    """Symmetry of ρ(k) and linearity of the directional derivative in v."""
    ks = box_k.sample(rng, n)
    n_k = box_k.dim
    for k in ks:
        R = np.asarray(con.rho(k), float)
        if np.max(np.abs(R - R.T)) > 1e-12 * (1 + np.max(np.abs(R))):
            raise ValidationError("matrix constraint value is not symmetric")
        v1 = rng.normal(size=n_k)
        v2 = rng.normal(size=n_k)
        a = float(rng.normal())
        lhs = np.asarray(con.dir_deriv(k, a * v1 + v2), float)
        rhs = a * np.asarray(con.dir_deriv(k, v1), float) \
            + np.asarray(con.dir_deriv(k, v2), float)
        if np.max(np.abs(lhs - rhs)) > 1e-10 * (1 + np.max(np.abs(rhs))):
            raise ValidationError("matrix derivative is not linear in the velocity")


def continuity_probe(fn, x, k, eps=1e-7):
    """Largest jump of fn under coordinate perturbations of size eps."""
    x = np.asarray(x, float)
    k = np.asarray(k, float)
    base = float(fn(x, k))
    worst = 0.0
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        worst = max(worst, abs(float(fn(x + e, k)) - base))
    for i in range(k.size):
        e = np.zeros_like(k)
        e[i] = eps
        worst = max(worst, abs(float(fn(x, k + e)) - base))
    return worst
