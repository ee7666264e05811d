"""Cruise control behind a moving front vehicle: degree-two chain, moving wall.

The ego car must keep its position at least delta behind the front car. The
barrier parameter k is a virtual wall position; the scalar validity condition
rho = p_f(t) − k − delta lets the wall advance only as fast as the front car
allows, while the chain handles the ego's braking distance.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from ..barriers import ClassK, Dynamics, Hopcbf, InputPolytope, OperatingBox, \
    PhiTerm, ScalarParamConstraint
from ..filter import FilterConfig
from .base import Scenario

log = logging.getLogger("pcbf.scenarios")

U_LOWER = -1.0
U_UPPER = 1.0
DELTA = 0.5
EPS = 0.1
BRAKE_GAIN = 2.0   # 'a' in the first chain rate; validity needs a >= -2/u_L
GAMMA = 2.0
MU = 0.01
L_GAIN = 1.0
V_REF = 1.5
K_INIT = 0.1


def _sqrt_arg(x, k, a, eps):
    return a * (k[0] - x[0]) + eps * eps


def _safe_root(arg):
    if arg < 0.0:
        # Outside the second chain set; clamped so assembly survives
        # transient excursions instead of crashing on the square root.
        log.warning("chain root argument %.3e < 0: clamped to 0", arg)
        return 0.0
    return math.sqrt(arg)


def acc_hopcbf(a=BRAKE_GAIN, eps=EPS, gamma=GAMMA) -> Hopcbf:
    """Degree-two chain for the moving-wall barrier k − x1."""

    phi0 = PhiTerm(
        value=lambda x, k: k[0] - x[0],
        grad_x=lambda x, k: np.array([-1.0, 0.0]),
        grad_k=lambda x, k: np.array([1.0]),
    )

    def phi1_value(x, k):
        return -x[1] + _safe_root(_sqrt_arg(x, k, a, eps)) - eps

    def phi1_grad_x(x, k):
        s = max(_safe_root(_sqrt_arg(x, k, a, eps)), 1e-6)
        return np.array([-a / (2.0 * s), -1.0])

    def phi1_grad_k(x, k):
        s = max(_safe_root(_sqrt_arg(x, k, a, eps)), 1e-6)
        return np.array([a / (2.0 * s)])

    alpha1 = ClassK.from_scalar(
        lambda y: _safe_root(a * y + eps * eps) - eps,
        lambda y: a / (2.0 * max(_safe_root(a * y + eps * eps), 1e-6)),
    )
    return Hopcbf(r=2,
                  phi=[phi0, PhiTerm(phi1_value, phi1_grad_x, phi1_grad_k)],
                  alphas=[alpha1, ClassK.linear(gamma)])


def acc_front_profile(profile, t):
    """Front-car position and right-derivative speed at time t."""
    if profile == 1:
        return 1.0 + t, 1.0
    if profile == 2:
        return 1.0 + t + 0.5 * math.sin(2.0 * t), 1.0 + math.cos(2.0 * t)
    if profile == 3:
        return (1.0 + t, 1.0) if t < 5.0 else (6.0, 0.0)
    raise ValueError(f"unknown front profile: {profile!r}")


def acc_uref(x, t, L_gain=L_GAIN, v_ref=V_REF, u_lower=U_LOWER,
             u_upper=U_UPPER):
    """Saturated cruise law toward the reference speed."""
    return float(np.clip(L_gain * (v_ref - x[1]), u_lower, u_upper))


def make_acc(profile=1, u_lower=U_LOWER, u_upper=U_UPPER, delta=DELTA,
             eps=EPS, a=BRAKE_GAIN, gamma=GAMMA, mu=MU, L_gain=L_GAIN,
             v_ref=V_REF, k_init=K_INIT, t_final=20.0) -> Scenario:
    if a < -2.0 / u_lower:
        raise ValueError("brake gain too small for the input floor")

    def f(x):
        return np.array([x[1], 0.0])

    def g(x):
        return np.array([[0.0], [1.0]])

    dyn = Dynamics(n=2, m=1, f=f, g=g,
                   jac_f=lambda x: np.array([[0.0, 1.0], [0.0, 0.0]]),
                   xdot_fn=lambda x, u: np.array([x[1], u[0]]))

    rho_wall = ScalarParamConstraint(
        rho=lambda k, t: acc_front_profile(profile, t)[0] - k[0] - delta,
        grad_k=lambda k, t: np.array([-1.0]),
        beta=ClassK.linear(2.0),
        dt=lambda k, t: acc_front_profile(profile, t)[1],
    )

    return Scenario(
        name="acc",
        dyn=dyn,
        x0=np.zeros(2),
        k0=np.array([k_init]),
        hopcbf=acc_hopcbf(a=a, eps=eps, gamma=gamma),
        rho_list=[rho_wall],
        input_polytope=InputPolytope.box([u_lower], [u_upper]),
        filter_config=FilterConfig(mu=mu),
        t_final_default=t_final,
        uref=lambda t, x: np.array([acc_uref(x, t, L_gain, v_ref,
                                             u_lower, u_upper)]),
        u_clip=(np.array([u_lower]), np.array([u_upper])),
        box_x=OperatingBox(np.array([-1.0, -1.0]), np.array([1.0, 2.0])),
        box_k=OperatingBox(np.array([1.5]), np.array([7.0])),
        metadata={"profile": profile, "delta": delta, "eps": eps, "a": a,
                  "gamma": gamma, "mu": mu, "L_gain": L_gain, "v_ref": v_ref},
    )
