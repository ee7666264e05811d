"""Shared closed-form fixtures for tests.

A two-state cruise plant (position gap, speed) with a degree-two barrier
chain: φ₀ = k − x₁ is the headway margin, φ₁ its chain successor under
f = (x₂, 0) with rate α₁(y) = sqrt(2y + 0.01) − 0.1. Written out inline so
tests do not depend on the packaged scenario definitions.
"""

import numpy as np

from pcbf.barriers import (
    ClassK,
    Dynamics,
    Hopcbf,
    InputPolytope,
    OperatingBox,
    PhiTerm,
    ScalarParamConstraint,
)


def cruise_dynamics():
    return Dynamics(
        n=2, m=1,
        f=lambda x: np.array([x[1], 0.0]),
        g=lambda x: np.array([[0.0], [1.0]]),
        jac_f=lambda x: np.array([[0.0, 1.0], [0.0, 0.0]]),
    )


def cruise_chain():
    def s(x, k):
        return np.sqrt(2.0 * (k[0] - x[0]) + 0.01)

    phi0 = PhiTerm(
        value=lambda x, k: k[0] - x[0],
        grad_x=lambda x, k: np.array([-1.0, 0.0]),
        grad_k=lambda x, k: np.array([1.0]),
    )
    phi1 = PhiTerm(
        value=lambda x, k: -x[1] + s(x, k) - 0.1,
        grad_x=lambda x, k: np.array([-1.0 / s(x, k), -1.0]),
        grad_k=lambda x, k: np.array([1.0 / s(x, k)]),
    )
    alpha1 = ClassK.from_scalar(
        lambda y: np.sqrt(2.0 * y + 0.01) - 0.1,
        lambda y: 1.0 / np.sqrt(2.0 * y + 0.01),
    )
    alpha2 = ClassK.linear(2.0)
    return Hopcbf(r=2, phi=[phi0, phi1], alphas=[alpha1, alpha2])


def cruise_boxes():
    # Keep k − x₁ positive so the square root stays real.
    box_x = OperatingBox(np.array([-2.0, -1.0]), np.array([0.0, 1.0]))
    box_k = OperatingBox(np.array([0.05]), np.array([2.0]))
    return box_x, box_k


def cruise_rho():
    """Front-gap validity ρ = (1 + t) − k − 0.5 with rate β(y) = 2y."""
    return ScalarParamConstraint(
        rho=lambda k, t: (1.0 + t) - k[0] - 0.5,
        grad_k=lambda k, t: np.array([-1.0]),
        beta=ClassK.linear(2.0),
        dt=lambda k, t: 1.0,
    )


def cruise_inputs():
    return InputPolytope.box([-1.0], [1.0])
