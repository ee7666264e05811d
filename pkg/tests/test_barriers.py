"""Barrier domain types and their validation utilities."""

import numpy as np
import pytest

from pcbf.barriers import (
    ClassK,
    Dynamics,
    Hopcbf,
    InputPolytope,
    MatrixParamConstraint,
    OperatingBox,
    Pcbf,
    PhiTerm,
    ScalarParamConstraint,
    ValidationError,
    chain_residual,
    check_classk,
    check_dynamics,
    check_matrix_constraint,
    check_scalar_constraint,
    continuity_probe,
    gradient_check,
    membership,
    relative_degree_defect,
    validate_hopcbf,
)

from chains import cruise_boxes, cruise_chain, cruise_dynamics


def test_chain_residual_zero_on_consistent_chain():
    dyn, chain = cruise_dynamics(), cruise_chain()
    box_x, box_k = cruise_boxes()
    rng = np.random.default_rng(0)
    for x, k in zip(box_x.sample(rng, 50), box_k.sample(rng, 50)):
        res = chain_residual(chain, dyn, x, k)
        assert res.shape == (1,)
        assert abs(res[0]) <= 1e-12


def test_chain_residual_at_origin():
    dyn, chain = cruise_dynamics(), cruise_chain()
    res = chain_residual(chain, dyn, np.zeros(2), np.array([0.1]))
    assert res[0] == pytest.approx(0.0, abs=1e-14)


def test_chain_residual_reports_corruption():
    dyn, chain = cruise_dynamics(), cruise_chain()
    bad_phi1 = PhiTerm(
        value=lambda x, k: chain.phi[1].value(x, k) + 0.1,
        grad_x=chain.phi[1].grad_x,
        grad_k=chain.phi[1].grad_k,
    )
    corrupted = Hopcbf(r=2, phi=[chain.phi[0], bad_phi1], alphas=chain.alphas)
    res = chain_residual(corrupted, dyn, np.zeros(2), np.array([0.1]))
    assert res[0] == pytest.approx(0.1, abs=1e-12)


def test_chain_ops_empty_for_degree_one():
    pc = Pcbf(
        n_k=1,
        h=lambda x, k: k[0] - x[0] ** 2,
        grad_x=lambda x, k: np.array([-2.0 * x[0], 0.0]),
        grad_k=lambda x, k: np.array([1.0]),
        alpha=ClassK.linear(1.0),
    )
    chain = pc.to_hopcbf()
    dyn = cruise_dynamics()
    assert chain_residual(chain, dyn, np.zeros(2), np.array([1.0])).size == 0
    assert relative_degree_defect(chain, dyn, np.zeros(2), np.array([1.0])).size == 0


def test_relative_degree_defect():
    dyn, chain = cruise_dynamics(), cruise_chain()
    d = relative_degree_defect(chain, dyn, np.array([-1.0, 0.3]), np.array([0.5]))
    assert d[0] == 0.0
    # An input-sensitive φ₀ breaks the stated degree by exactly its coefficient.
    bad_phi0 = PhiTerm(
        value=lambda x, k: k[0] - x[0] + 0.01 * x[1],
        grad_x=lambda x, k: np.array([-1.0, 0.01]),
        grad_k=lambda x, k: np.array([1.0]),
    )
    corrupted = Hopcbf(r=2, phi=[bad_phi0, chain.phi[1]], alphas=chain.alphas)
    d = relative_degree_defect(corrupted, dyn, np.zeros(2), np.array([0.5]))
    assert d[0] == pytest.approx(0.01, abs=1e-15)


def test_gradient_check_quadratic():
    err = gradient_check(
        lambda p: p[0] ** 2, lambda p: np.array([2.0 * p[0]]), np.array([3.0])
    )
    assert err <= 1e-9


def test_gradient_check_flags_sabotage():
    err = gradient_check(
        lambda p: p[0] ** 2, lambda p: np.array([2.2 * p[0]]), np.array([3.0])
    )
    assert 0.05 < err < 0.12


def test_membership_cruise_point():
    chain = cruise_chain()
    rho = ScalarParamConstraint(
        rho=lambda k, t: (1.0 + t) - k[0] - 0.5,
        grad_k=lambda k, t: np.array([-1.0]),
        beta=ClassK.linear(2.0),
        dt=lambda k, t: 1.0,
    )
    min_phi, min_rho = membership(chain, [rho], np.zeros(2), np.array([0.1]), t=0.0)
    assert min_phi == pytest.approx(0.1, abs=1e-12)
    assert min_rho == pytest.approx(0.4, abs=1e-12)
    # The second chain member at this point, for the record: √0.21 − 0.1.
    assert chain.phi[1].value(np.zeros(2), np.array([0.1])) == pytest.approx(
        0.3583, abs=5e-5
    )


def test_membership_negative_when_outside():
    chain = cruise_chain()
    # φ₀ = −0.004 < 0 while the chain square root stays real; the chain
    # minimum is φ₁ = √0.002 − 0.1, below φ₀.
    min_phi, min_rho = membership(chain, [], np.array([0.104, 0.0]),
                                  np.array([0.1]))
    assert min_phi == pytest.approx(np.sqrt(0.002) - 0.1, abs=1e-12)
    assert min_phi < -0.004
    assert min_rho == np.inf


def test_membership_matrix_constraint_uses_min_eigenvalue():
    chain = cruise_chain()
    con = MatrixParamConstraint(
        rho=lambda k: np.diag([k[0], 1.0]),
        dir_deriv=lambda k, v: np.diag([v[0], 0.0]),
        gamma=5.0,
    )
    _, min_rho = membership(chain, [con], np.zeros(2), np.array([0.25]))
    assert min_rho == pytest.approx(0.25, abs=1e-12)


def test_input_polytope_box_and_membership():
    U = InputPolytope.box([-1.0, -1.0], [1.0, 1.0])
    assert U.m == 2
    assert U.contains(np.array([0.5, -0.5]))
    assert not U.contains(np.array([1.5, 0.0]))
    np.testing.assert_allclose(U.interior_point, [0.0, 0.0], atol=1e-12)


def test_input_polytope_rejects_empty():
    with pytest.raises(ValidationError):
        InputPolytope([[1.0], [-1.0]], [-1.0, -1.0])


def test_classk_checks():
    check_classk(ClassK.linear(2.0), y_max=10.0)
    with pytest.raises(ValidationError):
        ClassK.linear(0.0)
    with pytest.raises(ValidationError):
        check_classk(ClassK.from_scalar(lambda y: y + 0.5), y_max=1.0)
    with pytest.raises(ValidationError):
        check_classk(ClassK.from_scalar(lambda y: -y), y_max=1.0)


def test_hopcbf_shape_guard():
    chain = cruise_chain()
    with pytest.raises(ValidationError):
        Hopcbf(r=2, phi=[chain.phi[0]], alphas=chain.alphas)


def test_validate_hopcbf_accepts_clean_chain():
    dyn, chain = cruise_dynamics(), cruise_chain()
    box_x, box_k = cruise_boxes()
    worst_chain, worst_deg = validate_hopcbf(
        chain, dyn, box_x, box_k, np.random.default_rng(1), n=200
    )
    assert worst_chain <= 1e-8
    assert worst_deg <= 1e-10


def test_validate_hopcbf_rejects_corruption():
    dyn, chain = cruise_dynamics(), cruise_chain()
    box_x, box_k = cruise_boxes()
    bad_phi1 = PhiTerm(
        value=lambda x, k: chain.phi[1].value(x, k) + 1e-4,
        grad_x=chain.phi[1].grad_x,
        grad_k=chain.phi[1].grad_k,
    )
    corrupted = Hopcbf(r=2, phi=[chain.phi[0], bad_phi1], alphas=chain.alphas)
    with pytest.raises(ValidationError):
        validate_hopcbf(corrupted, dyn, box_x, box_k, np.random.default_rng(1))


def test_scalar_constraint_checks():
    box_k = OperatingBox(np.array([-1.0]), np.array([1.0]))
    good = ScalarParamConstraint(
        rho=lambda k, t: 1.0 - k[0],
        grad_k=lambda k, t: np.array([-1.0]),
        beta=ClassK.linear(2.0),
    )
    check_scalar_constraint(good, box_k, np.random.default_rng(2))

    # k³ crosses zero with a vanishing gradient at the crossing.
    flat = ScalarParamConstraint(
        rho=lambda k, t: k[0] ** 3,
        grad_k=lambda k, t: np.array([3.0 * k[0] ** 2]),
        beta=ClassK.linear(2.0),
    )
    with pytest.raises(ValidationError):
        check_scalar_constraint(flat, box_k, np.random.default_rng(3), n=200)

    drifting = ScalarParamConstraint(
        rho=lambda k, t: 0.1,
        grad_k=lambda k, t: np.array([1.0]),
        beta=ClassK.linear(2.0),
        dt=lambda k, t: -1.0,
    )
    with pytest.raises(ValidationError):
        check_scalar_constraint(drifting, box_k, np.random.default_rng(4))


def test_matrix_constraint_checks():
    box_k = OperatingBox(np.array([0.0]), np.array([1.0]))
    good = MatrixParamConstraint(
        rho=lambda k: np.diag([k[0], 1.0]),
        dir_deriv=lambda k, v: np.diag([v[0], 0.0]),
        gamma=5.0,
    )
    check_matrix_constraint(good, box_k, np.random.default_rng(5))

    nonlinear = MatrixParamConstraint(
        rho=lambda k: np.diag([k[0], 1.0]),
        dir_deriv=lambda k, v: np.diag([v[0] ** 2, 0.0]),
        gamma=5.0,
    )
    with pytest.raises(ValidationError):
        check_matrix_constraint(nonlinear, box_k, np.random.default_rng(6))

    lopsided = MatrixParamConstraint(
        rho=lambda k: np.array([[k[0], 1.0], [0.0, 1.0]]),
        dir_deriv=lambda k, v: np.zeros((2, 2)),
        gamma=5.0,
    )
    with pytest.raises(ValidationError):
        check_matrix_constraint(lopsided, box_k, np.random.default_rng(7))

    with pytest.raises(ValidationError):
        MatrixParamConstraint(rho=good.rho, dir_deriv=good.dir_deriv, gamma=0.0)


def test_check_dynamics_jacobians():
    dyn = cruise_dynamics()
    box_x, _ = cruise_boxes()
    check_dynamics(dyn, box_x, np.random.default_rng(8))

    wrong = Dynamics(
        n=2, m=1, f=dyn.f, g=dyn.g,
        jac_f=lambda x: np.array([[0.0, 0.9], [0.0, 0.0]]),
    )
    with pytest.raises(ValidationError):
        check_dynamics(wrong, box_x, np.random.default_rng(9))

    nonfinite = Dynamics(
        n=2, m=1, f=lambda x: np.array([np.log(x[0]), 0.0]), g=dyn.g,
    )
    with np.errstate(invalid="ignore"), pytest.raises(ValidationError):
        check_dynamics(nonfinite, box_x, np.random.default_rng(10))


def test_dynamics_xdot_composition():
    dyn = cruise_dynamics()
    x = np.array([1.0, 2.0])
    u = np.array([0.7])
    np.testing.assert_allclose(dyn.xdot(x, u), [2.0, 0.7], atol=1e-15)


def test_continuity_probe_smooth_function():
    chain = cruise_chain()
    jump = continuity_probe(chain.phi[0].value, np.array([-1.0, 0.0]),
                            np.array([0.5]), eps=1e-7)
    assert jump <= 1e-6


def test_gradients_of_cruise_chain_match_finite_differences():
    chain = cruise_chain()
    rng = np.random.default_rng(11)
    box_x, box_k = cruise_boxes()
    for x, k in zip(box_x.sample(rng, 30), box_k.sample(rng, 30)):
        for term in chain.phi:
            ex = gradient_check(lambda p: term.value(p, k),
                                lambda p: term.grad_x(p, k), x)
            ek = gradient_check(lambda p: term.value(x, p),
                                lambda p: term.grad_k(x, p), k)
            assert max(ex, ek) <= 1e-5


def test_check_dynamics_rejects_inconsistent_fused_evaluator():
    dyn = Dynamics(
        n=2, m=1,
        f=lambda x: np.array([x[1], 0.0]),
        g=lambda x: np.array([[0.0], [1.0]]),
        xdot_fn=lambda x, u: np.array([x[1], 1.01 * u[0]]),
    )
    box = OperatingBox(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    with pytest.raises(ValidationError):
        check_dynamics(dyn, box, np.random.default_rng(3), n=20)
