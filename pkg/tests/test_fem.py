import numpy as np
import pytest
import scipy.sparse as sp

from conftest import TINY_STEP, random_state
from ptcnet.fem import BoundaryConditions, FluidProps, NumericError, Problem, State
from ptcnet.mesh import MIRROR_X, BoundaryTag, Mesh, apply_transform, generate_mesh, scale
from ptcnet.ptc import IterSchedule, solve_nonlinear


def _dense_fd_jacobian(problem, x, eps=1e-7):
    cols = []
    for k in range(len(x)):
        d = np.zeros_like(x)
        d[k] = eps * max(1.0, abs(x[k]))
        cols.append((problem.residual(x + d) - problem.residual(x - d)) / (2 * d[k]))
    return np.column_stack(cols)


@pytest.mark.parametrize("seed", range(3))
def test_jacobian_matches_finite_differences(tiny_problem, seed):
    x = random_state(tiny_problem, np.random.default_rng(seed))
    J = tiny_problem.jacobian(x).toarray()
    fd = _dense_fd_jacobian(tiny_problem, x)
    assert np.linalg.norm(J - fd) / np.linalg.norm(J) < 1e-5


def test_dirichlet_rows_are_identity(tiny_problem):
    x = random_state(tiny_problem, np.random.default_rng(0))
    J = tiny_problem.jacobian(x).tocsr()
    R = tiny_problem.residual(x)
    for i in tiny_problem.dirichlet:
        row = J.getrow(i)
        assert row.nnz == 1 and row[0, i] == 1.0
    np.testing.assert_allclose(R[tiny_problem.dirichlet], 0.0, atol=1e-15)


def test_ptc_matrix_tends_to_jacobian(tiny_problem):
    x = random_state(tiny_problem, np.random.default_rng(1))
    J = tiny_problem.jacobian(x)
    K = tiny_problem.ptc_matrix(x, np.full(tiny_problem.mesh.n_elements, 1e12), jac=J)
    assert sp.linalg.norm(K - J) / sp.linalg.norm(J) < 1e-8


def test_ptc_matrix_adds_mass_only_on_free_velocity_rows(tiny_problem):
    x = random_state(tiny_problem, np.random.default_rng(2))
    dt = np.full(tiny_problem.mesh.n_elements, 0.5)
    J = tiny_problem.jacobian(x)
    diff = (tiny_problem.ptc_matrix(x, dt, jac=J) - J).toarray()
    m = tiny_problem.lumped_velocity_mass(dt)
    np.testing.assert_allclose(diff, np.diag(m), atol=1e-14)
    n = tiny_problem.n
    assert np.all(m[2 * n:] == 0) and np.all(m[tiny_problem.dirichlet] == 0)
    free_u = np.setdiff1d(np.arange(n), tiny_problem.dirichlet)
    # lumped mass rho*A/3/dt summed over the vertex patch
    area = np.zeros(n)
    np.add.at(area, tiny_problem.mesh.elements, tiny_problem.area[:, None] / 3)
    np.testing.assert_allclose(m[free_u], 1000.0 * area[free_u] / 0.5)
    with pytest.raises(ValueError):
        tiny_problem.lumped_velocity_mass(np.zeros_like(dt))


def test_nan_state_is_rejected(tiny_problem):
    x = tiny_problem.initial_state()
    x[3] = np.nan
    with pytest.raises(NumericError):
        tiny_problem.residual(x)


def _single_element(props=FluidProps()):
    mesh = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]),
                np.array([[0, 1], [1, 2], [2, 0]]), [BoundaryTag.WALL] * 3)
    return Problem(mesh, props)


def test_strong_residual_examples():
    prob = _single_element(FluidProps(rho=1.0))
    xy = prob.mesh.vertices
    const = State(np.full(3, 0.3), np.full(3, -0.2), np.full(3, 5.0))
    np.testing.assert_allclose(prob.strong_residuals(const), 0.0, atol=1e-14)
    grad_p = State(np.zeros(3), np.zeros(3), xy[:, 0])
    r = prob.strong_residuals(grad_p)
    np.testing.assert_allclose(r[0, :, 0], 1.0)
    np.testing.assert_allclose(r[0, :, 1:], 0.0, atol=1e-14)
    rot = State(-xy[:, 1], xy[:, 0], np.zeros(3))
    r = prob.strong_residuals(rot)
    np.testing.assert_allclose(r[0, :, 0], -xy[:, 0], atol=1e-14)
    np.testing.assert_allclose(r[0, :, 1], -xy[:, 1], atol=1e-14)
    np.testing.assert_allclose(r[0, :, 2], 0.0, atol=1e-14)


def test_constant_field_residual_vanishes_on_single_element():
    mesh = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]),
                np.array([[0, 1], [1, 2], [2, 0]]), [BoundaryTag.OUTLET] * 3)
    prob = Problem(mesh)
    assert len(prob.dirichlet) == 0
    R = prob.residual(State(np.full(3, 0.02), np.full(3, 0.01), np.zeros(3)))
    assert prob.residual_norm(R) < 1e-12


def test_residual_norm_examples(tiny_problem):
    n = tiny_problem.n
    assert tiny_problem.residual_norm(np.zeros(3 * n)) == 0.0
    R = np.zeros(3 * n)
    R[:n] = 1.0
    assert tiny_problem.residual_norm(R) == pytest.approx(np.sqrt(tiny_problem.area.sum()), rel=1e-12)
    with pytest.raises(ValueError):
        tiny_problem.residual_norm(np.zeros(5))


def test_mirror_equivariance(tiny_mesh):
    props, bc = FluidProps(), BoundaryConditions(u_in=0.01)
    p0 = Problem(tiny_mesh, props, bc)
    p1 = Problem(apply_transform(tiny_mesh, MIRROR_X), props, bc)
    n = p0.n
    x = random_state(p0, np.random.default_rng(3))
    flip = np.ones(3 * n)
    flip[n:2 * n] = -1.0
    np.testing.assert_allclose(p1.initial_state(), flip * p0.initial_state(), atol=1e-15)
    xm = flip * x
    xm[p1.dirichlet] = p1.dirichlet_values
    np.testing.assert_allclose(p1.residual(xm), flip * p0.residual(x), rtol=1e-10, atol=1e-14)
    assert p1.residual_norm(p1.residual(xm)) == pytest.approx(p0.residual_norm(p0.residual(x)))


def test_converged_state_has_small_residual(tiny_problem):
    rep = solve_nonlinear(tiny_problem, IterSchedule(), max_iter=100, tol=1e-10)
    assert rep.converged
    r0 = rep.residual_history[0]
    assert tiny_problem.residual_norm(tiny_problem.residual(rep.final_state)) <= 1e-10 * r0


def _solved(problem):
    rep = solve_nonlinear(problem, IterSchedule(), max_iter=100, tol=1e-11)
    assert rep.converged
    n = problem.n
    return rep.final_state[:n], rep.final_state[n:2 * n], rep.final_state[2 * n:]


def test_similarity_at_fixed_reynolds_number(tiny_mesh, tiny_problem):
    u, v, p = _solved(tiny_problem)
    scale_u = np.abs(np.concatenate([u, v])).max()
    # rho and mu scaled together: same kinematic viscosity, pressure scales along
    heavy = Problem(tiny_mesh, FluidProps(rho=3000.0, mu=3e-3), BoundaryConditions(u_in=0.01))
    u2, v2, p2 = _solved(heavy)
    np.testing.assert_allclose(np.concatenate([u2, v2]), np.concatenate([u, v]), atol=1e-8 * scale_u)
    np.testing.assert_allclose(p2, 3.0 * p, atol=1e-8 * np.abs(p).max())
    # lengths x0.1 with speed x10: velocities scale by 10 at matching vertices
    small = generate_mesh(TINY_STEP.with_transform(scale(0.1)), 0.007)
    np.testing.assert_allclose(small.vertices, 0.1 * tiny_mesh.vertices, atol=1e-15)
    u3, v3, _ = _solved(Problem(small, FluidProps(), BoundaryConditions(u_in=0.1)))
    np.testing.assert_allclose(np.concatenate([u3, v3]) / 10.0, np.concatenate([u, v]), atol=1e-8 * scale_u)
