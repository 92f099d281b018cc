import pytest

from ptcnet.fem import BoundaryConditions, FluidProps, Problem
from ptcnet.mesh import GeometrySpec, generate_mesh

# small back-steps used where dense checks are needed
TINY_STEP = GeometrySpec("BackStep", inflow=(0.05, 0.05), outflow=(0.1, 0.05))
SMALL_STEP = GeometrySpec("BackStep", inflow=(0.05, 0.1), outflow=(0.1, 0.15))


@pytest.fixture(scope="session")
def tiny_mesh():
    mesh = generate_mesh(TINY_STEP, 0.07)
    assert mesh.n_elements <= 30
    return mesh


@pytest.fixture(scope="session")
def small_mesh():
    mesh = generate_mesh(SMALL_STEP, 0.07)
    assert mesh.n_elements <= 50
    return mesh


@pytest.fixture(scope="session")
def tiny_problem(tiny_mesh):
    return Problem(tiny_mesh, FluidProps(), BoundaryConditions(u_in=0.01))


@pytest.fixture(scope="session")
def small_problem(small_mesh):
    return Problem(small_mesh, FluidProps(), BoundaryConditions(u_in=0.01))


def random_state(problem, rng, scale=0.01):
    """Random interior values with the Dirichlet data imposed."""
    x = scale * rng.standard_normal(3 * problem.n)
    x[problem.dirichlet] = problem.dirichlet_values
    return x
