"""Stabilized P1/P1 finite elements for stationary incompressible Navier-Stokes.

Unknown vector layout is block-wise: ``x = [u_0..u_{N-1}, v_0..v_{N-1}, p_0..p_{N-1}]``.

The residual is Galerkin + SUPG (streamline) + PSPG (pressure) + grad-div
stabilization on linear triangles.  Integrals use the three-point edge
midpoint rule, which is exact for every integrand that occurs (degree <= 2).
The element Jacobian is obtained by complex-step differentiation of the
element residual, exact to rounding.  By default the stabilization parameters
are differentiated as well; they can optionally be held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .mesh import BoundaryTag, Mesh

# barycentric coordinates of the edge-midpoint quadrature points, row q
_LAM = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])
_CSTEP = 1e-30

EPS_U = 1e-10  # zero-velocity guard (m/s), shared with ptc and features


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class FluidProps:
    rho: float = 1000.0
    mu: float = 1e-3
    body_force: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.rho > 0 and self.mu > 0):
            raise ValueError("rho and mu must be positive")

    @property
    def nu(self) -> float:
        return self.mu / self.rho


def reynolds(props: FluidProps, velocity: float, length: float) -> float:
    return props.rho * velocity * length / props.mu


@dataclass(frozen=True)
class BoundaryConditions:
    """Peak inlet speed, outlet pressure and tangential speed of the moving wall."""

    u_in: float = 0.0
    p_out: float = 0.0
    u_wall: float = 0.0


@dataclass
class State:
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.u, self.v, self.p = (np.asarray(a, dtype=float) for a in (self.u, self.v, self.p))
        if not (len(self.u) == len(self.v) == len(self.p)):
            raise ValueError("state components differ in length")

    @classmethod
    def from_vector(cls, x: np.ndarray) -> State:
        n = len(x) // 3
        return cls(x[:n].copy(), x[n:2 * n].copy(), x[2 * n:].copy())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.u, self.v, self.p])

    @property
    def n(self) -> int:
        return len(self.u)


def _as_vector(state) -> np.ndarray:
    x = state.vector() if isinstance(state, State) else np.asarray(state)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite entries in state")
    return x


class Problem:
    """Mesh + fluid + boundary data with cached geometric quantities.

    ``convection=False`` drops the convective term and the streamline/grad-div
    stabilization, leaving a PSPG-stabilized Stokes problem.
    """

    def __init__(self, mesh: Mesh, props: FluidProps = FluidProps(),
                 bc: BoundaryConditions = BoundaryConditions(), convection: bool = True):
        self.mesh = mesh
        self.props = props
        self.bc = bc
        self.convection = convection
        p = mesh.vertices[mesh.elements]
        self.area = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                           - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
        # gradients of the barycentric basis functions, (E, 3, 2)
        g = np.empty((mesh.n_elements, 3, 2))
        for a in range(3):
            b, c = (a + 1) % 3, (a + 2) % 3
            g[:, a, 0] = p[:, b, 1] - p[:, c, 1]
            g[:, a, 1] = p[:, c, 0] - p[:, b, 0]
        self.grad = g / (2.0 * self.area)[:, None, None]
        self.h = np.asarray(mesh.h)
        n = mesh.n_vertices
        self.n = n
        el = mesh.elements
        self.ldofs = np.concatenate([el, el + n, el + 2 * n], axis=1)  # (E, 9)
        self._setup_dirichlet()

    # -- boundary data -----------------------------------------------------

    def _setup_dirichlet(self):
        mesh, n = self.mesh, self.n
        values = np.zeros(3 * n)
        fixed = np.zeros(3 * n, dtype=bool)

        inlet = mesh.tag_vertices(BoundaryTag.INLET)
        if len(inlet):
            prof = _inlet_profile(mesh, inlet, self.bc.u_in)
            values[inlet], values[inlet + n] = prof[:, 0], prof[:, 1]
            fixed[inlet] = fixed[inlet + n] = True
        moving = mesh.tag_vertices(BoundaryTag.MOVING_WALL)
        if len(moving):
            xy = mesh.vertices[moving]
            c = xy.mean(axis=0)
            d = xy - c
            r = np.hypot(d[:, 0], d[:, 1])
            values[moving] = -self.bc.u_wall * d[:, 1] / r
            values[moving + n] = self.bc.u_wall * d[:, 0] / r
            fixed[moving] = fixed[moving + n] = True
        for tag in (BoundaryTag.WALL, BoundaryTag.OBSTACLE_WALL):
            w = mesh.tag_vertices(tag)
            values[w] = values[w + n] = 0.0
            fixed[w] = fixed[w + n] = True
        if BoundaryTag.OUTLET not in mesh.tags_present:
            # enclosed flow: pressure fixed at one wall vertex
            anchor = mesh.tag_vertices(BoundaryTag.WALL)
            anchor = anchor[0] if len(anchor) else 0
            fixed[2 * n + anchor] = True
            values[2 * n + anchor] = 0.0
        self.dirichlet = np.flatnonzero(fixed)
        self.dirichlet_mask = fixed
        self.dirichlet_values = values[fixed]

        # outlet traction: integral of p_out n . phi_i
        self.outlet_load = np.zeros(3 * n)
        if self.bc.p_out != 0.0:
            for (i, j), t in zip(mesh.boundary_edges, mesh.boundary_tags):
                if t != BoundaryTag.OUTLET:
                    continue
                dx, dy = mesh.vertices[j] - mesh.vertices[i]
                # outward normal times edge length
                for k in (i, j):
                    self.outlet_load[k] += 0.5 * self.bc.p_out * dy
                    self.outlet_load[k + n] += -0.5 * self.bc.p_out * dx

    def initial_state(self) -> np.ndarray:
        """Zero interior velocity and pressure with Dirichlet values imposed."""
        x = np.zeros(3 * self.n)
        x[self.dirichlet] = self.dirichlet_values
        return x

    # -- cached matrices ---------------------------------------------------

    @cached_property
    def mass(self) -> sp.csr_matrix:
        """Consistent scalar P1 mass matrix."""
        el = self.mesh.elements
        local = (np.ones((3, 3)) + np.eye(3)) / 12.0
        data = self.area[:, None, None] * local[None]
        rows = np.repeat(el, 3, axis=1)
        cols = np.tile(el, (1, 3))
        return sp.csr_matrix((data.ravel(), (rows.ravel(), cols.ravel())), shape=(self.n, self.n))

    @cached_property
    def _jac_index(self):
        rows = np.repeat(self.ldofs, 9, axis=1).ravel()
        cols = np.tile(self.ldofs, (1, 9)).ravel()
        keep = ~self.dirichlet_mask[rows]
        return rows, cols, keep

    # -- element kernels ---------------------------------------------------

    def stabilization(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-element (tau, delta) evaluated at ``x``."""
        el, n = self.mesh.elements, self.n
        return self._stab_params(x[el].mean(axis=1), x[el + n].mean(axis=1))

    def _stab_params(self, uc, vc):
        # tau depends on |u|^2 only, so it is analytic and safe under complex step
        h, nu = self.h, self.props.nu
        if not self.convection:
            tau = np.full(len(h), h ** 2 / (4.0 * nu))
            return tau, np.zeros(len(h))
        s2 = uc * uc + vc * vc
        tau = 1.0 / np.sqrt(4.0 * s2 / h ** 2 + (4.0 * nu / h ** 2) ** 2)
        # |u| is not differentiable at rest; delta's sensitivity is dropped there
        moving = np.abs(np.real(s2)) > 1e-300
        speed = np.where(moving, np.sqrt(np.where(moving, s2, 1.0)), 0.0)
        delta = 0.5 * speed * h
        return tau, delta

    def centroid_speed(self, x: np.ndarray) -> np.ndarray:
        el, n = self.mesh.elements, self.n
        uc = x[el].mean(axis=1)
        vc = x[el + n].mean(axis=1)
        return np.hypot(uc, vc)

    def _element_residual(self, loc: np.ndarray, frozen=None) -> np.ndarray:
        """(..., E, 9) local residuals from (..., E, 9) local unknowns (may be complex).

        Leading axes batch several states over the same mesh.  ``frozen=(tau,
        delta)`` fixes the stabilization parameters; otherwise they are
        computed from ``loc`` itself.
        """
        rho, mu = self.props.rho, self.props.mu
        fx, fy = self.props.body_force
        G, A = self.grad, self.area
        Gx, Gy = G[:, :, 0], G[:, :, 1]
        ul, vl, pl = loc[..., 0:3], loc[..., 3:6], loc[..., 6:9]
        if frozen is None:
            tau, delta = self._stab_params(ul.mean(axis=-1), vl.mean(axis=-1))
        else:
            tau, delta = frozen
        gux, guy = (ul * Gx).sum(axis=-1), (ul * Gy).sum(axis=-1)
        gvx, gvy = (vl * Gx).sum(axis=-1), (vl * Gy).sum(axis=-1)
        gpx, gpy = (pl * Gx).sum(axis=-1), (pl * Gy).sum(axis=-1)
        uq = ul @ _LAM.T
        vq = vl @ _LAM.T
        div = gux + gvy
        w = (A / 3.0)[:, None]
        Au = A[:, None]
        if self.convection:
            cx = rho * (uq * gux[..., None] + vq * guy[..., None])
            cy = rho * (uq * gvx[..., None] + vq * gvy[..., None])
        else:
            cx = cy = np.zeros_like(uq)
        rx = cx + gpx[..., None] - fx
        ry = cy + gpy[..., None] - fy
        pbar = pl.mean(axis=-1)[..., None]

        Ru = (w * cx) @ _LAM + mu * Au * (gux[..., None] * Gx + guy[..., None] * Gy) - Au * pbar * Gx - fx * w
        Rv = (w * cy) @ _LAM + mu * Au * (gvx[..., None] * Gx + gvy[..., None] * Gy) - Au * pbar * Gy - fy * w
        if self.convection:
            # tau-weighted streamline derivative of each test function at each quad point
            t = tau[..., None, None]
            adv = t * (uq[..., :, None] * Gx[:, None, :] + vq[..., :, None] * Gy[:, None, :])
            Ru = Ru + ((w * rx)[..., :, None] * adv).sum(axis=-2)
            Rv = Rv + ((w * ry)[..., :, None] * adv).sum(axis=-2)
            gd = (rho * delta * A * div)[..., None]
            Ru = Ru + gd * Gx
            Rv = Rv + gd * Gy
        rxs = (w * rx).sum(axis=-1)[..., None]
        rys = (w * ry).sum(axis=-1)[..., None]
        Rp = rho * (A * div / 3.0)[..., None] + tau[..., None] * (Gx * rxs + Gy * rys)
        return np.concatenate([Ru, Rv, Rp], axis=-1)

    # -- global operators --------------------------------------------------

    def residual(self, state, frozen: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
        """Assembled nonlinear residual with Dirichlet rows set to ``x - g``."""
        x = _as_vector(state)
        re = self._element_residual(x[self.ldofs], frozen)
        R = np.bincount(self.ldofs.ravel(), weights=re.ravel(), minlength=3 * self.n)
        R += self.outlet_load
        R[self.dirichlet] = x[self.dirichlet] - self.dirichlet_values
        return R

    def element_jacobians(self, x: np.ndarray, frozen=None) -> np.ndarray:
        # all 9 complex-step directions in one batched kernel call
        pert = np.repeat(x[self.ldofs][None].astype(complex), 9, axis=0)
        k = np.arange(9)
        pert[k, :, k] += 1j * _CSTEP
        return np.moveaxis(self._element_residual(pert, frozen).imag / _CSTEP, 0, 2)

    @cached_property
    def _pattern(self):
        """CSR pattern of the Jacobian (plus the full diagonal) and scatter slots."""
        rows, cols, keep = self._jac_index
        N = 3 * self.n
        diag = np.arange(N)
        key = np.concatenate([rows[keep], diag]) * N + np.concatenate([cols[keep], diag])
        uniq = np.unique(key)
        slot = np.searchsorted(uniq, key[: int(keep.sum())])
        diag_slot = np.searchsorted(uniq, diag * (N + 1))
        indptr = np.searchsorted(uniq // N, np.arange(N + 1)).astype(np.int64)
        indices = (uniq % N).astype(np.int64)
        return indptr, indices, slot, diag_slot

    def _csr(self, data: np.ndarray) -> sp.csr_matrix:
        indptr, indices, _, _ = self._pattern
        N = 3 * self.n
        A = sp.csr_matrix((data, indices.copy(), indptr.copy()), shape=(N, N))
        A.has_sorted_indices = True
        A._ptcnet_pattern = True
        return A

    def jacobian(self, state, frozen=None) -> sp.csr_matrix:
        """Derivative of :meth:`residual`.

        By default tau and delta are linearized too.  Passing ``frozen`` (for
        instance ``self.stabilization(x)``) holds them fixed instead.
        """
        x = _as_vector(state)
        K = self.element_jacobians(x, frozen)
        _, _, keep = self._jac_index
        indptr, _, slot, diag_slot = self._pattern
        data = np.bincount(slot, weights=K.ravel()[keep], minlength=indptr[-1])
        data[diag_slot[self.dirichlet]] += 1.0
        return self._csr(data)

    def lumped_velocity_mass(self, dt: np.ndarray) -> np.ndarray:
        """Diagonal of M(dt) as a length-3N vector (zero on pressure and Dirichlet rows)."""
        dt = np.asarray(dt, dtype=float)
        if dt.shape != (self.mesh.n_elements,):
            raise ValueError("need one pseudo-time step per element")
        if np.any(~(dt > 0)):
            raise ValueError("pseudo-time steps must be positive")
        per_vertex = np.bincount(
            self.mesh.elements.ravel(),
            weights=np.repeat(self.props.rho * self.area / (3.0 * dt), 3),
            minlength=self.n,
        )
        diag = np.concatenate([per_vertex, per_vertex, np.zeros(self.n)])
        diag[self.dirichlet] = 0.0
        return diag

    def ptc_matrix(self, state, dt: np.ndarray, jac: sp.csr_matrix | None = None) -> sp.csr_matrix:
        J = self.jacobian(state) if jac is None else jac
        m = self.lumped_velocity_mass(dt)
        if getattr(J, "_ptcnet_pattern", False):
            data = J.data.copy()
            data[self._pattern[3]] += m
            return self._csr(data)
        return (J + sp.diags(m)).tocsr()

    def strong_residuals(self, state) -> np.ndarray:
        """(E, 3, 3) element-local strong residuals [e, vertex, (r_u, r_v, r_p)]."""
        x = _as_vector(state)
        rho = self.props.rho
        fx, fy = self.props.body_force
        n, el, G = self.n, self.mesh.elements, self.grad
        ul, vl, pl = x[el], x[el + n], x[el + 2 * n]
        gu = np.einsum("ea,eak->ek", ul, G)
        gv = np.einsum("ea,eak->ek", vl, G)
        gp = np.einsum("ea,eak->ek", pl, G)
        out = np.empty((len(el), 3, 3))
        conv = 1.0 if self.convection else 0.0
        out[:, :, 0] = conv * rho * (ul * gu[:, 0, None] + vl * gu[:, 1, None]) + gp[:, 0, None] - fx
        out[:, :, 1] = conv * rho * (ul * gv[:, 0, None] + vl * gv[:, 1, None]) + gp[:, 1, None] - fy
        out[:, :, 2] = (rho * (gu[:, 0] + gv[:, 1]))[:, None]
        return out

    def residual_norm(self, R: np.ndarray) -> float:
        """L2 norm over the domain of the P1 functions with coefficients R (all three fields)."""
        R = np.asarray(R, dtype=float)
        if R.shape != (3 * self.n,):
            raise ValueError("residual length must be 3 * vertex count")
        M, n = self.mass, self.n
        s = sum(float(R[k * n:(k + 1) * n] @ (M @ R[k * n:(k + 1) * n])) for k in range(3))
        return float(np.sqrt(max(s, 0.0)))

    def velocity_norm(self, x: np.ndarray) -> float:
        """L2 norm of the velocity components of the P1 field with coefficients x."""
        M, n = self.mass, self.n
        s = float(x[:n] @ (M @ x[:n]) + x[n:2 * n] @ (M @ x[n:2 * n]))
        return float(np.sqrt(max(s, 0.0)))


def _inlet_profile(mesh: Mesh, inlet: np.ndarray, u_peak: float) -> np.ndarray:
    """Parabolic inflow, peak ``u_peak`` at the segment midpoint, along the inward normal."""
    xy = mesh.vertices[inlet]
    # segment endpoints = the two inlet vertices farthest apart
    d2 = ((xy[:, None] - xy[None]) ** 2).sum(-1)
    i, j = np.unravel_index(np.argmax(d2), d2.shape)
    a, b = xy[i], xy[j]
    t = b - a
    length = np.hypot(*t)
    s = np.clip((xy - a) @ t / length ** 2, 0.0, 1.0)
    # inward normal: opposite to the outward normal of an inlet boundary edge
    k = next(k for k, tag in enumerate(mesh.boundary_tags) if tag == BoundaryTag.INLET)
    e0, e1 = mesh.vertices[mesh.boundary_edges[k]]
    dx, dy = e1 - e0
    inward = -np.array([dy, -dx]) / np.hypot(dx, dy)
    return (4.0 * u_peak * s * (1.0 - s))[:, None] * inward[None]


# ---------------------------------------------------------------------------
# functional interface


def make_problem(mesh: Mesh, props: FluidProps, bc: BoundaryConditions, convection: bool = True) -> Problem:
    return Problem(mesh, props, bc, convection)


def assemble_residual(problem: Problem, state) -> np.ndarray:
    return problem.residual(state)


def assemble_jacobian(problem: Problem, state) -> sp.csr_matrix:
    return problem.jacobian(state)


def assemble_ptc_matrix(problem: Problem, state, dt: np.ndarray) -> sp.csr_matrix:
    return problem.ptc_matrix(state, dt)


def strong_residuals(problem: Problem, state) -> np.ndarray:
    return problem.strong_residuals(state)


def reconstructed_residual_norm(problem: Problem, R: np.ndarray) -> float:
    return problem.residual_norm(R)
