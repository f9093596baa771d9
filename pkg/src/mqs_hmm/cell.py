"""Periodic unit-cell problems that supply the homogenized law at macro points.

A cell carries the periodic correction ``a_c`` of the vector potential, one
constant ``u_c`` per grain that removes the grain's net axial current, and a
Lagrange multiplier fixing the mean of ``a_c`` to zero.  Given the macro flux
density ``b_M`` and the macro electric field, the dynamic cell equations are,
for every periodic test function ``a'`` and grain constant ``u'``::

    (sigma (d_t a_c + u_c - e_src), a') + (H(b_M + curl a_c), curl a') = 0
    (sigma (d_t a_c + u_c - e_src), u') = 0

with ``e_src(y) = e_Mz + kappa (d_t b_M x y)_z`` and ``curl = 1_z x grad``.
Implicit Euler replaces ``d_t a_c`` by ``(a_c - a_c_prev) / dt``.  The static
problem drops every conductivity term and the grain constants.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp

from . import fem
from .errors import CellError, MaterialError, SolverError
from .materials import MaterialField
from .mesh import GRAIN_BASE, TriMesh

Array = npt.NDArray[np.float64]

TANGENT_MODES = ("consistent", "frozen")


@dataclasses.dataclass(frozen=True)
class CellSources:
    """Macro quantities imposed on one cell.

    ``dt`` is ``None`` for the static problem.  ``db_dt`` and ``e_Mz`` are
    backward differences over ``dt``.
    """

    b_M: Array
    db_dt: Array = dataclasses.field(default_factory=lambda: np.zeros(2))
    e_Mz: float = 0.0
    dt: float | None = None
    kappa: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "b_M", np.asarray(self.b_M, dtype=np.float64).reshape(2))
        object.__setattr__(self, "db_dt", np.asarray(self.db_dt, dtype=np.float64).reshape(2))
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def dynamic(self) -> bool:
        return self.dt is not None

    def e_src(self, y: Array) -> Array:
        """Source electric field at cell points ``y`` (any leading shape, last axis 2)."""
        cross = self.db_dt[0] * y[..., 1] - self.db_dt[1] * y[..., 0]
        return self.e_Mz + self.kappa * cross

    def perturbed(self, direction: int, delta: float, mode: str = "consistent") -> "CellSources":
        """Sources with ``b_M`` moved by ``delta`` along ``direction``.

        In ``consistent`` mode the previous macro flux density is held fixed, so
        the backward difference ``db_dt`` moves by ``delta / dt`` as well; in
        ``frozen`` mode the perturbation is treated as constant in time.
        """
        e = np.zeros(2)
        e[direction] = delta
        db = self.db_dt
        if self.dynamic and mode == "consistent":
            db = db + e / self.dt
        return dataclasses.replace(self, b_M=self.b_M + e, db_dt=db)


def downscale(b_M: Array, b_M_prev: Array, a_M: Array, a_M_prev: Array,
              dt: float | None, kappa: float = 1.0) -> list[CellSources]:
    """Cell sources for a batch of macro points by backward differences.

    ``b_M`` has shape ``(n, 2)``; ``a_M`` holds the macro potential at the
    points, ``e_Mz = -(a_M - a_M_prev) / dt``.
    """
    b_M = np.asarray(b_M, dtype=np.float64)
    if dt is None:
        return [CellSources(b) for b in b_M]
    db = (b_M - np.asarray(b_M_prev)) / dt
    e = -(np.asarray(a_M) - np.asarray(a_M_prev)) / dt
    return [CellSources(b_M[i], db[i], float(e[i]), dt, kappa) for i in range(len(b_M))]


@dataclasses.dataclass
class CellSolution:
    """Converged cell unknowns with the upscaled quantities."""

    x: Array
    h_M: Array
    loss_density: float
    trial_state: object
    iterations: int
    residuals: list[float]
    b_mean: Array
    net_currents: Array
    factor: BorderedSolver | None = None


@dataclasses.dataclass
class UpscaledLaw:
    h_M: Array
    tangent: Array
    loss_density: float


class CellTemplate:
    """Mesh-dependent data shared by every cell problem on the same cell mesh."""

    def __init__(self, mesh: TriMesh, material: MaterialField, dynamic: bool = True,
                 tol: float = 1e-8, max_iter: int = 30):
        if mesh.period is None or not len(mesh.periodic):
            raise CellError("cell mesh has no periodic pairing")
        self.mesh = mesh
        self.material = material
        self.dynamic = dynamic
        self.tol = tol
        self.max_iter = max_iter
        self.geo = fem.ElementGeometry.of(mesh)
        self.volume = float(self.geo.area.sum())
        self.grains = mesh.grain_ids() if dynamic else []
        ng = len(self.grains)
        self.dofs = fem.DofMap.for_mesh(mesh, n_extra=ng + 1, periodic=True)
        d = self.dofs
        self.na = d.n_node_dofs
        self.n = d.n_dofs
        self.i_lambda = self.n - 1
        self.tri_dofs = d.node_dof[mesh.triangles]
        self.qp = fem.quad_points(mesh)
        self.sigma = material.sigma
        self.grain_of_tri = np.full(mesh.n_triangles, -1, dtype=np.int64)
        for k, g in enumerate(self.grains):
            self.grain_of_tri[mesh.region == g] = k
        in_grain = self.grain_of_tri >= 0

        # zero-mean row, scaled to the magnitude of vacuum stiffness entries
        lumped = fem.assemble_vector(mesh, d, np.repeat(self.geo.area[:, None] / 3, 3, axis=1))
        self.mean_weights = lumped[: self.na] / self.volume
        scale = 1.0 / (4e-7 * np.pi) * self.na
        self.w = self.mean_weights * scale

        self.mass_el = fem.mass_matrices(self.geo, self.sigma)
        # g[i, k] = integral over grain k of sigma phi_i
        g_el = (self.sigma * self.geo.area / 3)[:, None] * np.ones(3)
        self.g_rows = self.tri_dofs[in_grain].ravel()
        self.g_cols = np.repeat(self.grain_of_tri[in_grain], 3)
        self.g_vals = g_el[in_grain].ravel()
        self.G = sp.csr_matrix((self.g_vals, (self.g_rows, self.g_cols)), shape=(self.na, max(ng, 1)))
        self.grain_sigma_area = np.array([
            float((self.sigma * self.geo.area)[self.grain_of_tri == k].sum()) for k in range(ng)
        ])

        rows, cols = fem.element_pattern(mesh, d)
        extra_r = [np.arange(self.na), np.full(self.na, self.i_lambda), [self.i_lambda]]
        extra_c = [np.full(self.na, self.i_lambda), np.arange(self.na), [self.i_lambda]]
        if ng:
            gu = self.na + self.g_cols
            extra_r += [self.g_rows, gu, self.na + np.arange(ng)]
            extra_c += [gu, self.g_rows, self.na + np.arange(ng)]
        self.pattern = fem.SparsePattern(
            np.concatenate([rows.ravel(), *extra_r]), np.concatenate([cols.ravel(), *extra_c]), self.n
        )
        # slots of the pinned-node form used by the linear solver (see BorderedSolver)
        p = self.pattern
        slot_row = np.repeat(np.arange(self.n), np.diff(p.indptr))
        slot_col = p.indices
        self.pin = 0
        special = (slot_row == self.pin) | (slot_col == self.pin) | \
            (slot_row == self.i_lambda) | (slot_col == self.i_lambda)
        diag = (slot_row == slot_col) & ((slot_row == self.pin) | (slot_row == self.i_lambda))
        self.pin_zero = np.flatnonzero(special & ~diag)
        self.pin_diag = np.flatnonzero(diag)
        self.shift = np.zeros(self.n)
        self.shift[: self.na] = 1.0

    def initial_x(self) -> Array:
        return np.zeros(self.n)

    def nodal(self, x: Array) -> Array:
        return self.dofs.expand(x[: self.na])

    def flux(self, x: Array, b_M: Array) -> Array:
        return b_M + fem.flux_density(self.mesh, self.geo, self.nodal(x))

    # -- residual and Jacobian -------------------------------------------------

    def _source_terms(self, src: CellSources):
        e_q = src.e_src(self.qp)
        f_el = fem.load_vectors(self.mesh, self.geo, self.sigma[:, None] * e_q)
        f = fem.assemble_vector(self.mesh, self.dofs, f_el, n=self.na)[: self.na]
        # per-grain integral of sigma e_src (exact: e_src is linear)
        w_el = self.sigma * self.geo.area * e_q.mean(axis=1)
        fk = np.array([float(w_el[self.grain_of_tri == k].sum()) for k in range(len(self.grains))])
        return f, fk

    def evaluate(self, x: Array, x_prev: Array, src: CellSources, state, sources=None,
                 need_jacobian: bool = True):
        """Residual, Jacobian, per-triangle field and trial state at ``x``."""
        b = self.flux(x, src.b_M)
        h, t, trial = self.material.evaluate(b, state)
        a = x[: self.na]
        lam = x[self.i_lambda]
        r = np.zeros(self.n)
        r[: self.na] = fem.assemble_vector(self.mesh, self.dofs, fem.curl_vectors(self.geo, h),
                                           n=self.na)[: self.na]
        r[: self.na] += lam * self.w
        r[self.i_lambda] = self.w @ a
        values = [fem.curl_matrices(self.geo, t).ravel() if need_jacobian else None]
        ng = len(self.grains)
        if src.dynamic:
            dt = src.dt
            f, fk = sources if sources is not None else self._source_terms(src)
            u = x[self.na: self.na + ng]
            da = self.nodal(x) - self.nodal(x_prev)
            m_el = (self.mass_el @ da[self.mesh.triangles][:, :, None])[..., 0] / dt
            r[: self.na] += fem.assemble_vector(self.mesh, self.dofs, m_el, n=self.na)[: self.na]
            r[: self.na] += self.G[:, :ng] @ u - f
            ru = (self.G[:, :ng].T @ (a - x_prev[: self.na])) / dt + self.grain_sigma_area * u - fk
            r[self.na: self.na + ng] = ru
            if need_jacobian:
                values[0] = values[0] + (self.mass_el / dt).ravel()
        if not need_jacobian:
            return r, None, h, trial
        extra = [self.w, self.w, [0.0]]
        if ng:
            extra += [self.g_vals, self.g_vals / src.dt, self.grain_sigma_area]
        J = self.pattern.matrix(np.concatenate([values[0], *extra]))
        return r, J, h, trial

    def upscale(self, x: Array, x_prev: Array, src: CellSources, h: Array):
        """Average field, loss density, mean flux density and net grain currents."""
        h_M = (self.geo.area[:, None] * h).sum(axis=0) / self.volume
        b_mean = (self.geo.area[:, None] * self.flux(x, src.b_M)).sum(axis=0) / self.volume
        ng = len(self.grains)
        if not src.dynamic or ng == 0:
            return h_M, 0.0, b_mean, np.zeros(ng)
        e = self.field_error_at_points(x, x_prev, src)
        loss = float(np.einsum("t,tq->", self.sigma * self.geo.area / 3, e**2)) / self.volume
        cur = self.sigma * self.geo.area * e.mean(axis=1)
        net = np.array([float(cur[self.grain_of_tri == k].sum()) for k in range(ng)])
        return h_M, loss, b_mean, net

    def field_error_at_points(self, x: Array, x_prev: Array, src: CellSources) -> Array:
        """``d_t a_c + u_c - e_src`` at the quadrature points (zero outside grains)."""
        ng = len(self.grains)
        da = (self.nodal(x) - self.nodal(x_prev)) / src.dt
        dq = da[self.mesh.triangles] @ fem.TRI3.points.T
        u = np.append(x[self.na: self.na + ng], 0.0)[self.grain_of_tri]
        e = dq + u[:, None] - src.e_src(self.qp)
        return np.where(self.grain_of_tri[:, None] >= 0, e, 0.0)

    def current_density(self, x: Array, x_prev: Array, src: CellSources) -> Array:
        """Per-triangle axial current density ``-sigma (d_t a_c + u_c - e_src)`` at centroids."""
        if not src.dynamic:
            return np.zeros(self.mesh.n_triangles)
        return -self.sigma * self.field_error_at_points(x, x_prev, src).mean(axis=1)

    # -- Newton ----------------------------------------------------------------

    def solve(self, src: CellSources, x_prev: Array, state, x0: Array | None = None,
              factor: BorderedSolver | None = None, keep_factor: bool = False) -> CellSolution:
        """Newton solve of one implicit-Euler step.

        With ``factor`` given the iteration is a chord method on that
        factorization (used for the perturbed solves), otherwise a full Newton
        iteration.  Convergence is declared when the residual norm falls below
        ``tol`` times the residual at the starting point.
        """
        if src.dynamic != self.dynamic:
            raise CellError("cell template and sources disagree on static/dynamic mode")
        x = (x_prev if x0 is None else x0).copy()
        sources = self._source_terms(src) if src.dynamic else None
        chord = factor is not None
        max_iter = self.max_iter * (3 if chord else 1)
        try:
            r, J, h, trial = self.evaluate(x, x_prev, src, state, sources, need_jacobian=not chord)
        except MaterialError as exc:
            raise CellError(f"material evaluation failed: {exc}") from exc
        r0 = float(np.linalg.norm(r))
        history = [r0]
        floor = 1e-15 * self._force_scale(src, h)
        it = 0
        rises = 0
        relax = 1.0
        while history[-1] > max(self.tol * r0, floor):
            if it >= max_iter:
                raise CellError(
                    f"cell Newton did not converge in {max_iter} iterations "
                    f"(relative residual {history[-1] / r0:.3e})", history)
            it += 1
            try:
                if not chord:
                    factor = BorderedSolver(self, J, src.dt)
                dx = factor.solve_update(r, x)
            except SolverError as exc:
                raise CellError(f"cell linear solve failed: {exc}", history) from exc
            x = x + relax * dx
            try:
                r, J, h, trial = self.evaluate(x, x_prev, src, state, sources, need_jacobian=not chord)
            except MaterialError as exc:
                raise CellError(f"material evaluation failed: {exc}", history) from exc
            norm = float(np.linalg.norm(r))
            rises = rises + 1 if norm > history[-1] else 0
            if rises >= 2:
                relax = 0.5
            history.append(norm)
        h_M, loss, b_mean, net = self.upscale(x, x_prev, src, h)
        if keep_factor and factor is None:
            factor = BorderedSolver(self, J, src.dt)
        return CellSolution(x, h_M, loss, trial, it, history, b_mean, net,
                            factor if keep_factor else None)

    def _force_scale(self, src: CellSources, h: Array) -> float:
        el = np.abs(fem.curl_vectors(self.geo, h)).sum()
        return float(el) + 1e-300


class BorderedSolver:
    """Linear solver for the cell Jacobian bordered by the zero-mean multiplier.

    Without the multiplier the Jacobian is singular along one direction: a
    uniform shift ``c`` of ``a_c`` together with ``-c / dt`` on every grain
    constant leaves the residual unchanged, and the residual is always
    orthogonal to the matching left null vector.  The bordered system is
    therefore solved exactly by pinning one node, solving the sparse remainder,
    and adding the multiple of the null direction that restores zero mean.
    The multiplier itself stays zero.  This avoids the fill-in that the dense
    multiplier row causes in a direct factorization.
    """

    def __init__(self, template: CellTemplate, J: sp.csr_matrix, dt: float | None):
        tp = template
        data = J.data.copy()
        data[tp.pin_zero] = 0.0
        data[tp.pin_diag] = 1.0
        A = sp.csr_matrix((data, J.indices, J.indptr), shape=J.shape)
        A.eliminate_zeros()
        self.factor = fem.Factorization(A, ordering="MMD_AT_PLUS_A")
        self.tp = tp
        self.null = tp.shift.copy()
        if dt is not None:
            ng = len(tp.grains)
            self.null[tp.na: tp.na + ng] = -1.0 / dt

    def solve_update(self, r: Array, x: Array) -> Array:
        """Newton update ``dx`` for residual ``r`` at iterate ``x``."""
        tp = self.tp
        rhs = -r
        rhs[tp.pin] = 0.0
        rhs[tp.i_lambda] = 0.0
        dx = self.factor.solve(rhs)
        c = -float(tp.w @ (x[: tp.na] + dx[: tp.na])) / float(tp.w.sum())
        dx += c * self.null
        dx[tp.i_lambda] = -x[tp.i_lambda]
        return dx


class CellProblem:
    """One cell bound to a macro point: committed unknowns and material history."""

    def __init__(self, template: CellTemplate, ident: int = 0):
        self.template = template
        self.ident = ident
        self.x = template.initial_x()
        self.x_prev = self.x.copy()
        self.state = template.material.initial_state()
        self.last: CellSolution | None = None
        self.last_sources: CellSources | None = None
        self.total_iterations = 0
        self.solves = 0

    def solve_cell_step(self, src: CellSources, keep_factor: bool = False) -> CellSolution:
        sol = self.template.solve(src, self.x, self.state, keep_factor=keep_factor)
        self.total_iterations += sol.iterations
        self.solves += 1
        self.last = sol
        self.last_sources = src
        return sol

    def upscale_tangent(self, src: CellSources, base: CellSolution, delta_b: float = 1e-4,
                        mode: str = "consistent", reuse_factor: bool = True,
                        central: bool = False) -> Array:
        """Finite-difference tangent ``T[i, j] = d h_M,i / d b_M,j`` from perturbed cell solves.

        Perturbed solves start from the base solution, use copies of the
        committed history and are never committed.  ``central`` switches to
        the two-sided formula (twice as many solves), used as a test oracle.
        """
        if mode not in TANGENT_MODES:
            raise ValueError(f"tangent mode must be one of {TANGENT_MODES}")
        delta = max(delta_b, delta_b * float(np.linalg.norm(src.b_M)))
        factor = base.factor if reuse_factor else None
        T = np.empty((2, 2))
        for j in range(2):
            hp = self._perturbed(src.perturbed(j, delta, mode), base, factor)
            if central:
                hm = self._perturbed(src.perturbed(j, -delta, mode), base, factor)
                T[:, j] = (hp - hm) / (2 * delta)
            else:
                T[:, j] = (hp - base.h_M) / delta
        return T

    def _perturbed(self, src: CellSources, base: CellSolution, factor) -> Array:
        sol = self.template.solve(src, self.x, self.state, x0=base.x, factor=factor)
        self.total_iterations += sol.iterations
        self.solves += 1
        return sol.h_M

    def solve_with_tangent(self, src: CellSources, delta_b: float = 1e-4,
                           mode: str = "consistent") -> UpscaledLaw:
        base = self.solve_cell_step(src, keep_factor=True)
        T = self.upscale_tangent(src, base, delta_b, mode)
        base.factor = None
        return UpscaledLaw(base.h_M, T, base.loss_density)

    def commit(self) -> None:
        """Advance the history to the last unperturbed solve."""
        if self.last is None:
            raise CellError("nothing to commit")
        self.x_prev = self.x
        self.x = self.last.x.copy()
        if self.last.trial_state is not None:
            self.state = self.last.trial_state


def homogenize_conductivity(mesh: TriMesh, sigma_grain: float = 5e6,
                            regularization: float = 1e-9) -> Array:
    """Homogenized conductivity tensor ``diag(s_xx, s_yy)`` and ``s_zz``.

    ``s_zz`` for axial currents is the area average of sigma.  The in-plane
    components solve the periodic electrokinetic cell problem; the insulating
    matrix is given ``regularization * sigma_grain`` so the problem stays
    well-posed, which leaves values of that order for disconnected grains.
    Returns ``[s_xx, s_yy, s_zz]``.
    """
    geo = fem.ElementGeometry.of(mesh)
    vol = float(geo.area.sum())
    sig = np.where(mesh.region >= GRAIN_BASE, sigma_grain, 0.0)
    s_zz = float((sig * geo.area).sum()) / vol
    if s_zz == 0.0:
        return np.zeros(3)
    s_eff = np.maximum(sig, regularization * sigma_grain)
    dofs = fem.DofMap.for_mesh(mesh, periodic=True)
    # gradient form: grad phi = rotate(curl phi) so the curl matrices serve directly
    K_el = geo.area[:, None, None] * s_eff[:, None, None] * np.einsum("tia,tja->tij", geo.grad, geo.grad)
    K = fem.assemble_matrix(mesh, dofs, K_el)
    lumped = fem.assemble_vector(mesh, dofs, np.repeat(geo.area[:, None] / 3, 3, axis=1))
    out = np.empty(3)
    for d in range(2):
        E = np.zeros(2)
        E[d] = 1.0
        f_el = -geo.area[:, None] * s_eff[:, None] * (geo.grad @ E)
        f = fem.assemble_vector(mesh, dofs, f_el)
        A = sp.bmat([[K, lumped[:, None]], [lumped[None, :], None]], format="csr")
        phi = fem.sparse_solve(A, np.append(f, 0.0))[:-1]
        grad = np.einsum("ti,tia->ta", dofs.expand(phi)[mesh.triangles], geo.grad) + E
        out[d] = float((geo.area * s_eff * grad[:, d]).sum()) / vol
    out[2] = s_zz
    return out
