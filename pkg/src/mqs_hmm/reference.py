"""Fullscale solver with every grain meshed, used as the reference for the two-scale model.

The unknowns are the nodal potential and, optionally, one constant ``u_k`` per
grain.  With the constants the grain current density is
``-sigma (d_t a + u_k)`` and each constant enforces zero net current in its
grain, matching the electrically isolated grains of a 2D extrusion.
"""

from __future__ import annotations

import logging

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp

from . import fem
from .errors import MaterialError, MqsError, SolverError
from .materials import MaterialField
from .mesh import TriMesh
from .problem import (
    RunResult,
    SolverOptions,
    SourceWaveform,
    StepDiagnostics,
    TimeGrid,
    apply_boundary_conditions,
    symmetry_factor,
)

Array = npt.NDArray[np.float64]

log = logging.getLogger(__name__)


class ReferenceModel:
    def __init__(self, mesh: TriMesh, grain_law, waveform: SourceWaveform, sigma: float = 5e6,
                 options: SolverOptions | None = None, dynamic: bool = True):
        self.options = options or SolverOptions()
        self.mesh = mesh
        self.waveform = waveform
        self.dynamic = dynamic
        self.material = MaterialField(mesh.region, grain_law, sigma)
        self.sigma = self.material.sigma
        self.grains = mesh.grain_ids() if (dynamic and self.options.grain_constants) else []
        ng = len(self.grains)
        self.dofs = apply_boundary_conditions(mesh, n_extra=ng)
        self.na = self.dofs.n_node_dofs
        self.geo = fem.ElementGeometry.of(mesh)
        self.grain_of_tri = np.full(mesh.n_triangles, -1, dtype=np.int64)
        for k, g in enumerate(self.grains):
            self.grain_of_tri[mesh.region == g] = k
        in_grain = self.grain_of_tri >= 0
        self.mass_el = fem.mass_matrices(self.geo, self.sigma)
        tri_dofs = self.dofs.node_dof[mesh.triangles]
        g_el = np.repeat((self.sigma * self.geo.area / 3)[:, None], 3, axis=1)
        self.g_rows = tri_dofs[in_grain].ravel()
        self.g_cols = np.repeat(self.grain_of_tri[in_grain], 3)
        self.g_vals = g_el[in_grain].ravel()
        keep = self.g_rows >= 0
        self.g_rows, self.g_cols, self.g_vals = self.g_rows[keep], self.g_cols[keep], self.g_vals[keep]
        self.G = sp.csr_matrix((self.g_vals, (self.g_rows, self.g_cols)), shape=(self.na, max(ng, 1)))
        self.grain_sigma_area = np.array(
            [float((self.sigma * self.geo.area)[self.grain_of_tri == k].sum()) for k in range(ng)])
        self.grain_area = np.array([float(self.geo.area[self.grain_of_tri == k].sum()) for k in range(ng)])
        rows, cols = fem.element_pattern(mesh, self.dofs)
        r = [rows.ravel()]
        c = [cols.ravel()]
        if ng:
            gu = self.na + self.g_cols
            r += [self.g_rows, gu, self.na + np.arange(ng)]
            c += [gu, self.g_rows, self.na + np.arange(ng)]
        self.pattern = fem.SparsePattern(np.concatenate(r), np.concatenate(c), self.dofs.n_dofs)
        self.x = np.zeros(self.dofs.n_dofs)
        self.state = self.material.initial_state()
        self._check_resolution()

    def _check_resolution(self) -> None:
        if not self.grains:
            return
        g = self.grain_of_tri == 0
        p = self.mesh.nodes[self.mesh.triangles[g]].reshape(-1, 2)
        side = float(p[:, 0].max() - p[:, 0].min())
        h = float(np.sqrt(2 * self.geo.area[g].max()))
        if side / h < 6:
            log.warning("reference mesh has fewer than 6 elements across a grain (%.1f)", side / h)

    def skin_depth_check(self, mu_r: float) -> bool:
        """True when the mesh has at least two elements per skin depth at the run frequency."""
        from .materials import MU0

        delta = np.sqrt(2 / (2 * np.pi * self.waveform.frequency * MU0 * mu_r * self.sigma.max()))
        h = float(np.sqrt(2 * self.geo.area[self.grain_of_tri >= 0].max()))
        ok = delta / h >= 2
        if not ok:
            log.warning("reference mesh resolves the skin depth with fewer than 2 elements")
        return bool(ok)

    def nodal(self, x: Array) -> Array:
        return self.dofs.expand(x[: self.na])

    def evaluate(self, x: Array, x_prev: Array, js: Array, dt: float | None, need_jacobian=True):
        a = self.nodal(x)
        b = fem.flux_density(self.mesh, self.geo, a)
        h, t, trial = self.material.evaluate(b, self.state)
        cv = fem.curl_vectors(self.geo, h)
        F_el = (js * self.geo.area / 3)[:, None] * np.ones(3)
        R = fem.assemble_vector(self.mesh, self.dofs, cv - F_el)
        vals = fem.curl_matrices(self.geo, t) if need_jacobian else None
        ng = len(self.grains)
        if dt is not None:
            da = a - self.nodal(x_prev)
            R += fem.assemble_vector(self.mesh, self.dofs,
                                     (self.mass_el @ da[self.mesh.triangles][:, :, None])[..., 0] / dt)
            if ng:
                u = x[self.na:]
                R[: self.na] += self.G[:, :ng] @ u
                R[self.na:] = (self.G[:, :ng].T @ (x[: self.na] - x_prev[: self.na])) / dt \
                    + self.grain_sigma_area * u
            if need_jacobian:
                vals = vals + self.mass_el / dt
        scale = float(np.abs(cv).sum() + np.abs(F_el).sum())
        if not need_jacobian:
            return R, None, b, trial, scale
        extra = [self.g_vals, self.g_vals / dt, self.grain_sigma_area] if (ng and dt is not None) else []
        J = self.pattern.matrix(np.concatenate([vals.ravel(), *extra]))
        return R, J, b, trial, scale

    def solve_step(self, t: float, dt: float | None, scale: float | None = None):
        opt = self.options
        js = self.waveform.density(self.mesh.region, t, scale)
        x_prev = self.x
        x = x_prev.copy()
        diag = StepDiagnostics(0, t, 0, [])
        floor = None
        rises = 0
        relax = 1.0
        for it in range(opt.max_nr_macro + 1):
            try:
                R, J, b, trial, sc = self.evaluate(x, x_prev, js, dt)
            except MaterialError as exc:
                raise SolverError(f"material evaluation failed at t={t!r}: {exc}", diag.residuals) from exc
            norm = float(np.linalg.norm(R))
            if diag.residuals:
                rises = rises + 1 if norm > diag.residuals[-1] else 0
                if rises >= 2:
                    relax = 0.5
            diag.residuals.append(norm)
            if floor is None:
                floor = max(opt.tol_macro * norm, 1e-14 * sc)
            if norm <= floor:
                break
            if it == opt.max_nr_macro:
                raise SolverError(f"reference Newton did not converge at t={t!r}", diag.residuals)
            x = x + relax * fem.sparse_solve(J, -R)
            diag.nr_iters += 1
        diag.nr_iters = max(1, diag.nr_iters)
        return x, b, trial, diag

    def commit(self, x: Array, trial) -> None:
        self.x = x
        if trial is not None:
            self.state = trial

    def field_error(self, x: Array, x_prev: Array, dt: float) -> Array:
        """``d_t a + u_k`` at the quadrature points of every triangle (zero outside conductors)."""
        da = (self.nodal(x) - self.nodal(x_prev)) / dt
        dq = da[self.mesh.triangles] @ fem.TRI3.points.T
        u = np.append(x[self.na:], 0.0)[self.grain_of_tri] if self.grains else 0.0
        e = dq + np.reshape(u, (-1, 1))
        return np.where(self.sigma[:, None] > 0, e, 0.0)

    def losses(self, x: Array, x_prev: Array, dt: float) -> float:
        e = self.field_error(x, x_prev, dt)
        p = float(np.einsum("t,tq->", self.sigma * self.geo.area / 3, e**2))
        return symmetry_factor(self.mesh) * p

    def current_density(self, x: Array, x_prev: Array, dt: float, js: Array) -> Array:
        return js - self.sigma * self.field_error(x, x_prev, dt).mean(axis=1)

    def net_currents(self, x: Array, x_prev: Array, dt: float) -> Array:
        cur = self.sigma * self.geo.area * self.field_error(x, x_prev, dt).mean(axis=1)
        return np.array([float(cur[self.grain_of_tri == k].sum()) for k in range(len(self.grains))])


def run_reference(model: ReferenceModel, grid: TimeGrid, probes: dict | None = None,
                  record_fields: bool = True, on_step=None) -> RunResult:
    if not model.dynamic:
        raise MqsError("run_reference needs a dynamic model")
    probe_tris = {n: model.mesh.find_triangle(p) for n, p in (probes or {}).items()}
    times = grid.times
    losses = [0.0]
    nt = model.mesh.n_triangles
    bs = [np.zeros((nt, 2))]
    jz = [np.zeros(nt)]
    a_hist = [model.nodal(model.x)]
    series = {n: [np.zeros(2)] for n in probe_tris}
    diags = []
    max_net = 0.0
    for k in range(1, grid.n_steps + 1):
        t = float(times[k])
        x_prev = model.x
        try:
            x, b, trial, diag = model.solve_step(t, grid.dt)
            model.commit(x, trial)
            p = model.losses(x, x_prev, grid.dt)
            j = model.current_density(x, x_prev, grid.dt, model.waveform.density(model.mesh.region, t))
            net, rms = model.net_currents(x, x_prev, grid.dt), float(np.sqrt(np.mean(j[model.sigma > 0] ** 2)))
        except SolverError as exc:
            if not model.options.halving:
                raise
            log.warning("reference step %d failed (%s); retrying with two half steps", k, exc)
            half = grid.dt / 2
            x1, _, tr1, d1 = model.solve_step(t - half, half)
            model.commit(x1, tr1)
            x, b, trial, diag = model.solve_step(t, half)
            model.commit(x, trial)
            p = model.losses(x, x1, half)
            j = model.current_density(x, x1, half, model.waveform.density(model.mesh.region, t))
            net, rms = model.net_currents(x, x1, half), float(np.sqrt(np.mean(j[model.sigma > 0] ** 2)))
            diag.residuals = d1.residuals + diag.residuals
            diag.nr_iters += d1.nr_iters
            diag.halved = True
        if len(net) and rms > 0:
            max_net = max(max_net, float(np.abs(net / model.grain_area).max()) / rms)
        diag.step = k
        diags.append(diag)
        losses.append(p)
        a_hist.append(model.nodal(x))
        if record_fields:
            bs.append(b.copy())
            jz.append(j)
        for n, tri in probe_tris.items():
            series[n].append(b[tri].copy())
        if on_step is not None:
            on_step(diag)
    res = RunResult("reference", model.mesh, times, np.array(losses), bs if record_fields else [],
                    jz if record_fields else [], {n: np.array(v) for n, v in series.items()}, diags, a_hist)
    res.extra["max_relative_net_current"] = max_net
    res.extra["n_grains"] = len(model.mesh.grain_ids())
    return res


def run_reference_static(model: ReferenceModel, scale: float = 1.0) -> RunResult:
    if model.dynamic:
        raise MqsError("run_reference_static needs a static model")
    x, b, trial, diag = model.solve_step(0.0, None, scale)
    model.commit(x, trial)
    diag.step = 1
    js = model.waveform.density(model.mesh.region, 0.0, scale)
    return RunResult("reference-static", model.mesh, np.array([0.0]), np.array([0.0]), [b], [js], {},
                     [diag], [model.nodal(x)])


def probe_field(run: RunResult, point, times=None) -> Array:
    """``|b|`` series at the triangle containing ``point`` (optionally at selected step indices)."""
    tri = run.mesh.find_triangle(point)
    series = np.array([np.linalg.norm(b[tri]) for b in run.b])
    return series if times is None else series[np.asarray(times)]
