"""Monolithic two-scale solver: macro Newton iterations that query cell problems.

Every macro triangle inside the composite block owns one cell problem.  For P1
elements the macro flux density is constant on a triangle, so several macro
quadrature points would receive identical flux densities and, after the grain
constants absorb the uniform part of the macro electric field, identical cell
responses; one cell per triangle is therefore exact.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import numpy.typing as npt

from . import fem
from .cell import CellProblem, CellSolution, CellSources, CellTemplate, downscale, homogenize_conductivity
from .errors import CellError, MqsError, SolverError
from .materials import NU0, MaterialField
from .mesh import SMC, TriMesh
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


class MultiscaleModel:
    """Macro mesh, cell registry and committed macro state of one two-scale run."""

    def __init__(self, macro_mesh: TriMesh, cell_mesh: TriMesh, grain_law, waveform: SourceWaveform,
                 sigma: float = 5e6, options: SolverOptions | None = None, dynamic: bool = True):
        self.options = options or SolverOptions()
        opt = self.options
        if opt.tangent_mode not in ("consistent", "frozen"):
            raise MqsError(f"unknown tangent mode {opt.tangent_mode!r}")
        if opt.macro_sigma_mode not in ("zero", "computed"):
            raise MqsError(f"unknown macro_sigma_mode {opt.macro_sigma_mode!r}")
        self.mesh = macro_mesh
        self.waveform = waveform
        self.dynamic = dynamic
        self.dofs = apply_boundary_conditions(macro_mesh)
        self.geo = fem.ElementGeometry.of(macro_mesh)
        self.smc = np.flatnonzero(macro_mesh.region == SMC)
        material = MaterialField(cell_mesh.region, grain_law, sigma)
        self.template = CellTemplate(cell_mesh, material, dynamic, opt.tol_cell, opt.max_nr_cell)
        self.cells = [CellProblem(self.template, int(i)) for i in self.smc]
        self.sigma_hom = homogenize_conductivity(cell_mesh, sigma)
        s_zz = self.sigma_hom[2] if opt.macro_sigma_mode == "computed" else 0.0
        self.sigma_M = np.where(macro_mesh.region == SMC, s_zz, 0.0)
        self.mass_el = fem.mass_matrices(self.geo, self.sigma_M)
        rows, cols = fem.element_pattern(macro_mesh, self.dofs)
        self.pattern = fem.SparsePattern(rows, cols, self.dofs.n_dofs)
        self.a = np.zeros(macro_mesh.n_nodes)
        self.b = np.zeros((macro_mesh.n_triangles, 2))
        self.cell_solves = 0
        self.tangent_fallbacks = 0
        self._pool = ThreadPoolExecutor(opt.threads) if opt.threads > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # -- cell batches ------------------------------------------------------

    def _map(self, fn, items):
        if self._pool is None:
            return [fn(it) for it in items]
        return list(self._pool.map(fn, items))

    def _solve_cells(self, sources: list[CellSources]) -> list[CellSolution]:
        return self._map(lambda cs: cs[0].solve_cell_step(cs[1], keep_factor=True),
                         list(zip(self.cells, sources)))

    def _tangents(self, sources, bases) -> tuple[list[Array], int]:
        opt = self.options

        def one(item):
            cell, src, base = item
            try:
                return cell.upscale_tangent(src, base, opt.delta_b, opt.tangent_mode), 0
            except CellError:
                return self._material_tangent(src, base), 1

        out = self._map(one, list(zip(self.cells, sources, bases)))
        return [o[0] for o in out], sum(o[1] for o in out)

    def _material_tangent(self, src: CellSources, base: CellSolution) -> Array:
        tp = self.template
        _, t, _ = tp.material.evaluate(tp.flux(base.x, src.b_M), self.cells[0].state)
        return (tp.geo.area[:, None, None] * t).sum(axis=0) / tp.volume

    # -- macro Newton --------------------------------------------------------

    def _centroid_values(self, a_nodal: Array) -> Array:
        return a_nodal[self.mesh.triangles[self.smc]].mean(axis=1)

    def solve_step(self, t: float, dt: float | None, scale: float | None = None):
        """Newton iterations of one implicit-Euler step (or the static solve when ``dt`` is None).

        Returns ``(a_nodal, b, cell solutions, diagnostics)`` without committing.
        """
        opt = self.options
        js = self.waveform.density(self.mesh.region, t, scale)
        F = fem.assemble_vector(self.mesh, self.dofs, (js * self.geo.area / 3)[:, None] * np.ones(3))
        a_prev = self.a
        x_prev = a_prev[self.dofs.free_nodes]
        x = np.zeros(self.dofs.n_dofs)
        x[self.dofs.node_dof[self.dofs.free_nodes]] = x_prev
        x_prev = x.copy()
        ac_prev = self._centroid_values(a_prev)
        diag = StepDiagnostics(0, t, 0, [])
        floor = None
        for it in range(opt.max_nr_macro + 1):
            a_nod = self.dofs.expand(x)
            b = fem.flux_density(self.mesh, self.geo, a_nod)
            srcs = downscale(b[self.smc], self.b[self.smc], self._centroid_values(a_nod), ac_prev, dt)
            try:
                sols = self._solve_cells(srcs)
            except CellError as exc:
                diag.cell_failures += 1
                raise SolverError(f"cell solve failed at t={t!r}: {exc}", diag.residuals) from exc
            self.cell_solves += len(sols)
            diag.base_cell_solves += len(sols)
            diag.max_cell_iters = max(diag.max_cell_iters, max((s.iterations for s in sols), default=0))
            diag.max_cell_residual = max(
                diag.max_cell_residual,
                max((s.residuals[-1] / s.residuals[0] for s in sols if s.residuals[0] > 0), default=0.0))
            h = NU0 * b
            h[self.smc] = np.array([s.h_M for s in sols]).reshape(-1, 2)
            cv = fem.curl_vectors(self.geo, h)
            R = fem.assemble_vector(self.mesh, self.dofs, cv) - F
            if dt is not None:
                da = a_nod - a_prev
                R += fem.assemble_vector(
                    self.mesh, self.dofs, (self.mass_el @ da[self.mesh.triangles][:, :, None])[..., 0] / dt)
            norm = float(np.linalg.norm(R))
            diag.residuals.append(norm)
            if floor is None:
                scale_r = float(np.linalg.norm(np.abs(F))) + float(np.abs(cv).sum())
                floor = max(opt.tol_macro * norm, 1e-14 * scale_r)
            if norm <= floor:
                break
            if it == opt.max_nr_macro:
                raise SolverError(
                    f"macro Newton did not converge in {opt.max_nr_macro} iterations at t={t!r}",
                    diag.residuals)
            T = np.broadcast_to(NU0 * np.eye(2), (self.mesh.n_triangles, 2, 2)).copy()
            tangents, fallbacks = self._tangents(srcs, sols)
            self.tangent_fallbacks += fallbacks
            diag.perturbed_cell_solves += 2 * len(sols)
            self.cell_solves += 2 * len(sols)
            if len(tangents):
                T[self.smc] = np.array(tangents)
            vals = fem.curl_matrices(self.geo, T)
            if dt is not None:
                vals = vals + self.mass_el / dt
            J = self.pattern.matrix(vals)
            x = x + fem.sparse_solve(J, -R)
            diag.nr_iters += 1
        for s in sols:
            s.factor = None
        diag.nr_iters = max(1, diag.nr_iters)
        return a_nod, b, srcs, sols, diag

    def reduced_jacobian(self, a_nodal: Array, dt: float | None, b_prev: Array | None = None):
        """Macro residual and reduced Jacobian at an arbitrary iterate (nothing is committed).

        ``b_prev`` overrides the committed macro flux density used for the
        backward differences.
        """
        opt = self.options
        b = fem.flux_density(self.mesh, self.geo, a_nodal)
        bp = self.b if b_prev is None else b_prev
        srcs = downscale(b[self.smc], bp[self.smc], self._centroid_values(a_nodal),
                         self._centroid_values(self.a), dt)
        sols = [c.template.solve(s, c.x, c.state, keep_factor=True) for c, s in zip(self.cells, srcs)]
        h = NU0 * b
        h[self.smc] = np.array([s.h_M for s in sols]).reshape(-1, 2)
        R = fem.assemble_vector(self.mesh, self.dofs, fem.curl_vectors(self.geo, h))
        T = np.broadcast_to(NU0 * np.eye(2), (self.mesh.n_triangles, 2, 2)).copy()
        for k, (c, s, sol) in enumerate(zip(self.cells, srcs, sols)):
            T[self.smc[k]] = c.upscale_tangent(s, sol, opt.delta_b, opt.tangent_mode)
        vals = fem.curl_matrices(self.geo, T)
        if dt is not None:
            da = a_nodal - self.a
            R += fem.assemble_vector(
                self.mesh, self.dofs, (self.mass_el @ da[self.mesh.triangles][:, :, None])[..., 0] / dt)
            vals = vals + self.mass_el / dt
        return R, self.pattern.matrix(vals)

    def commit(self, a_nodal: Array, b: Array) -> None:
        for c in self.cells:
            c.commit()
        self.a = a_nodal
        self.b = b

    def losses(self, a_prev: Array, a_nodal: Array, sols: list[CellSolution], dt: float) -> float:
        """Joule power per metre of depth over the full cross-section."""
        area = self.geo.area[self.smc]
        p = float(np.dot(area, [s.loss_density for s in sols]))
        if np.any(self.sigma_M):
            da = (a_nodal - a_prev)[self.mesh.triangles] / dt
            p += float(np.einsum("ti,tij,tj->", da, self.mass_el, da))
        return symmetry_factor(self.mesh) * p


class _Probe:
    def __init__(self, model: MultiscaleModel, name: str, point):
        self.name = name
        self.point = np.asarray(point, dtype=float)
        self.macro_tri = model.mesh.find_triangle(self.point)
        self.cell_index = None
        self.cell_tri = None
        hits = np.flatnonzero(model.smc == self.macro_tri)
        if len(hits):
            self.cell_index = int(hits[0])
            p = model.template.mesh.period
            y = np.mod(self.point, p) - p / 2
            self.cell_tri = model.template.mesh.find_triangle(y)

    def sample(self, model: MultiscaleModel, b: Array) -> tuple[Array, Array]:
        b_M = b[self.macro_tri]
        if self.cell_index is None:
            return b_M, b_M
        cell = model.cells[self.cell_index]
        b_m = model.template.flux(cell.x, b_M)[self.cell_tri]
        return b_M, b_m


def run_dynamic(model: MultiscaleModel, grid: TimeGrid, probes: dict | None = None,
                record_fields: bool = True, cell_dump: list[int] | None = None,
                on_step=None) -> RunResult:
    """Implicit-Euler time loop of the two-scale problem.

    A failed step is retried once as two half steps when ``options.halving``
    is set; a second failure aborts with :class:`SolverError`.
    """
    if not model.dynamic:
        raise MqsError("run_dynamic needs a dynamic model")
    probe_objs = [_Probe(model, n, p) for n, p in (probes or {}).items()]
    times = grid.times
    losses = [0.0]
    bs = [model.b.copy()]
    jz = [np.zeros(model.mesh.n_triangles)]
    a_hist = [model.a.copy()]
    series = {p.name: [np.zeros(2)] for p in probe_objs}
    series.update({p.name + "_macro": [np.zeros(2)] for p in probe_objs})
    cells_out: list[tuple[int, float, int, Array, Array]] = []
    diags = []
    for k in range(1, grid.n_steps + 1):
        t = float(times[k])
        a_prev = model.a.copy()
        try:
            a_nod, b, srcs, sols, diag = model.solve_step(t, grid.dt)
            model.commit(a_nod, b)
            p = model.losses(a_prev, a_nod, sols, grid.dt)
        except SolverError as exc:
            if not model.options.halving:
                raise
            log.warning("step %d failed (%s); retrying with two half steps", k, exc)
            half = grid.dt / 2
            a1, b1, _, _, d1 = model.solve_step(t - half, half)
            model.commit(a1, b1)
            a_mid = model.a.copy()
            a_nod, b, srcs, sols, diag = model.solve_step(t, half)
            model.commit(a_nod, b)
            p = model.losses(a_mid, a_nod, sols, half)
            diag.residuals = d1.residuals + diag.residuals
            diag.nr_iters += d1.nr_iters
            diag.cell_failures += 1
            diag.halved = True
        diag.step = k
        diags.append(diag)
        losses.append(p)
        a_hist.append(model.a.copy())
        if record_fields:
            bs.append(b.copy())
            jz.append(model.waveform.density(model.mesh.region, t))
        for pr in probe_objs:
            b_M, b_m = pr.sample(model, b)
            series[pr.name].append(b_m)
            series[pr.name + "_macro"].append(b_M)
        for gp in cell_dump or []:
            cell = model.cells[gp]
            src = cell.last_sources
            tp = model.template
            cells_out.append((k, t, gp, tp.flux(cell.x, src.b_M),
                              tp.current_density(cell.x, cell.x_prev, src)))
        if on_step is not None:
            on_step(diag)
    res = RunResult("multiscale", model.mesh, times, np.array(losses), bs if record_fields else [],
                    jz if record_fields else [], {k: np.array(v) for k, v in series.items()}, diags, a_hist)
    res.extra["cell_solves"] = model.cell_solves
    res.extra["tangent_fallbacks"] = model.tangent_fallbacks
    res.extra["n_cells"] = len(model.cells)
    res.extra["sigma_hom"] = model.sigma_hom
    if cell_dump:
        res.extra["cell_frames"] = cells_out
        res.extra["cell_mesh"] = model.template.mesh
    return res


def run_static(model: MultiscaleModel, scale: float = 1.0, probes: dict | None = None) -> RunResult:
    """Single nonlinear solve without conductivity terms at source amplitude ``scale * j_s0``."""
    if model.dynamic:
        raise MqsError("run_static needs a static model")
    a_nod, b, srcs, sols, diag = model.solve_step(0.0, None, scale=scale)
    model.commit(a_nod, b)
    diag.step = 1
    probe_objs = [_Probe(model, n, p) for n, p in (probes or {}).items()]
    series = {}
    for pr in probe_objs:
        b_M, b_m = pr.sample(model, b)
        series[pr.name] = np.array([b_m])
        series[pr.name + "_macro"] = np.array([b_M])
    js = model.waveform.density(model.mesh.region, 0.0, scale)
    return RunResult("static", model.mesh, np.array([0.0]), np.array([0.0]), [b], [js], series,
                     [diag], [a_nod], {"cell_solves": model.cell_solves, "n_cells": len(model.cells)})
