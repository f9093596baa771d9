"""Build solvers from a run configuration, execute them and write their outputs."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import numpy.typing as npt

from . import metrics
from .config import MODES, RunConfig, parse_config
from .errors import MqsError, ProbeError
from .macro import MultiscaleModel, run_dynamic, run_static
from .mesh import build_cell_mesh, build_macro_mesh, build_reference_mesh, read_mesh, write_mesh
from .problem import RunResult
from .reference import ReferenceModel, run_reference, run_reference_static

Array = npt.NDArray[np.float64]

log = logging.getLogger(__name__)


def build_multiscale(cfg: RunConfig, frequency: float | None = None, dynamic: bool = True) -> MultiscaleModel:
    geom = cfg.geometry()
    d = cfg["discretization"]
    return MultiscaleModel(build_macro_mesh(geom, d["macro_divisions"]), build_cell_mesh(geom, d["cell_refine"]),
                           cfg.grain_law(), cfg.waveform(frequency), cfg["material"]["sigma"],
                           cfg.solver_options(), dynamic)


def build_reference(cfg: RunConfig, frequency: float | None = None, dynamic: bool = True) -> ReferenceModel:
    geom = cfg.geometry()
    mesh = build_reference_mesh(geom, cfg["discretization"]["reference_refine"])
    return ReferenceModel(mesh, cfg.grain_law(), cfg.waveform(frequency), cfg["material"]["sigma"],
                          cfg.solver_options(), dynamic)


def execute(cfg: RunConfig, mode: str | None = None, frequency: float | None = None,
            on_step=None) -> RunResult:
    """Run one solver; ``mode`` is multiscale, reference or static (multiscale without time terms)."""
    mode = mode or cfg.mode
    probes = cfg.probes()
    record = bool(cfg["output"]["fields"])
    if mode == "multiscale":
        model = build_multiscale(cfg, frequency)
        try:
            return run_dynamic(model, cfg.time_grid(frequency), probes, record, cfg.cell_dump(), on_step)
        finally:
            model.close()
    if mode == "reference":
        return run_reference(build_reference(cfg, frequency), cfg.time_grid(frequency), probes, record, on_step)
    if mode == "static":
        model = build_multiscale(cfg, frequency, dynamic=False)
        try:
            return run_static(model, cfg["discretization"]["static_scale"], probes)
        finally:
            model.close()
    if mode == "reference-static":
        return run_reference_static(build_reference(cfg, frequency, dynamic=False),
                                    cfg["discretization"]["static_scale"])
    raise MqsError(f"mode {mode!r} cannot be executed as a single run")


def write_outputs(cfg: RunConfig, result: RunResult, out_dir: str | Path | None = None) -> Path:
    """Write metadata, mesh, losses, fields, probes and cell dumps of ``result`` into ``out_dir``."""
    out = Path(out_dir or cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror}") from exc
    mode = result.mode if result.mode in MODES else cfg.mode
    cfg.with_values(run={"mode": mode}, output={"dir": str(out)}).write_metadata(out)
    write_mesh(result.mesh, out / "mesh.txt")
    metrics.dump_losses(metrics.LossSeries(result.times, result.losses), out / "losses.csv")
    if result.b:
        metrics.dump_fields(result.times, result.mesh.centroids(), result.b, result.jz, out / "fields.csv")
    points = cfg.probes()
    if points:
        table = {}
        for name, pt in points.items():
            meso = result.probes.get(name)
            if meso is None:
                continue
            table[name] = (pt, meso, result.probes.get(name + "_macro", meso))
        metrics.dump_probes(result.times, table, out / "probes.csv")
    frames = result.extra.get("cell_frames")
    if frames:
        metrics.dump_cell_fields(frames, result.extra["cell_mesh"].centroids(), out / "cells.csv")
    return out


# ---------------------------------------------------------------------------
# comparison


def _series_at(fields: Array, tri_ids: Array) -> Array:
    """Mean ``(bx, by)`` over ``tri_ids`` for every recorded step."""
    steps = fields[:, 0].astype(np.int64)
    n_steps = int(steps.max()) + 1 if len(steps) else 0
    n_tri = len(fields) // max(n_steps, 1)
    b = fields[:, 5:7].reshape(n_steps, n_tri, 2)
    return b[:, tri_ids].mean(axis=1)


def compare_runs(ref_dir: str | Path, ms_dir: str | Path, probe_points: Array | None = None) -> metrics.ErrorReport:
    """Loss error and per-probe field errors of a multiscale run against a reference run.

    For each probe ``meso`` compares the reconstructed mesoscale field with the
    reference field at the point and ``macro`` compares the macro field with the
    reference field averaged over the periodic cell containing the point.
    """
    ref_dir, ms_dir = Path(ref_dir), Path(ms_dir)
    p_ref = metrics.read_losses(ref_dir / "losses.csv")
    p_ms = metrics.read_losses(ms_dir / "losses.csv")
    report = metrics.ErrorReport(metrics.loss_error(p_ms, p_ref))
    if probe_points is None or len(probe_points) == 0:
        return report
    ref_mesh = read_mesh(ref_dir / "mesh.txt")
    ms_mesh = read_mesh(ms_dir / "mesh.txt")
    ref_fields = metrics.read_fields(ref_dir / "fields.csv")
    ms_fields = metrics.read_fields(ms_dir / "fields.csv")
    ms_cfg = parse_config(ms_dir / "metadata.txt")
    pitch = ms_cfg.geometry().pitch
    probe_table = metrics.read_probe_table(ms_dir / "probes.csv") if (ms_dir / "probes.csv").exists() else None
    times = p_ref.times
    cen = ref_mesh.centroids()
    for k, (x, y) in enumerate(np.asarray(probe_points, dtype=float)):
        try:
            tri = ref_mesh.find_triangle((x, y))
            ms_tri = ms_mesh.find_triangle((x, y))
        except ProbeError as exc:
            raise ProbeError(f"probe ({x!r}, {y!r}): {exc}") from None
        b_ref = _series_at(ref_fields, np.array([tri]))
        lo = np.floor(np.array([x, y]) / pitch) * pitch
        in_cell = np.flatnonzero(np.all((cen >= lo) & (cen <= lo + pitch), axis=1))
        b_ref_avg = _series_at(ref_fields, in_cell)
        b_macro = _series_at(ms_fields, np.array([ms_tri]))
        n = min(len(times), len(b_ref), len(b_macro))
        report.field_errors[f"probe{k}_macro"] = metrics.field_error(
            times[:n], np.linalg.norm(b_macro[:n], axis=1), np.linalg.norm(b_ref_avg[:n], axis=1))
        if probe_table is not None:
            rows = probe_table[np.isclose(probe_table[:, 2], x, rtol=1e-12, atol=1e-15)
                               & np.isclose(probe_table[:, 3], y, rtol=1e-12, atol=1e-15)]
            if len(rows):
                m = min(n, len(rows))
                report.field_errors[f"probe{k}_meso"] = metrics.field_error(
                    times[:m], np.linalg.norm(rows[:m, 4:6], axis=1), np.linalg.norm(b_ref[:m], axis=1))
    return report


# ---------------------------------------------------------------------------
# sweep


def _sweep_pair(cfg: RunConfig, f: float) -> tuple[metrics.LossSeries, metrics.LossSeries]:
    quiet = cfg.with_values(output={"fields": False, "probes": "", "cell_dump": ""})
    ms = execute(quiet, "multiscale", f)
    ref = execute(quiet, "reference", f)
    return metrics.LossSeries(ms.times, ms.losses), metrics.LossSeries(ref.times, ref.losses)


def _sweep_row(args) -> tuple[float, float, str]:
    cfg, f = args
    return metrics.frequency_sweep(lambda g: _sweep_pair(cfg, g), [f])[0]


def sweep(cfg: RunConfig, freqs, out_dir: str | Path | None = None, processes: int = 1):
    """Err_P per frequency written to ``sweep.csv``; independent frequencies may run in parallel processes."""
    freqs = [float(f) for f in freqs]
    if processes > 1 and len(freqs) > 1:
        serial = cfg.with_values(run={"threads": 1})
        with ProcessPoolExecutor(min(processes, len(freqs))) as pool:
            rows = list(pool.map(_sweep_row, [(serial, f) for f in freqs]))
    else:
        rows = metrics.frequency_sweep(lambda f: _sweep_pair(cfg, f), freqs)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.with_values(run={"mode": "sweep"}, output={"dir": str(out)}).write_metadata(out)
    write_sweep(rows, out / "sweep.csv")
    return rows


def write_sweep(rows, path: str | Path) -> None:
    """CSV ``f_hz,err_p,status,nondecreasing``; the last column compares each row with the previous valid one."""
    lines = ["f_hz,err_p,status,nondecreasing"]
    prev = math.nan
    for f, e, status in rows:
        ok = "" if math.isnan(e) else ("true" if (math.isnan(prev) or e >= prev) else "false")
        lines.append(f"{f!r},{e!r},{status},{ok}")
        if not math.isnan(e):
            prev = e
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
