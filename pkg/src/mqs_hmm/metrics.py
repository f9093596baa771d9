"""Loss and field error metrics and the CSV formats used to exchange run results."""

from __future__ import annotations

import dataclasses
import io
import math
from pathlib import Path

import numpy as np
import numpy.typing as npt
from scipy.integrate import trapezoid

from .errors import MqsError, UndefinedErrorMetric

Array = npt.NDArray[np.float64]

LOSS_HEADER = "t_s,p_w_per_m"
FIELD_HEADER = "step,t_s,tri_id,cx,cy,bx,by,jz"
CELL_HEADER = "step,t_s,gp,tri_id,cx,cy,bx,by,jz"
PROBE_HEADER = "step,t_s,x_m,y_m,bx_meso,by_meso,bx_macro,by_macro"


@dataclasses.dataclass
class LossSeries:
    """Joule power per metre of depth sampled at ``times``."""

    times: Array
    values: Array

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.times.shape != self.values.shape:
            raise MqsError("loss series times and values differ in length")

    def resample(self, times: Array) -> "LossSeries":
        return LossSeries(times, np.interp(times, self.times, self.values))


@dataclasses.dataclass
class ErrorReport:
    err_p: float
    field_errors: dict[str, float] = dataclasses.field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"err_p,{self.err_p!r}"]
        out += [f"{k},{v!r}" for k, v in self.field_errors.items()]
        return out


def loss_error(p_m: LossSeries, p_ref: LossSeries) -> float:
    """Relative max-norm error ``max|P_m - P_ref| / max|P_ref|``.

    ``p_m`` is linearly interpolated onto the reference times when the grids
    differ.
    """
    if p_m.times.shape != p_ref.times.shape or not np.allclose(p_m.times, p_ref.times, rtol=0, atol=1e-15):
        p_m = p_m.resample(p_ref.times)
    den = float(np.abs(p_ref.values).max(initial=0.0))
    if den == 0.0:
        raise UndefinedErrorMetric("reference losses are identically zero")
    return float(np.abs(p_m.values - p_ref.values).max()) / den


def _l2_time(times: Array, values: Array) -> float:
    return math.sqrt(float(trapezoid(values**2, times)))


def field_error(times: Array, b: Array, b_ref: Array) -> float:
    """Relative L2-in-time error of a field series, trapezoidal in time.

    ``b`` and ``b_ref`` are either norms ``(n,)`` or vectors ``(n, 2)``; for
    vectors the pointwise error is the Euclidean norm of the difference.
    """
    b = np.asarray(b, dtype=np.float64)
    b_ref = np.asarray(b_ref, dtype=np.float64)
    if b.ndim == 2:
        diff = np.linalg.norm(b - b_ref, axis=1)
        ref = np.linalg.norm(b_ref, axis=1)
    else:
        diff = np.abs(b - b_ref)
        ref = np.abs(b_ref)
    den = _l2_time(times, ref)
    if den == 0.0:
        raise UndefinedErrorMetric("reference field is identically zero")
    return _l2_time(times, diff) / den


def is_nondecreasing(values) -> bool:
    v = [x for x in values if not math.isnan(x)]
    return all(b >= a for a, b in zip(v, v[1:]))


def frequency_sweep(run_pair, freqs) -> list[tuple[float, float, str]]:
    """Rows ``(f_hz, err_p, status)``; ``run_pair(f)`` returns ``(P_multiscale, P_reference)``.

    A failed frequency is recorded with ``err_p = nan`` and the sweep goes on.
    """
    rows = []
    for f in freqs:
        try:
            p_m, p_ref = run_pair(float(f))
            rows.append((float(f), loss_error(p_m, p_ref), "ok"))
        except MqsError as exc:
            rows.append((float(f), math.nan, f"failed: {exc}".replace(",", ";").replace("\n", " ")))
    return rows


# ---------------------------------------------------------------------------
# CSV


def _write(path: str | Path, header: str, body: str) -> None:
    try:
        with open(path, "w", newline="\n", encoding="ascii") as fh:
            fh.write(header + "\n")
            fh.write(body)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def _rows(columns: list[Array], kinds: str) -> str:
    """Comma-joined rows; ``kinds`` has one letter per column, 'i' for ints, 'f' for floats."""
    if not columns or len(columns[0]) == 0:
        return ""
    cols = []
    for c, k in zip(columns, kinds):
        cols.append([str(int(v)) for v in c] if k == "i" else [repr(float(v)) for v in c])
    return "".join(",".join(r) + "\n" for r in zip(*cols))


def dump_losses(series: LossSeries, path: str | Path) -> None:
    _write(path, LOSS_HEADER, _rows([series.times, series.values], "ff"))


def read_losses(path: str | Path) -> LossSeries:
    data = _read_table(path, LOSS_HEADER)
    return LossSeries(data[:, 0], data[:, 1]) if len(data) else LossSeries(np.zeros(0), np.zeros(0))


def dump_fields(times: Array, centroids: Array, b_frames, jz_frames, path: str | Path) -> None:
    """One row per triangle and recorded step, steps in order then triangles in order."""
    n = len(centroids)
    parts = []
    for k, (b, j) in enumerate(zip(b_frames, jz_frames)):
        cols = [np.full(n, k), np.full(n, times[k]), np.arange(n), centroids[:, 0], centroids[:, 1],
                b[:, 0], b[:, 1], j]
        parts.append(_rows(cols, "ifi" + "fffff"))
    _write(path, FIELD_HEADER, "".join(parts))


def dump_cell_fields(frames, centroids: Array, path: str | Path) -> None:
    n = len(centroids)
    parts = []
    for step, t, gp, b, j in frames:
        cols = [np.full(n, step), np.full(n, t), np.full(n, gp), np.arange(n), centroids[:, 0],
                centroids[:, 1], b[:, 0], b[:, 1], j]
        parts.append(_rows(cols, "ifii" + "fffff"))
    _write(path, CELL_HEADER, "".join(parts))


def dump_probes(times: Array, probes: dict[str, tuple[tuple[float, float], Array, Array]],
                path: str | Path) -> None:
    parts = []
    for _, (pt, meso, macro) in probes.items():
        n = len(meso)
        cols = [np.arange(n), times[:n], np.full(n, pt[0]), np.full(n, pt[1]),
                meso[:, 0], meso[:, 1], macro[:, 0], macro[:, 1]]
        parts.append(_rows(cols, "i" + "f" * 7))
    _write(path, PROBE_HEADER, "".join(parts))


def _read_table(path: str | Path, header: str) -> Array:
    try:
        text = Path(path).read_text(encoding="ascii")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    first, _, body = text.partition("\n")
    if first.strip() != header:
        raise MqsError(f"{path}: expected header {header!r}")
    ncol = header.count(",") + 1
    if not body.strip():
        return np.zeros((0, ncol))
    try:
        data = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise MqsError(f"{path}: malformed row: {exc}") from None
    if data.shape[1] != ncol:
        raise MqsError(f"{path}: expected {ncol} columns, found {data.shape[1]}")
    return data


def read_fields(path: str | Path) -> Array:
    """Field table as an array with the columns of :data:`FIELD_HEADER`."""
    return _read_table(path, FIELD_HEADER)


def read_probe_table(path: str | Path) -> Array:
    return _read_table(path, PROBE_HEADER)


def read_probes(path: str | Path) -> Array:
    """Probe points from a ``x_m,y_m`` CSV."""
    return _read_table(path, "x_m,y_m").reshape(-1, 2)
