"""Pieces shared by the macro and reference solvers: excitation, time grid, options, results."""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import numpy.typing as npt

from . import fem
from .errors import ConfigError
from .mesh import GAMMA_H, GAMMA_INF, GAMMA_V, INDUCTOR_NEG, INDUCTOR_POS, TriMesh

Array = npt.NDArray[np.float64]


@dataclasses.dataclass(frozen=True)
class SourceWaveform:
    """Imposed current density ``j_s0 sin(2 pi f t)``: + in the top inductor, - in the bottom one."""

    js0: float = 35e7
    frequency: float = 50.0

    def __post_init__(self) -> None:
        if not self.frequency > 0:
            raise ConfigError(f"frequency must be positive, got {self.frequency}")

    def s(self, t: float) -> float:
        return math.sin(2 * math.pi * self.frequency * t)

    def density(self, region: npt.NDArray[np.int64], t: float, scale: float | None = None) -> Array:
        """Per-triangle source current density at time ``t`` (or at amplitude ``scale``)."""
        value = self.js0 * (self.s(t) if scale is None else scale)
        pol = np.where(region == INDUCTOR_POS, 1.0, np.where(region == INDUCTOR_NEG, -1.0, 0.0))
        return value * pol


@dataclasses.dataclass(frozen=True)
class TimeGrid:
    """Uniform implicit-Euler grid ``t_k = t0 + k dt`` for ``k = 0 .. n_steps``."""

    t0: float
    T: float
    n_steps: int

    def __post_init__(self) -> None:
        if self.n_steps < 1:
            raise ConfigError("the time grid needs at least one step")
        if not self.T > self.t0:
            raise ConfigError("the time horizon must exceed its start")

    @classmethod
    def periods(cls, frequency: float, steps_per_period: int, periods: float) -> "TimeGrid":
        n = max(1, int(round(steps_per_period * periods)))
        return cls(0.0, n / (steps_per_period * frequency), n)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> Array:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


@dataclasses.dataclass
class SolverOptions:
    tol_macro: float = 1e-6
    max_nr_macro: int = 25
    tol_cell: float = 1e-8
    max_nr_cell: int = 30
    delta_b: float = 1e-4
    tangent_mode: str = "consistent"
    macro_sigma_mode: str = "zero"
    grain_constants: bool = True
    threads: int = 1
    halving: bool = True


def essential_tags(mesh: TriMesh) -> tuple[int, ...]:
    """Boundary tags with a_z = 0; GAMMA_V stays natural (h tangential = 0)."""
    known = {GAMMA_INF, GAMMA_H, GAMMA_V}
    unknown = set(np.unique(mesh.btag).tolist()) - known
    if unknown:
        raise ConfigError(f"boundary edges with unsupported tags {sorted(unknown)}")
    return GAMMA_INF, GAMMA_H


def apply_boundary_conditions(mesh: TriMesh, n_extra: int = 0) -> fem.DofMap:
    return fem.DofMap.for_mesh(mesh, essential_tags(mesh), n_extra=n_extra)


def symmetry_factor(mesh: TriMesh) -> float:
    """Ratio of full cross-section to meshed area: 4 for a quarter domain."""
    return 4.0 if np.any(mesh.btag == GAMMA_H) else 1.0


def convergence_order(residuals: list[float]) -> float:
    """Order estimate ``log(r_k / r_{k-1}) / log(r_{k-1} / r_{k-2})`` from the last three residuals."""
    if len(residuals) < 3:
        return math.nan
    r2, r1, r0 = residuals[-1], residuals[-2], residuals[-3]
    if min(r0, r1, r2) <= 0 or r1 == r0:
        return math.nan
    return math.log(r2 / r1) / math.log(r1 / r0)


@dataclasses.dataclass
class StepDiagnostics:
    step: int
    t: float
    nr_iters: int
    residuals: list[float]
    cell_failures: int = 0
    base_cell_solves: int = 0
    perturbed_cell_solves: int = 0
    max_cell_iters: int = 0
    max_cell_residual: float = 0.0
    halved: bool = False

    def log_line(self) -> str:
        hist = "[" + ", ".join(f"{r:.6e}" for r in self.residuals) + "]"
        return f"step {self.step}, {self.t!r}, {self.nr_iters}, {hist}, {self.cell_failures}"


@dataclasses.dataclass
class RunResult:
    """Time history of one solver run."""

    mode: str
    mesh: TriMesh
    times: Array
    losses: Array
    b: list[Array]
    jz: list[Array]
    probes: dict[str, Array]
    diagnostics: list[StepDiagnostics]
    a: list[Array]
    extra: dict = dataclasses.field(default_factory=dict)
