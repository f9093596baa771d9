"""P1 triangle finite elements for the scalar potential a_z.

The flux density of a P1 field is constant on each triangle,
``b = 1_z x grad a_z = (-d a/dy, d a/dx)``, so most element quantities are
computed once per triangle.  Global systems are assembled through a
:class:`SparsePattern` that fixes the CSR layout up front and sums element
contributions with ``np.bincount``; the accumulation order is therefore
independent of how the element loop is split.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError
from .mesh import TriMesh

Array = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]


@dataclasses.dataclass(frozen=True)
class QuadRule:
    """Barycentric points and weights on the reference triangle; weights sum to 1."""

    points: Array
    weights: Array

    @property
    def degree_label(self) -> str:
        return f"{len(self.weights)}-point"


CENTROID = QuadRule(np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0]))
TRI3 = QuadRule(
    np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
    np.full(3, 1 / 3),
)

_MASS_REF = (np.ones((3, 3)) + np.eye(3)) / 12.0


@dataclasses.dataclass(frozen=True)
class ElementGeometry:
    """Per-triangle areas, shape-function gradients and curl vectors.

    ``curl[t, i]`` is ``1_z x grad(phi_i)`` on triangle ``t``.
    """

    area: Array
    grad: Array
    curl: Array

    @classmethod
    def of(cls, mesh: TriMesh) -> "ElementGeometry":
        p = mesh.nodes[mesh.triangles]
        x, y = p[..., 0], p[..., 1]
        det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
        area = 0.5 * det
        grad = np.empty((len(p), 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            grad[:, i, 0] = (y[:, j] - y[:, k]) / det
            grad[:, i, 1] = (x[:, k] - x[:, j]) / det
        curl = np.stack([-grad[..., 1], grad[..., 0]], axis=-1)
        return cls(area, grad, curl)


def flux_density(mesh: TriMesh, geo: ElementGeometry, a_nodal: Array) -> Array:
    """Per-triangle ``b = 1_z x grad a_z`` from nodal values."""
    return (a_nodal[mesh.triangles][:, None, :] @ geo.curl)[:, 0]


def quad_points(mesh: TriMesh, rule: QuadRule = TRI3) -> Array:
    """Physical coordinates of the rule points, shape ``(n_tri, n_q, 2)``."""
    return np.einsum("qi,tik->tqk", rule.points, mesh.nodes[mesh.triangles])


def mass_matrices(geo: ElementGeometry, coeff: Array) -> Array:
    """Element matrices of ``coeff * integral(phi_i phi_j)``, exact for P1."""
    return (coeff * geo.area)[:, None, None] * _MASS_REF


def curl_matrices(geo: ElementGeometry, tangent: Array) -> Array:
    """Element matrices of ``integral((1_z x grad phi_i) . T (1_z x grad phi_j))``."""
    return geo.area[:, None, None] * (geo.curl @ tangent @ geo.curl.transpose(0, 2, 1))


def curl_vectors(geo: ElementGeometry, h: Array) -> Array:
    """Element vectors of ``integral(h . (1_z x grad phi_i))`` for per-triangle ``h``."""
    return geo.area[:, None] * (geo.curl @ h[:, :, None])[..., 0]


def load_vectors(mesh: TriMesh, geo: ElementGeometry, values_at_points: Array,
                 rule: QuadRule = TRI3) -> Array:
    """Element vectors of ``integral(f phi_i)`` given ``f`` at the rule points ``(n_tri, n_q)``."""
    return geo.area[:, None] * np.einsum("q,tq,qi->ti", rule.weights, values_at_points, rule.points)


class DofMap:
    """Node-to-unknown numbering with Dirichlet nodes, periodic folding and extra scalars.

    ``node_dof[n]`` is the unknown carrying node ``n`` or ``-1`` for a Dirichlet
    node.  Periodic slave nodes share the unknown of their master.  Extra
    scalar unknowns (grain constants, multipliers) are numbered after the nodal
    ones.
    """

    def __init__(self, n_nodes: int, dirichlet: IntArray | None = None,
                 dirichlet_values: Array | None = None, periodic: IntArray | None = None,
                 n_extra: int = 0):
        dirichlet = np.zeros(0, dtype=np.int64) if dirichlet is None else np.asarray(dirichlet)
        periodic = np.zeros((0, 2), dtype=np.int64) if periodic is None else np.asarray(periodic)
        self.n_nodes = n_nodes
        master_of = np.arange(n_nodes)
        if len(periodic):
            master_of[periodic[:, 0]] = periodic[:, 1]
            if np.any(master_of[master_of] != master_of):
                raise SolverError("periodic constraint table has chains or cycles")
        fixed = np.zeros(n_nodes, dtype=bool)
        fixed[dirichlet] = True
        fixed = fixed | fixed[master_of]
        self.values = np.zeros(n_nodes)
        if dirichlet_values is not None:
            self.values[dirichlet] = dirichlet_values
        self.values = self.values[master_of]
        owners = np.flatnonzero((master_of == np.arange(n_nodes)) & ~fixed)
        numbering = np.full(n_nodes, -1, dtype=np.int64)
        numbering[owners] = np.arange(len(owners))
        self.node_dof = numbering[master_of]
        self.node_dof[fixed] = -1
        self.n_node_dofs = len(owners)
        self.n_extra = n_extra
        self.master_of = master_of

    @classmethod
    def for_mesh(cls, mesh: TriMesh, dirichlet_tags=(), n_extra: int = 0,
                 periodic: bool = False) -> "DofMap":
        nodes = np.unique(mesh.bedges[np.isin(mesh.btag, list(dirichlet_tags))])
        return cls(mesh.n_nodes, nodes, None, mesh.periodic if periodic else None, n_extra)

    @property
    def n_dofs(self) -> int:
        return self.n_node_dofs + self.n_extra

    @property
    def free_nodes(self) -> IntArray:
        return np.flatnonzero(self.node_dof >= 0)

    def extra(self, k: int) -> int:
        return self.n_node_dofs + k

    def expand(self, x: Array) -> Array:
        """Nodal values from an unknown vector, Dirichlet values filled in."""
        out = self.values.copy()
        free = self.node_dof >= 0
        out[free] = x[self.node_dof[free]]
        return out

    def prolongation(self) -> sp.csr_matrix:
        """Matrix ``P`` with ``nodal = P x + dirichlet_lift`` over the nodal unknowns."""
        free = np.flatnonzero(self.node_dof >= 0)
        return sp.csr_matrix((np.ones(len(free)), (free, self.node_dof[free])),
                             shape=(self.n_nodes, self.n_node_dofs))


class SparsePattern:
    """Fixed CSR layout for a list of (row, col) contributions.

    Entries whose row or column is negative are dropped.  ``matrix(values)``
    sums duplicate entries by ``np.bincount``.
    """

    def __init__(self, rows: IntArray, cols: IntArray, n: int):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        self.keep = (rows >= 0) & (cols >= 0)
        keys = rows[self.keep] * n + cols[self.keep]
        uniq, self.slot = np.unique(keys, return_inverse=True)
        self.n = n
        self.nnz = len(uniq)
        r = uniq // n
        self.indices = (uniq % n).astype(np.int32)
        self.indptr = np.searchsorted(r, np.arange(n + 1)).astype(np.int32)

    def matrix(self, values: Array) -> sp.csr_matrix:
        data = np.bincount(self.slot, weights=np.asarray(values).ravel()[self.keep],
                           minlength=self.nnz)
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=(self.n, self.n))


def element_pattern(mesh: TriMesh, dofs: DofMap) -> tuple[IntArray, IntArray]:
    """Row and column unknowns of every element-matrix entry, shape ``(n_tri, 3, 3)``."""
    d = dofs.node_dof[mesh.triangles]
    return np.broadcast_to(d[:, :, None], (len(d), 3, 3)), np.broadcast_to(d[:, None, :], (len(d), 3, 3))


def assemble_vector(mesh: TriMesh, dofs: DofMap, element_vectors: Array, n: int | None = None) -> Array:
    """Sum element vectors into the unknown numbering (Dirichlet rows dropped)."""
    d = dofs.node_dof[mesh.triangles].ravel()
    keep = d >= 0
    return np.bincount(d[keep], weights=element_vectors.ravel()[keep],
                       minlength=dofs.n_dofs if n is None else n)


def dirichlet_lift(mesh: TriMesh, dofs: DofMap, element_matrices: Array) -> Array:
    """``K_{free, fixed} g`` contribution of the Dirichlet values, assembled."""
    g = dofs.values[mesh.triangles]
    g = np.where(dofs.node_dof[mesh.triangles] < 0, g, 0.0)
    return assemble_vector(mesh, dofs, np.einsum("tij,tj->ti", element_matrices, g))


def assemble_matrix(mesh: TriMesh, dofs: DofMap, element_matrices: Array) -> sp.csr_matrix:
    """One-off assembly of element matrices; loops reuse a :class:`SparsePattern` instead."""
    r, c = element_pattern(mesh, dofs)
    return SparsePattern(r, c, dofs.n_dofs).matrix(element_matrices)


def assemble_mass_sigma(mesh: TriMesh, dofs: DofMap, sigma: Array, dt: float) -> sp.csr_matrix:
    """``(sigma / dt)``-weighted P1 mass matrix; ``sigma`` is per triangle."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    geo = ElementGeometry.of(mesh)
    return assemble_matrix(mesh, dofs, mass_matrices(geo, np.asarray(sigma) / dt))


def assemble_curl_term(mesh: TriMesh, dofs: DofMap, a_nodal: Array, law_eval,
                       geo: ElementGeometry | None = None):
    """Residual ``integral(h . curl phi_i)`` and its tangent for a nodal potential.

    ``law_eval(b)`` maps per-triangle flux densities ``(n_tri, 2)`` to
    ``(h, dh/db)``.
    """
    geo = ElementGeometry.of(mesh) if geo is None else geo
    b = flux_density(mesh, geo, a_nodal)
    h, t = law_eval(b)[:2]
    res = assemble_vector(mesh, dofs, curl_vectors(geo, h))
    jac = assemble_matrix(mesh, dofs, curl_matrices(geo, t))
    return res, jac


def apply_constraints(matrix: sp.spmatrix, rhs: Array, dofs: DofMap,
                      mean_weights: Array | None = None) -> tuple[sp.csr_matrix, Array]:
    """Reduce a nodal system ``K u = f`` to the unknowns of ``dofs``.

    Periodic slaves are folded into their masters by the congruence ``P^T K P``,
    Dirichlet values are lifted to the right-hand side, and when
    ``mean_weights`` is given a Lagrange multiplier row ``w . u = 0`` is
    appended as the last unknown.
    """
    P = dofs.prolongation()
    K = sp.csr_matrix(matrix)
    Kr = (P.T @ K @ P).tocsr()
    fr = P.T @ (np.asarray(rhs) - K @ dofs.values)
    if mean_weights is not None:
        w = P.T @ np.asarray(mean_weights)
        Kr = sp.bmat([[Kr, w[:, None]], [w[None, :], None]], format="csr")
        fr = np.append(fr, 0.0)
    return Kr, fr


class Factorization:
    """Sparse LU with a fill-reducing column ordering, reusable for several right-hand sides."""

    def __init__(self, matrix: sp.spmatrix, ordering: str = "COLAMD"):
        A = sp.csc_matrix(matrix)
        if A.shape[0] != A.shape[1]:
            raise SolverError(f"matrix is not square: {A.shape}")
        if not np.all(np.isfinite(A.data)):
            raise SolverError("matrix has non-finite entries")
        try:
            self._lu = spla.splu(A, permc_spec=ordering)
        except RuntimeError as exc:
            raise SolverError(f"sparse factorization failed: {exc}") from exc
        diag = self._lu.U.diagonal()
        if np.any(diag == 0):
            null = int(self._lu.perm_c[np.flatnonzero(diag == 0)[0]])
            raise SolverError(f"matrix is singular (null unknown {null})")

    def solve(self, rhs: Array) -> Array:
        x = self._lu.solve(np.asarray(rhs, dtype=np.float64))
        if not np.all(np.isfinite(x)):
            raise SolverError("linear solve produced non-finite values")
        return x


def sparse_solve(matrix: sp.spmatrix, rhs: Array) -> Array:
    return Factorization(matrix).solve(rhs)


def dump_matrix(matrix: sp.spmatrix, path: str | Path) -> None:
    """Write ``i j value`` lines in row-major order."""
    A = sp.coo_matrix(sp.csr_matrix(matrix))
    order = np.lexsort((A.col, A.row))
    lines = [f"{i} {j} {v!r}" for i, j, v in zip(A.row[order].tolist(), A.col[order].tolist(),
                                                   A.data[order].tolist())]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
