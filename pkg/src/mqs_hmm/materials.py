"""Magnetic constitutive laws h = H(b) with consistent tangents dh/db.

Every law works on batches: ``b`` has shape ``(n, 2)``, ``h`` too, and the
tangent has shape ``(n, 2, 2)`` with ``T[:, i, j] = dh_i / db_j``.

The Jiles-Atherton model is hysteretic, so it carries a :class:`JAState` per
evaluation point.  Evaluations never modify a state; they return a trial state
that the caller commits once a time step is accepted.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import numpy.typing as npt

from .errors import MaterialError
from .mesh import GRAIN_BASE

MU0 = 4e-7 * math.pi
NU0 = 1.0 / MU0

_EXP_ARG_MAX = 700.0

Array = npt.NDArray[np.float64]


@dataclasses.dataclass(frozen=True)
class ExpLawParams:
    """Parameters of h = (alpha + beta exp(gamma |b|^2)) b."""

    alpha: float = 388.0
    beta: float = 0.3774
    gamma: float = 2.97

    def __post_init__(self) -> None:
        if not self.alpha > 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError(f"invalid exponential law parameters {self}")


@dataclasses.dataclass(frozen=True)
class JilesAthertonParams:
    Ms: float = 1_145_500.0
    a: float = 59.0
    k: float = 99.0
    c: float = 0.55
    alpha: float = 1.3e-4

    def __post_init__(self) -> None:
        if not (self.Ms > 0 and self.a > 0 and self.k > 0):
            raise ValueError("Ms, a and k must be positive")
        if not 0 <= self.c <= 1:
            raise ValueError(f"c must lie in [0, 1], got {self.c}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def _as_batch(b) -> Array:
    return np.atleast_2d(np.asarray(b, dtype=np.float64))


def _eye(n: int) -> Array:
    return np.broadcast_to(np.eye(2), (n, 2, 2)).copy()


def _exp_factor(b2: Array, p: ExpLawParams) -> Array:
    arg = p.gamma * b2
    if arg.size and arg.max() > _EXP_ARG_MAX:
        raise MaterialError("exponential law argument out of range", residual=float(arg.max()))
    return np.exp(arg)


def exp_law_h(b, p: ExpLawParams) -> Array:
    b = _as_batch(b)
    e = _exp_factor(np.einsum("ni,ni->n", b, b), p)
    return (p.alpha + p.beta * e)[:, None] * b


def exp_law_tangent(b, p: ExpLawParams) -> Array:
    b = _as_batch(b)
    e = _exp_factor(np.einsum("ni,ni->n", b, b), p)
    t = (p.alpha + p.beta * e)[:, None, None] * _eye(len(b))
    t += (2 * p.beta * p.gamma * e)[:, None, None] * b[:, :, None] * b[:, None, :]
    return t


# ---------------------------------------------------------------------------
# Jiles-Atherton


@dataclasses.dataclass
class JAState:
    """History of one batch of JA points.

    ``he`` is the effective field h + alpha M at the last committed instant.
    """

    M: Array
    M_irr: Array
    he: Array
    h: Array

    @classmethod
    def virgin(cls, n: int) -> "JAState":
        z = np.zeros((n, 2))
        return cls(z.copy(), z.copy(), z.copy(), z.copy())

    def copy(self) -> "JAState":
        return JAState(self.M.copy(), self.M_irr.copy(), self.he.copy(), self.h.copy())

    def take(self, idx) -> "JAState":
        return JAState(self.M[idx], self.M_irr[idx], self.he[idx], self.h[idx])


def _langevin_terms(x: Array) -> tuple[Array, Array]:
    """Return L(x)/x and L'(x) with the small-argument series below 1e-4."""
    small = x < 1e-4
    xs = np.where(small, 1.0, x)
    big = xs > 350.0
    xb = np.where(big, 1.0, xs)
    coth = 1.0 / np.tanh(xs)
    q = np.where(small, 1.0 / 3.0 - x**2 / 45.0, (coth - 1.0 / xs) / xs)
    csch2 = np.where(big, 0.0, 1.0 / np.sinh(xb) ** 2)
    dl = np.where(small, 1.0 / 3.0 - x**2 / 15.0, 1.0 / xs**2 - csch2)
    return q, dl


def anhysteretic(he: Array, p: JilesAthertonParams) -> tuple[Array, Array]:
    """Vector anhysteretic magnetisation along he and its Jacobian."""
    r = np.sqrt(np.einsum("ni,ni->n", he, he))
    x = r / p.a
    q, dl = _langevin_terms(x)
    m_an = (p.Ms / p.a) * q[:, None] * he
    e = np.where(r[:, None] > 0, he / np.where(r > 0, r, 1.0)[:, None], np.array([1.0, 0.0]))
    eet = e[:, :, None] * e[:, None, :]
    jac = (p.Ms / p.a) * (dl[:, None, None] * eet + q[:, None, None] * (_eye(len(he)) - eet))
    return m_an, jac


def _ja_response(he: Array, st: JAState, p: JilesAthertonParams) -> tuple[Array, Array, Array]:
    """Magnetisation reached from ``st`` at effective field ``he``, plus dM/dhe.

    The irreversible part relaxes towards the anhysteretic curve exponentially in
    the effective-field path length projected on the relaxation direction, which
    is the exact solution of dM_irr = (M_an - M_irr) |dhe| / k for frozen M_an and
    never overshoots it.
    """
    m_an, j_an = anhysteretic(he, p)
    u = m_an - st.M_irr
    nu = np.sqrt(np.einsum("ni,ni->n", u, u))
    ok = nu > 1e-12 * p.Ms
    d = u / np.where(ok, nu, 1.0)[:, None]
    dhe = he - st.he
    s = np.einsum("ni,ni->n", d, dhe)
    active = ok & (s > 0)
    decay = np.exp(-np.where(active, s, 0.0) / p.k)
    g = np.where(active, 1.0 - decay, 0.0)
    m_irr = st.M_irr + g[:, None] * u
    proj = _eye(len(he)) - d[:, :, None] * d[:, None, :]
    ds = d + np.einsum("nji,njk,nk->ni", j_an, proj, dhe) / np.where(ok, nu, 1.0)[:, None]
    dm_irr = g[:, None, None] * j_an
    dm_irr += np.where(active, decay / p.k, 0.0)[:, None, None] * u[:, :, None] * ds[:, None, :]
    M = (1 - p.c) * m_irr + p.c * m_an
    dM = (1 - p.c) * dm_irr + p.c * j_an
    return M, m_irr, dM


def ja_update(b_target, state: JAState, p: JilesAthertonParams, mu0: float = MU0,
              max_iter: int = 50) -> tuple[Array, Array, JAState]:
    """Invert b = mu0 (h + M) for h starting from ``state``.

    The unknown of the local Newton iteration is the effective field, for which
    b is an explicit, monotone function.  Returns ``(h, dh/db, trial_state)``.
    """
    b = _as_batch(b_target)
    n = len(b)
    he = state.he.copy()
    # relative tolerance plus a round-off floor set by the saturation induction
    tol = 1e-12 * (np.sqrt(np.einsum("ni,ni->n", b, b)) + mu0 * p.a) + 1e-13 * mu0 * p.Ms
    eye = _eye(n)

    def residual(x):
        M, _, dM = _ja_response(x, state, p)
        return mu0 * (x + (1 - p.alpha) * M) - b, dM

    F, dM = residual(he)
    fn = np.sqrt(np.einsum("ni,ni->n", F, F))
    todo = fn > tol
    it = 0
    while todo.any():
        if it >= max_iter:
            raise MaterialError(
                f"Jiles-Atherton inversion did not converge at {int(todo.sum())} points",
                residual=float(fn[todo].max()),
            )
        it += 1
        J = mu0 * (eye[todo] + (1 - p.alpha) * dM[todo])
        step = -np.linalg.solve(J, F[todo][:, :, None])[:, :, 0]
        idx = np.flatnonzero(todo)
        lam = np.ones(len(idx))
        sub = state.take(idx)
        for _ in range(30):
            trial = he[idx] + lam[:, None] * step
            Mt, _, dMt = _ja_response(trial, sub, p)
            Ft = mu0 * (trial + (1 - p.alpha) * Mt) - b[idx]
            ft = np.sqrt(np.einsum("ni,ni->n", Ft, Ft))
            accept = (ft < fn[idx]) | (ft <= tol[idx])
            if accept.all():
                break
            lam = np.where(accept, lam, 0.5 * lam)
        he[idx] = trial
        F[idx], dM[idx], fn[idx] = Ft, dMt, ft
        todo = fn > tol
    M, m_irr, dM = _ja_response(he, state, p)
    h = he - p.alpha * M
    dh_dhe = eye - p.alpha * dM
    db_dhe = mu0 * (eye + (1 - p.alpha) * dM)
    tangent = dh_dhe @ np.linalg.inv(db_dhe)
    return h, tangent, JAState(M, m_irr, he, h)


# ---------------------------------------------------------------------------
# law objects


class LinearLaw:
    stateful = False

    def __init__(self, nu: float):
        self.nu = float(nu)

    def initial_state(self, n: int):
        return None

    def evaluate(self, b, state=None):
        b = _as_batch(b)
        return self.nu * b, self.nu * _eye(len(b)), None

    def describe(self) -> dict[str, float | str]:
        return {"law": "linear", "nu": self.nu}


class ExpLaw:
    stateful = False

    def __init__(self, params: ExpLawParams = ExpLawParams()):
        self.params = params

    def initial_state(self, n: int):
        return None

    def evaluate(self, b, state=None):
        b = _as_batch(b)
        return exp_law_h(b, self.params), exp_law_tangent(b, self.params), None

    def describe(self) -> dict[str, float | str]:
        return {"law": "exp", **dataclasses.asdict(self.params)}


class JilesAthertonLaw:
    stateful = True

    def __init__(self, params: JilesAthertonParams = JilesAthertonParams(), mu0: float = MU0):
        self.params = params
        self.mu0 = mu0

    def initial_state(self, n: int) -> JAState:
        return JAState.virgin(n)

    def evaluate(self, b, state: JAState):
        return ja_update(b, state, self.params, self.mu0)

    def describe(self) -> dict[str, float | str]:
        return {"law": "ja", "vector_model": "isotropic, effective-field inversion",
                **dataclasses.asdict(self.params)}


VACUUM = LinearLaw(NU0)


def conductivity(region_tag: int, sigma_grain: float = 5e6) -> float:
    return sigma_grain if region_tag >= GRAIN_BASE else 0.0


class MaterialField:
    """Assigns ``grain_law`` to grain triangles and a stateless law to every other region.

    Non-grain regions default to vacuum; ``region_laws`` overrides this per
    region code.  Hysteresis states are stored for grain triangles only, one per
    triangle: for P1 elements b is constant on a triangle, so more points would
    hold copies.
    """

    def __init__(self, region: npt.NDArray[np.int64], grain_law, sigma_grain: float = 5e6,
                 region_laws: dict | None = None):
        region = np.asarray(region)
        self.law = grain_law
        self.grain_idx = np.flatnonzero(region >= GRAIN_BASE)
        self.other_idx = np.flatnonzero(region < GRAIN_BASE)
        self.sigma = np.where(region >= GRAIN_BASE, sigma_grain, 0.0)
        self.n = len(region)
        self.groups = []
        laws = dict(region_laws or {})
        for law in laws.values():
            if law.stateful:
                raise MaterialError("only the grain law may carry hysteresis state")
        rest = np.ones(len(self.other_idx), dtype=bool)
        for code, law in sorted(laws.items()):
            mask = region[self.other_idx] == code
            self.groups.append((self.other_idx[mask], law))
            rest &= ~mask
        self.groups.append((self.other_idx[rest], VACUUM))

    def initial_state(self):
        return self.law.initial_state(len(self.grain_idx))

    def evaluate(self, b: Array, state=None):
        h = np.empty_like(b)
        t = np.empty((len(b), 2, 2))
        hg, tg, trial = self.law.evaluate(b[self.grain_idx], state)
        h[self.grain_idx] = hg
        t[self.grain_idx] = tg
        for idx, law in self.groups:
            if len(idx):
                h[idx], t[idx], _ = law.evaluate(b[idx])
        return h, t, trial
