"""Reduced 1D operator -d^2/ds^2 + V_n(s) on (0, s0), Dirichlet ends.

V_n = C_n kappa3^2 - (w2 kappa1^2 + w3 kappa2^2)/4. The default weights
(1, 1) give the continuum potential; the expansion engine passes the
neighbor-average moments (a2, a3) of the section mode instead, which
makes the transverse part of its solvability identities exact on the
grid (the weights differ from 1 by O(h^2), so the eigenvalues agree to
discretization order either way).

Profiles are stored on the full s-grid with explicit zero end values;
the 3-point operator acts on the interior nodes. Discrete inner
product: <u,v> = h_s * sum over interior nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh_tridiagonal
from scipy.sparse.linalg import splu

from .errors import DegenerateReduced, SolvabilityViolation, SolverFail
from .geometry import FrameField

_ORTHO_TOL = 1e-8
_RESIDUAL_TOL = 1e-10
_GAP_TOL = 1e-8


@dataclass
class ReducedOperator:
    """Tridiagonal Schrodinger operator for one section mode."""

    n: int
    s_grid: np.ndarray
    V: np.ndarray  # potential per node, full grid
    _factors: dict = field(default_factory=dict, repr=False)

    @property
    def h(self) -> float:
        return float(self.s_grid[1] - self.s_grid[0])

    @property
    def s0(self) -> float:
        return float(self.s_grid[-1])

    def matrix(self) -> sp.csr_matrix:
        """Interior-node matrix of -d^2/ds^2 + V."""
        m = self.s_grid.size - 2
        h2 = self.h**2
        return sp.diags(
            [np.full(m - 1, -1.0 / h2), 2.0 / h2 + self.V[1:-1], np.full(m - 1, -1.0 / h2)],
            offsets=(-1, 0, 1),
            format="csr",
        )


@dataclass(frozen=True)
class ReducedMode:
    """Eigenpair of the reduced operator; Psi0 vanishes at both ends."""

    n: int
    m: int
    lam0: float
    Psi0: np.ndarray


def build_reduced(
    frame: FrameField, C_n: float, n: int = 1, transverse_weights=(1.0, 1.0)
) -> ReducedOperator:
    """Assemble V_n from the stored curvature arrays."""
    w2, w3 = transverse_weights
    V = C_n * frame.kappa3**2 - (w2 * frame.kappa1**2 + w3 * frame.kappa2**2) / 4.0
    if not np.all(np.isfinite(V)):
        raise SolverFail("reduced potential is not finite")
    V = V.copy()
    V.setflags(write=False)
    return ReducedOperator(n, frame.s_grid, V)


def solve_reduced(op: ReducedOperator, count: int) -> list[ReducedMode]:
    """Lowest `count` eigenpairs, ascending, normalized, sign-fixed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    m_int = op.s_grid.size - 2
    if count + 1 > m_int:
        raise SolverFail(f"count {count} too large for {m_int} interior nodes")
    h = op.h
    d = 2.0 / h**2 + op.V[1:-1]
    e = np.full(m_int - 1, -1.0 / h**2)
    lam, vecs = eigh_tridiagonal(d, e, select="i", select_range=(0, count))
    scale = max(np.abs(lam).max(), 1.0 / op.s0**2)
    if np.any(np.diff(lam) <= _GAP_TOL * scale):
        k = int(np.argmin(np.diff(lam)))
        raise DegenerateReduced(
            f"reduced modes {k + 1},{k + 2}: gap {lam[k + 1] - lam[k]:.3e}"
        )
    out = []
    for k in range(count):
        psi = np.zeros(op.s_grid.size)
        psi[1:-1] = vecs[:, k]
        psi /= np.sqrt(h) * np.linalg.norm(psi[1:-1])
        if psi[np.argmax(np.abs(psi))] < 0:
            psi = -psi
        psi.setflags(write=False)
        out.append(ReducedMode(op.n, k + 1, float(lam[k]), psi))
    return out


def deflated_reduced_resolvent(
    op: ReducedOperator, mode: ReducedMode, rhs: np.ndarray, noise_floor: float = 0.0
) -> np.ndarray:
    """u with (L - lam0) u = P rhs, <u, Psi0> = 0, Dirichlet ends.

    Accepts interior-length or full-grid rhs and returns the same shape.
    Bordered sparse LU, factorized once per mode index, reused.
    noise_floor: pre-cancellation magnitude of the rhs; below it the rhs
    is rounding residue and is not solvability-checked against itself.
    """
    m_int = op.s_grid.size - 2
    rhs = np.asarray(rhs, dtype=float)
    full = rhs.size == op.s_grid.size
    r = rhs[1:-1] if full else rhs
    if r.size != m_int:
        raise ValueError("rhs length matches neither the grid nor its interior")
    h = op.h
    psi = mode.Psi0[1:-1]

    nrm = np.sqrt(h * np.sum(r**2))
    dot = h * np.dot(r, psi)
    if abs(dot) > _ORTHO_TOL * max(nrm, noise_floor):
        raise SolvabilityViolation(
            f"reduced rhs (n={mode.n}, m={mode.m}): defect {abs(dot):.3e} vs {nrm:.3e}"
        )

    lu = op._factors.get(mode.m)
    if lu is None:
        K = sp.bmat(
            [
                [op.matrix() - mode.lam0 * sp.eye(m_int), psi[:, None]],
                [psi[None, :], None],
            ],
            format="csc",
        )
        lu = splu(K)
        op._factors[mode.m] = lu

    sol = lu.solve(np.concatenate([r, [0.0]]))
    u = sol[:-1]
    proj = r - dot * psi
    res = np.sqrt(h * np.sum((op.matrix() @ u - mode.lam0 * u - proj) ** 2))
    if res > _RESIDUAL_TOL * max(nrm, noise_floor, 1e-300):
        raise SolverFail(f"deflated reduced solve residual {res:.3e}")
    if full:
        out = np.zeros(op.s_grid.size)
        out[1:-1] = u
        return out
    return u
