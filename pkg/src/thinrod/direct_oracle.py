"""Direct eigensolve of the straightened-rod operator, for verification.

The curved, twisted rod of half-width ``eps`` is mapped onto the fixed
cylinder (0, s0) x omega.  In the straightened coordinates the Dirichlet
Laplacian becomes a generalized pencil (H(eps), B(eps)) on the tensor grid
shared with :mod:`thinrod.asymptotic_engine`:

    H(eps) = eps^-2 * (transverse flux, edge weight p)          p = 1 - eps q
           + (flux along s, edge weight 1/(1 - eps q_mid))
           - [D_s c R + R c D_s]                                c = k3 / p
           - R (k3^2 / p) R

    B(eps) = diag(1 - eps q)

with q = kappa1 xi2 - kappa2 xi3 and R the discrete angular derivative.
Every block is assembled in divergence (flux) form with midpoint coefficient
averaging, so H is symmetric; because q is affine on the section, the
transverse block collapses exactly to a Kronecker combination of the shared
section stencils, which keeps the two computation routes on identical
discrete operators.  Expanding the coefficients in powers of eps reproduces,
order by order, the operators applied by the asymptotic engine; that identity
is exposed as :func:`series_defect` and checked in the test-suite.

Unknowns are the interior nodes in every direction, ordered s-major
(flat index = s_index * n_omega + section_index), matching
``field[1:-1].reshape(-1)`` for the engine's full-grid fields.

Solves are deterministic: separable starting blocks (1D sine profiles times
section modes), LOBPCG preconditioned by the exact shifted inverse of the
separable part of the pencil (dense section eigenbasis with a sine transform
along the axis; algebraic multigrid for sections too large to diagonalize),
then a Rayleigh-quotient MINRES polish and a final dense Rayleigh-Ritz
projection.
Small problems go through a dense solver directly.  The residual target is
1e-8 in the B-scaled norm, relaxed to the floating-point floor
``8 * eps_mach * ||H||_inf`` when the matrix norm makes a smaller residual
unrepresentable; the relaxation is recorded in the solve history.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.fft import dst
from scipy.sparse.linalg import LinearOperator, lobpcg, minres

from . import asymptotic_engine as engine
from .cross_section import (
    SectionGrid,
    SectionSpectrum,
    build_operators,
    solve_section,
)
from .errors import PairingAmbiguous, SolverFail, UnderresolvedWindow
from .geometry import FrameField

__all__ = [
    "TransformedOperator",
    "CoefficientTable",
    "DirectSolution",
    "CompareRow",
    "CompareReport",
    "assemble",
    "solve_direct",
    "residual_certificate",
    "compare",
    "series_defect",
    "separable_eigenvalues",
    "operator_checks",
    "dump_matrix",
    "to_vector",
    "to_field",
]

_MACH = float(np.finfo(float).eps)


# ----------------------------------------------------------------------
# assembly
# ----------------------------------------------------------------------


@dataclass
class CoefficientTable:
    """Nodal 3x3 coefficient table of the transformed quadratic form.

    Arrays have shape (M_s, n_omega); indices 1,2,3 refer to the s, xi2,
    xi3 derivatives scaled as (d_s, eps^-1 d_2, eps^-1 d_3).  The table is
    symmetric positive definite wherever p > 0 (its leading minors are
    1/p, 1 and p).  The stencil samples A11 at s-edge midpoints
    (``A11_smid``), the transverse weight p at section-edge midpoints, and
    the twist couplings at nodes.
    """

    A11: np.ndarray
    A12: np.ndarray
    A13: np.ndarray
    A22: np.ndarray
    A23: np.ndarray
    A33: np.ndarray
    A11_smid: np.ndarray
    p: np.ndarray


@dataclass
class TransformedOperator:
    """Sparse symmetric pencil (H, B) for one rod geometry and eps."""

    eps: float
    frame: FrameField
    grid: SectionGrid
    spectrum: SectionSpectrum | None
    H: sp.csr_matrix
    B: np.ndarray  # diagonal of the weight matrix, interior tensor nodes
    q: np.ndarray  # full-grid (M_s, n_omega) tilt field
    A11_smid: np.ndarray  # (M_s - 1, n_omega) s-edge flux coefficient

    @property
    def M_s(self) -> int:
        return self.frame.s_grid.size

    @property
    def n_omega(self) -> int:
        return self.grid.n_interior

    @property
    def n(self) -> int:
        return (self.M_s - 2) * self.n_omega

    @property
    def p(self) -> np.ndarray:
        """Nodal weight 1 - eps q on the full grid."""
        return 1.0 - self.eps * self.q

    def b_matrix(self) -> sp.csr_matrix:
        return sp.diags(self.B, format="csr")

    def coefficient_table(self) -> CoefficientTable:
        eps, q = self.eps, self.q
        k3 = self.frame.kappa3[:, None]
        xi2, xi3 = self.grid.xi2[None, :], self.grid.xi3[None, :]
        p = 1.0 - eps * q
        pinv = 1.0 / p
        return CoefficientTable(
            A11=pinv,
            A12=eps * k3 * xi3 * pinv,
            A13=-eps * k3 * xi2 * pinv,
            A22=p + (eps * k3 * xi3) ** 2 * pinv,
            A23=-((eps * k3) ** 2) * xi2 * xi3 * pinv,
            A33=p + (eps * k3 * xi2) ** 2 * pinv,
            A11_smid=self.A11_smid,
            p=p,
        )


def to_vector(op: TransformedOperator, field: np.ndarray) -> np.ndarray:
    """Flatten a full-grid (M_s, n_omega) field to the unknown vector."""
    field = np.asarray(field, dtype=float)
    if field.shape != (op.M_s, op.n_omega):
        raise ValueError(f"expected field shape {(op.M_s, op.n_omega)}")
    return field[1:-1].reshape(-1).copy()


def to_field(op: TransformedOperator, vec: np.ndarray) -> np.ndarray:
    """Lift an unknown vector to a full-grid field with zero end rows."""
    out = np.zeros((op.M_s, op.n_omega))
    out[1:-1] = np.asarray(vec, dtype=float).reshape(op.M_s - 2, op.n_omega)
    return out


def _section_of(section):
    """Accept a SectionGrid or a SectionSpectrum; return (grid, ops, spec)."""
    if isinstance(section, SectionSpectrum):
        return section.grid, section.ops, section
    if isinstance(section, SectionGrid):
        return section, build_operators(section), None
    raise TypeError("section must be a SectionGrid or SectionSpectrum")


def assemble(frame: FrameField, section, eps: float) -> TransformedOperator:
    """Build the sparse symmetric pencil (H(eps), B(eps)).

    `section` is the cross-section grid (or a solved spectrum on it, whose
    modes then seed the eigensolver starts).  Requires eps * max|q| < 1/2 so
    the weight 1 - eps q stays in [1/2, 3/2]; raises EpsilonOutOfRange
    otherwise.  Dirichlet rows are eliminated: unknowns are interior nodes
    only.  H is exactly symmetric as stored.
    """
    grid, ops, spectrum = _section_of(section)
    k1, k2, k3 = frame.kappa1, frame.kappa2, frame.kappa3
    q = k1[:, None] * grid.xi2[None, :] - k2[:, None] * grid.xi3[None, :]
    engine.check_epsilon(q, eps)

    M_s, n_omega = frame.s_grid.size, grid.n_interior
    ms = M_s - 2
    hs = frame.h
    I_s = sp.identity(ms, format="csr")
    I_w = sp.identity(n_omega, format="csr")

    # flux along s: edge coefficient 1/(1 - eps * mean of nodal q),
    # boundary edges included (they reach the zero end rows).
    q_mid = 0.5 * (q[:-1] + q[1:])
    c_s = 1.0 / (1.0 - eps * q_mid)  # (M_s - 1, n_omega)
    diag0 = ((c_s[:-1] + c_s[1:]) / hs**2).ravel()
    if ms > 1:
        diag1 = (-c_s[1:-1] / hs**2).ravel()
        H = sp.diags(
            [diag1, diag0, diag1], [-n_omega, 0, n_omega], format="csr"
        )
    else:
        H = sp.diags([diag0], [0], format="csr")

    # transverse flux, edge weight p = 1 - eps q.  Because q is affine on
    # the section, the edge-midpoint flux form equals
    #   eps^-2 S - eps^-1 [kappa1 (X2 S - D2) + kappa2 (D3 - X3 S)]
    # exactly, including boundary edges; the small section factors are
    # averaged with their transposes once to pin down exact symmetry.
    H = H + sp.kron(I_s, ops.S, format="csr") * (eps**-2.0)
    if max(np.abs(k1).max(), np.abs(k2).max()) > 0.0:
        G2 = sp.diags(grid.xi2) @ ops.S - ops.D2
        G3 = ops.D3 - sp.diags(grid.xi3) @ ops.S
        G2 = ((G2 + G2.T) * 0.5).tocsr()
        G3 = ((G3 + G3.T) * 0.5).tocsr()
        bend = sp.kron(sp.diags(k1[1:-1]), G2, format="csr") + sp.kron(
            sp.diags(k2[1:-1]), G3, format="csr"
        )
        H = H - bend * (1.0 / eps)

    # twist blocks, nodal coefficients on interior rows.
    if np.abs(k3).max() > 0.0:
        p_int = 1.0 - eps * q[1:-1]
        D_s = sp.diags(
            [np.full(ms - 1, -0.5 / hs), np.full(ms - 1, 0.5 / hs)],
            [-1, 1],
            format="csr",
        )
        R_blk = sp.kron(I_s, ops.R, format="csr")
        C1 = sp.diags((k3[1:-1, None] / p_int).ravel())
        T = R_blk @ (C1 @ sp.kron(D_s, I_w, format="csr"))
        H = H - (T + T.T)
        C2 = sp.diags((k3[1:-1, None] ** 2 / p_int).ravel())
        rmr = (R_blk.T @ (C2 @ R_blk)).tocsr()
        H = H + (rmr + rmr.T) * 0.5

    H = H.tocsr()
    H.sum_duplicates()
    H.sort_indices()
    B = (1.0 - eps * q[1:-1]).reshape(-1).copy()
    return TransformedOperator(
        eps=float(eps),
        frame=frame,
        grid=grid,
        spectrum=spectrum,
        H=H,
        B=B,
        q=q,
        A11_smid=c_s,
    )


def operator_checks(op: TransformedOperator) -> dict:
    """Measured invariants of an assembled pencil.

    symmetry_defect : max |H - H^T| entry (0.0 by construction)
    b_range         : (min, max) of the weight diagonal, inside [1/2, 3/2]
    minor_defects   : max deviation of the nodal coefficient-table leading
                      minors from their closed forms (1/p, 1, p)
    """
    dif = (op.H - op.H.T).tocsr()
    sym = float(np.abs(dif.data).max()) if dif.nnz else 0.0
    tab = op.coefficient_table()
    m1 = tab.A11
    m2 = tab.A11 * tab.A22 - tab.A12**2
    m3 = (
        tab.A11 * (tab.A22 * tab.A33 - tab.A23**2)
        - tab.A12 * (tab.A12 * tab.A33 - tab.A23 * tab.A13)
        + tab.A13 * (tab.A12 * tab.A23 - tab.A22 * tab.A13)
    )
    return {
        "symmetry_defect": sym,
        "b_range": (float(op.B.min()), float(op.B.max())),
        "minor_defects": (
            float(np.abs(m1 - 1.0 / tab.p).max()),
            float(np.abs(m2 - 1.0).max()),
            float(np.abs(m3 - tab.p).max()),
        ),
        "positive_definite": bool(
            m1.min() > 0 and m2.min() > 0 and m3.min() > 0
        ),
    }


def dump_matrix(op: TransformedOperator, path) -> None:
    """Write H as `row col value` with 0-based indices.

    The header line follows the MatrixMarket coordinate format; only the
    lower triangle is stored (the matrix is exactly symmetric).  Note the
    0-based indices, stated in the comment line.
    """
    coo = sp.tril(op.H).tocoo()
    with open(path, "w", encoding="ascii") as f:
        f.write("%%MatrixMarket matrix coordinate real symmetric\n")
        f.write("% 0-based indices; lower triangle of the symmetric H\n")
        f.write(f"{op.H.shape[0]} {op.H.shape[1]} {coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            f.write(f"{i} {j} {v:.17g}\n")


# ----------------------------------------------------------------------
# coefficient series identity against the order-by-order appliers
# ----------------------------------------------------------------------


def _probe_field(op: TransformedOperator) -> np.ndarray:
    """Deterministic dense probe field with zero end rows."""
    idx = np.arange(op.n, dtype=float)
    z = np.sin(0.7 + 1.9 * idx) + 0.5 * np.cos(0.3 + 0.11 * idx)
    return to_field(op, z)


def series_defect(
    op: TransformedOperator, K: int, field: np.ndarray | None = None
) -> float:
    """Residual of the eps-power-series identity for H, truncated at order K.

    || H z - [eps^-2 S z - sum_{j=1..K} eps^{j-2} F_j z] || / ||H z||,
    with F_j applied by the asymptotic engine on the same grid.  The tail
    is geometric in eps*max|q| (the transverse block is exact for K >= 1);
    it reaches the floating-point floor once (eps max|q|)^{K-1} does.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    spectrum = op.spectrum
    if spectrum is None:
        spectrum = solve_section(op.grid, 2)
    ctx = engine.build_context(op.frame, spectrum)
    Z = _probe_field(op) if field is None else np.asarray(field, float)
    z = to_vector(op, Z)
    acc = to_field(op, op.H @ z)
    acc[1:-1] -= op.eps**-2.0 * (spectrum.ops.S @ Z[1:-1].T).T
    for j in range(1, K + 1):
        acc += op.eps ** (j - 2.0) * engine.apply_Fj(ctx, j, Z)
    return float(
        np.sqrt(np.sum(acc**2)) / np.sqrt(np.sum((op.H @ z) ** 2))
    )


# ----------------------------------------------------------------------
# eigensolve
# ----------------------------------------------------------------------


@dataclass
class DirectSolution:
    """Lowest eigenpairs of H u = lambda B u, ascending and B-orthonormal.

    `residuals` holds ||H u - lambda B u|| / ||B u|| per returned pair;
    `ritz_all` includes the guard values computed beyond the requested K and
    `window_guard` = top certified value minus its residual, the reliable
    upper edge for nearest-eigenvalue claims.
    """

    op: TransformedOperator
    lam: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    ritz_all: np.ndarray
    residuals_all: np.ndarray
    window_guard: float
    history: list = field(default_factory=list)


def _b_normalize(Bd: np.ndarray, U: np.ndarray) -> np.ndarray:
    for j in range(U.shape[1]):
        v = U[:, j]
        for _ in range(2):  # twice-is-enough Gram-Schmidt
            for i in range(j):
                v = v - U[:, i] * (U[:, i] @ (Bd * v))
        nrm = np.sqrt(v @ (Bd * v))
        if not nrm > 0:
            raise SolverFail("degenerate start block")
        U[:, j] = v / nrm
    return U


def _residual_norms(H, Bd, U, lam):
    R = H @ U - (Bd[:, None] * U) * lam[None, :]
    return np.sqrt(np.sum(R**2, axis=0)) / np.sqrt(
        np.sum((Bd[:, None] * U) ** 2, axis=0)
    )


def _rayleigh_ritz(H, Bd, U):
    Hh = U.T @ (H @ U)
    Bh = U.T @ (Bd[:, None] * U)
    w, Y = scipy.linalg.eigh(0.5 * (Hh + Hh.T), 0.5 * (Bh + Bh.T))
    return w, U @ Y


def _axial_eigenvalues(op: TransformedOperator) -> np.ndarray:
    """Eigenvalues of the interior second-difference matrix along the axis."""
    ms, hs, s0 = op.M_s - 2, op.frame.h, op.frame.s0
    m = np.arange(1, ms + 1)
    return (4 / hs**2) * np.sin(m * np.pi * hs / (2 * s0)) ** 2


def _start_block(op: TransformedOperator, nb: int, basis=None) -> np.ndarray:
    """Separable starting vectors: 1D sine profiles times section modes."""
    ms = op.M_s - 2
    theta = _axial_eigenvalues(op)
    if basis is not None:
        lam_sec, phi_cols = basis
        n_sec = min(nb, lam_sec.size)
    else:
        n_sec = min(max(2, nb), op.n_omega - 2)
        spectrum = op.spectrum
        if spectrum is None or spectrum.count < n_sec:
            spectrum = solve_section(op.grid, n_sec)
        lam_sec, phi_cols = spectrum.lam, spectrum.phi.T
        n_sec = spectrum.count
    s0 = op.frame.s0
    s_int = op.frame.s_grid[1:-1]
    pairs = []
    for k in range(n_sec):
        for m in range(1, min(nb, ms) + 1):
            pairs.append((op.eps**-2.0 * lam_sec[k] + theta[m - 1], k, m))
    pairs.sort()
    if len(pairs) < nb:
        raise SolverFail(
            f"only {len(pairs)} separable starts for block size {nb}"
        )
    X = np.empty((op.n, nb))
    for col, (_, k, m) in enumerate(pairs[:nb]):
        X[:, col] = (
            np.sin(m * np.pi * s_int / s0)[:, None] * phi_cols[:, k][None, :]
        ).reshape(-1)
    return X


# Sections up to this many interior nodes get the exact inverse of the
# separable part as preconditioner (needs a dense section eigenbasis).
_SPECTRAL_CUTOFF = 4096


def _separable_preconditioner(op: TransformedOperator):
    """Exact shifted inverse of the separable part of the pencil.

    H splits as eps^-2 S (x) I + I (x) D_s plus curvature/twist blocks that
    are relatively bounded, so (sep - sigma I)^{-1} with sigma = 0.9 eps^-2
    lambda_1(S) is spectrally equivalent to (H - sigma B)^{-1}: it resolves
    the eps^-2 anisotropy that defeats black-box multigrid at small eps.
    Applied via a dense section eigenbasis and an orthonormal DST-I along
    the axis; fully deterministic.
    """
    ops = op.spectrum.ops if op.spectrum is not None else build_operators(op.grid)
    lam_sec, Phi = scipy.linalg.eigh(ops.S.toarray())
    ms, nw = op.M_s - 2, op.n_omega
    theta = _axial_eigenvalues(op)
    sigma = 0.9 * op.eps**-2.0 * lam_sec[0]
    denom = op.eps**-2.0 * lam_sec[None, :] + theta[:, None] - sigma

    def apply(X):
        one_d = X.ndim == 1
        U = X.reshape(ms, nw, -1)
        k = U.shape[2]
        U = (Phi.T @ U.transpose(1, 0, 2).reshape(nw, ms * k)).reshape(
            nw, ms, k
        ).transpose(1, 0, 2)
        U = dst(U, type=1, axis=0, norm="ortho")
        U = U / denom[:, :, None]
        U = dst(U, type=1, axis=0, norm="ortho")
        U = (Phi @ U.transpose(1, 0, 2).reshape(nw, ms * k)).reshape(
            nw, ms, k
        ).transpose(1, 0, 2).reshape(ms * nw, k)
        return U.ravel() if one_d else np.ascontiguousarray(U)

    prec = LinearOperator((op.n, op.n), matvec=apply, matmat=apply, dtype=float)
    return prec, (lam_sec, Phi)


def _make_preconditioner(op: TransformedOperator):
    """(preconditioner, label, section basis or None) for the iterative path."""
    if op.n_omega <= _SPECTRAL_CUTOFF:
        try:
            prec, basis = _separable_preconditioner(op)
            return prec, "separable", basis
        except Exception:
            pass
    H = op.H
    try:
        import pyamg

        # the multigrid setup estimates spectral radii with randomized
        # probes; pin the global state so identical inputs give identical
        # preconditioners (and bit-identical reruns downstream)
        state = np.random.get_state()
        try:
            np.random.seed(1905)
            ml = pyamg.smoothed_aggregation_solver(H, max_coarse=64)
        finally:
            np.random.set_state(state)
        return ml.aspreconditioner(cycle="V"), "amg", None
    except Exception:  # tiny or oddly-structured matrices: diagonal fallback
        d = H.diagonal()
        d = np.where(d > 0, d, 1.0)
        return (
            LinearOperator(H.shape, matvec=lambda x: x / d, dtype=float),
            "jacobi",
            None,
        )


def solve_direct(
    op: TransformedOperator,
    K: int,
    *,
    tol: float = 1e-8,
    dense_cutoff: int = 2048,
    maxiter: int = 150,
    polish_sweeps: int = 4,
) -> DirectSolution:
    """Lowest K eigenpairs of H u = lambda B u, deterministically.

    Residual target per pair: max(tol, 8 eps_mach ||H||_inf) in the
    B-scaled norm; a solve that stagnates above it raises SolverFail with
    the residual history attached.  Guard pairs beyond K are carried so the
    returned window edge is certified too.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    n = op.n
    if K > n - 1:
        raise ValueError(f"K = {K} too large for {n} unknowns")
    H, Bd = op.H, op.B
    hnorm = float(np.abs(H).sum(axis=1).max())
    target = max(tol, 8 * _MACH * hnorm)
    floor_accept = max(target, 40 * _MACH * hnorm)
    nb = min(K + max(3, K), n - 1)
    history: list = []

    if n <= dense_cutoff:
        w, V = scipy.linalg.eigh(
            H.toarray(), np.diag(Bd), subset_by_index=[0, nb - 1]
        )
        res = _residual_norms(H, Bd, V, w)
        history.append({"stage": "dense", "max_resid": float(res.max())})
        return _finish_solution(op, w, V, res, K, nb, floor_accept, history)

    nb = min(nb, n // 4)
    if nb < K:
        raise SolverFail(f"block size {nb} below K = {K}; refine the grid")
    prec, prec_kind, basis = _make_preconditioner(op)
    X = _b_normalize(Bd, _start_block(op, nb, basis))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        w, V = lobpcg(
            H,
            X,
            B=op.b_matrix(),
            M=prec,
            tol=0.25 * target,
            maxiter=maxiter,
            largest=False,
        )
    order = np.argsort(w)
    w, V = w[order], V[:, order]
    res = _residual_norms(H, Bd, V, w)
    history.append(
        {
            "stage": "lobpcg",
            "preconditioner": prec_kind,
            "max_resid": float(res.max()),
            "warnings": [str(c.message) for c in caught],
        }
    )

    for sweep in range(polish_sweeps):
        if res[:K].max() <= target:
            break
        before = res.copy()
        for j in range(nb):
            if res[j] <= target:
                continue
            sigma = float(w[j])
            A_op = LinearOperator(
                H.shape, matvec=lambda x, s=sigma: H @ x - s * (Bd * x)
            )
            rhs = Bd * V[:, j]
            z, _ = minres(
                A_op, rhs, x0=V[:, j].copy(), M=prec, maxiter=200, rtol=1e-13
            )
            nrm = np.sqrt(z @ (Bd * z))
            if nrm > 0:
                cand = z / nrm
                lam_c = float(cand @ (H @ cand)) / float(cand @ (Bd * cand))
                r_c = _residual_norms(H, Bd, cand[:, None], np.array([lam_c]))
                if r_c[0] < res[j]:
                    V[:, j] = cand
        V = _b_normalize(Bd, V)
        w, V = _rayleigh_ritz(H, Bd, V)
        res = _residual_norms(H, Bd, V, w)
        history.append(
            {"stage": f"polish{sweep}", "max_resid": float(res[:K].max())}
        )
        if res[:K].max() >= before[:K].max() * 0.99:  # stagnated
            break

    if res[:K].max() > target and res[:K].max() > floor_accept:
        raise SolverFail(
            f"direct solve stalled at residual {res[:K].max():.3e} "
            f"(target {target:.3e})",
            history=history,
        )
    if res[:K].max() > target:
        history.append(
            {"stage": "floor", "note": "accepted at floating-point floor"}
        )
    return _finish_solution(op, w, V, res, K, nb, floor_accept, history)


def _finish_solution(op, w, V, res, K, nb, floor_accept, history):
    if res[:K].max() > floor_accept:
        raise SolverFail(
            f"residual {res[:K].max():.3e} above limit {floor_accept:.3e}",
            history=history,
        )
    if K >= 2 and not w[0] < w[1]:
        raise SolverFail("ground eigenvalue not simple", history=history)
    if np.any(np.diff(w[:K]) < -floor_accept):
        raise SolverFail("eigenvalues not ascending", history=history)
    window_guard = (
        np.inf if nb >= op.n else float(w[nb - 1] - res[nb - 1])
    )
    return DirectSolution(
        op=op,
        lam=w[:K].copy(),
        vectors=V[:, :K].copy(),
        residuals=res[:K].copy(),
        ritz_all=w.copy(),
        residuals_all=res.copy(),
        window_guard=window_guard,
        history=history,
    )


# ----------------------------------------------------------------------
# certificates and comparison
# ----------------------------------------------------------------------


def residual_certificate(
    op: TransformedOperator,
    lam_val: float,
    psi,
    solution: DirectSolution | None = None,
):
    """(rho, bound_check) for a candidate eigenpair (lam_val, psi).

    rho = ||B^-1/2 (H - lam_val B) psi|| / ||B^1/2 psi|| (B is diagonal, so
    the scaling is exact).  Some eigenvalue of the pencil lies within rho of
    lam_val; when `solution` is given and lam_val + rho sits below its
    certified window edge, bound_check states whether the nearest *computed*
    eigenvalue realizes that distance.  Outside the window the check is
    skipped (bound_check None) with an UnderresolvedWindow warning.
    """
    v = np.asarray(psi, dtype=float)
    if v.ndim == 2:
        v = to_vector(op, v)
    if v.shape != (op.n,):
        raise ValueError(f"expected field ({op.M_s}, {op.n_omega}) or vector ({op.n},)")
    sq = np.sqrt(op.B)
    den = float(np.linalg.norm(sq * v))
    if not den > 0:
        raise ValueError("zero candidate eigenfunction")
    r = op.H @ v - lam_val * (op.B * v)
    rho = float(np.linalg.norm(r / sq)) / den
    if solution is None:
        return rho, None
    if not lam_val + rho < solution.window_guard:
        warnings.warn(
            UnderresolvedWindow(
                f"candidate {lam_val:.6g} + rho {rho:.3g} reaches past the "
                f"computed window edge {solution.window_guard:.6g}; "
                "compute more eigenpairs to certify"
            )
        )
        return rho, None
    dist = float(np.abs(solution.lam - lam_val).min())
    return rho, bool(dist <= rho)


@dataclass
class CompareRow:
    n: int
    m: int
    match_index: int
    lambda_direct: float
    lambda_partial: float
    abs_gap: float
    rho: float
    sin_angle: float
    neighbor_gap: float
    bound_ok: bool | None
    flags: list = field(default_factory=list)


@dataclass
class CompareReport:
    eps: float
    rows: list
    ambiguous: bool

    @property
    def ok(self) -> bool:
        return not self.ambiguous and all(
            r.bound_ok is not False for r in self.rows
        )


def compare(
    solution: DirectSolution, states, eps: float, *, strict: bool = False
) -> CompareReport:
    """Pair expansion partial sums with the direct eigenpairs.

    Each expansion state contributes one row: its truncated eigenvalue is
    matched to the nearest computed eigenvalue, the eigenfunction alignment
    is measured as sin of the B-weighted angle, and the residual certificate
    is evaluated.  Non-injective matching marks the report ambiguous (and
    raises PairingAmbiguous when strict=True); the run continues either way.
    """
    op = solution.op
    if abs(eps - op.eps) > 0:
        raise ValueError(f"states evaluated at eps = {eps}, operator at {op.eps}")
    Bd = op.B
    rows = []
    for st in states:
        lam_p, psi_p = engine.partial_sums(st, eps)
        v = to_vector(op, psi_p)
        j = int(np.argmin(np.abs(solution.lam - lam_p)))
        u = solution.vectors[:, j]
        cu = float(v @ (Bd * u))
        vv = float(v @ (Bd * v))
        uu = float(u @ (Bd * u))
        sin2 = 1.0 - min(1.0, cu**2 / (vv * uu))
        rho, bound_ok = residual_certificate(op, lam_p, v, solution)
        others = np.abs(np.delete(solution.lam, j) - solution.lam[j])
        rows.append(
            CompareRow(
                n=st.n,
                m=st.m,
                match_index=j,
                lambda_direct=float(solution.lam[j]),
                lambda_partial=float(lam_p),
                abs_gap=float(abs(solution.lam[j] - lam_p)),
                rho=rho,
                sin_angle=float(np.sqrt(max(0.0, sin2))),
                neighbor_gap=float(others.min()) if others.size else np.inf,
                bound_ok=bound_ok,
            )
        )
    taken: dict = {}
    ambiguous = False
    for r in rows:
        if r.match_index in taken:
            ambiguous = True
            r.flags.append("pairing")
            taken[r.match_index].flags.append("pairing")
        else:
            taken[r.match_index] = r
    if ambiguous and strict:
        dup = [r.match_index for r in rows if "pairing" in r.flags]
        raise PairingAmbiguous(
            f"direct eigenvalues {sorted(set(dup))} claimed by several modes"
        )
    return CompareReport(eps=float(eps), rows=rows, ambiguous=ambiguous)


def separable_eigenvalues(op: TransformedOperator, count: int):
    """Exact discrete eigenvalues for the straight untwisted rod.

    With all curvatures zero, H splits as a Kronecker sum, so its spectrum
    is eps^-2 * (section eigenvalue) + (4/h^2) sin^2(m pi h / (2 s0)).
    Returns the `count` smallest as (value, n, m) triples, ascending.
    """
    if np.abs(op.q).max() > 0 or np.abs(op.frame.kappa3).max() > 0:
        raise ValueError("separable reference requires a straight untwisted rod")
    spectrum = op.spectrum
    n_sec = min(count + 1, op.n_omega - 2)
    if spectrum is None or spectrum.count < n_sec:
        spectrum = solve_section(op.grid, n_sec)
    hs, s0 = op.frame.h, op.frame.s0
    out = []
    for k in range(spectrum.count):
        for m in range(1, min(count + 1, op.M_s - 2) + 1):
            theta = (4 / hs**2) * np.sin(m * np.pi * hs / (2 * s0)) ** 2
            out.append((op.eps**-2.0 * spectrum.lam[k] + theta, k + 1, m))
    out.sort()
    return out[:count]
