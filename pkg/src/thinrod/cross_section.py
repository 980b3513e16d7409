"""Cross-section eigenproblem on a masked uniform grid.

5-point Dirichlet Laplacian with zero extension outside the mask.
Discrete inner product: <u,v> = h^2 sum(u v) over interior nodes.
Eigenvectors are normalized in that inner product and sign-fixed so the
largest-magnitude entry is positive.

Built-in sections (square, disk) are centered on their centroid, with an
optional `center` offset that translates the coordinates (so the
centroid sits at `center`). Mask files are centered on their bounding
rectangle, which lets a mask be deliberately off-center.

Accuracy caveat: the mask is a staircase set of grid nodes, so for a
smooth curved section the computational domain is the staircase polygon,
not the section itself. Eigenvalues then converge at O(h) and boundary
quantities keep an O(h) collar layer; in particular the rotational
coefficient of a disk, exactly zero in the limit, measures at ~1e-3 on
practical grids. Grid-aligned sections (rectangles, mask unions of
cells) do not suffer from this and converge at O(h^2).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import label as _cc_label
from scipy.sparse.linalg import eigsh, splu

from .errors import ConfigError, MultipleEigenvalue, SolvabilityViolation, SolverFail

_ORTHO_TOL = 1e-8
_RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class SectionGrid:
    """Masked uniform grid over a bounding rectangle.

    mask[i, j] True marks an interior node; idx maps to flat indices.
    xi2 runs along axis 0, xi3 along axis 1.
    """

    kind: str
    h: float
    mask: np.ndarray
    idx: np.ndarray
    xi2: np.ndarray
    xi3: np.ndarray

    @property
    def n_interior(self) -> int:
        return self.xi2.size


def _finish_grid(kind, h, mask, x2, x3) -> SectionGrid:
    if int(mask.sum()) < 25:
        raise ConfigError("section", "mask must contain at least 25 interior nodes")
    lab, ncomp = _cc_label(mask)
    if ncomp != 1:
        raise ConfigError("section", f"mask must be connected ({ncomp} components)")
    idx = -np.ones(mask.shape, dtype=np.int64)
    idx[mask] = np.arange(int(mask.sum()))
    X2, X3 = np.meshgrid(x2, x3, indexing="ij")
    g = SectionGrid(kind, float(h), mask, idx, X2[mask], X3[mask])
    for a in (g.mask, g.idx, g.xi2, g.xi3):
        a.setflags(write=False)
    return g


def square_grid(side: float, n: int, center=(0.0, 0.0)) -> SectionGrid:
    """n x n interior nodes, h = side/(n+1), centroid at `center`."""
    if side <= 0 or n < 5:
        raise ConfigError("section", "square needs side > 0 and n >= 5")
    h = side / (n + 1)
    x = -side / 2 + h * (1 + np.arange(n))
    return _finish_grid(
        "square", h, np.ones((n, n), dtype=bool), x + center[0], x + center[1]
    )


def disk_grid(radius: float, n: int, center=(0.0, 0.0)) -> SectionGrid:
    """Staircase disk on an n x n bounding-box grid, h = 2*radius/(n+1)."""
    if radius <= 0 or n < 7:
        raise ConfigError("section", "disk needs radius > 0 and n >= 7")
    h = 2 * radius / (n + 1)
    x = -radius + h * (1 + np.arange(n))
    X2, X3 = np.meshgrid(x, x, indexing="ij")
    mask = X2**2 + X3**2 < radius**2
    return _finish_grid("disk", h, mask, x + center[0], x + center[1])


def mask_grid(path) -> SectionGrid:
    """Load a text mask: first line "ny nz h", then ny rows of nz 0/1 tokens."""
    lines = Path(path).read_text().strip().splitlines()
    try:
        ny_s, nz_s, h_s = lines[0].split()
        ny, nz, h = int(ny_s), int(nz_s), float(h_s)
    except (ValueError, IndexError):
        raise ConfigError("section.mask_file", "header must be 'ny nz h'")
    if h <= 0 or ny < 1 or nz < 1 or len(lines) != ny + 1:
        raise ConfigError("section.mask_file", "bad header or row count")
    rows = []
    for k, line in enumerate(lines[1:]):
        toks = line.split() if " " in line else list(line.strip())
        if len(toks) != nz or any(t not in ("0", "1") for t in toks):
            raise ConfigError("section.mask_file", f"row {k}: expected {nz} 0/1 tokens")
        rows.append([t == "1" for t in toks])
    mask = np.array(rows, dtype=bool)
    x2 = h * (np.arange(ny) - (ny - 1) / 2)
    x3 = h * (np.arange(nz) - (nz - 1) / 2)
    return _finish_grid("mask", h, mask, x2, x3)


def _neighbor_pairs(idx, axis):
    if axis == 0:
        a, b = idx[:-1, :], idx[1:, :]
    else:
        a, b = idx[:, :-1], idx[:, 1:]
    m = (a >= 0) & (b >= 0)
    return a[m], b[m]


def laplacian(grid: SectionGrid) -> sp.csr_matrix:
    """S = -Delta_h, SPD, exactly symmetric."""
    n = grid.n_interior
    h2 = grid.h**2
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.full(n, 4.0 / h2)]
    for ax in (0, 1):
        a, b = _neighbor_pairs(grid.idx, ax)
        rows += [a, b]
        cols += [b, a]
        vals += [np.full(a.size, -1.0 / h2)] * 2
    S = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    S.sum_duplicates()
    return S


def _first_difference(grid: SectionGrid, axis) -> sp.csr_matrix:
    """Central difference with zero extension; exactly skew-symmetric."""
    n = grid.n_interior
    a, b = _neighbor_pairs(grid.idx, axis)
    w = 1.0 / (2 * grid.h)
    return sp.csr_matrix(
        (
            np.concatenate([np.full(a.size, w), np.full(a.size, -w)]),
            (np.concatenate([a, b]), np.concatenate([b, a])),
        ),
        shape=(n, n),
    )


def _neighbor_average(grid: SectionGrid, axis) -> sp.csr_matrix:
    n = grid.n_interior
    a, b = _neighbor_pairs(grid.idx, axis)
    half = np.full(a.size, 0.5)
    return sp.csr_matrix(
        (
            np.concatenate([half, half]),
            (np.concatenate([a, b]), np.concatenate([b, a])),
        ),
        shape=(n, n),
    )


@dataclass
class SectionOperators:
    """Sparse stencil family on one grid, built once and shared."""

    S: sp.csr_matrix
    D2: sp.csr_matrix
    D3: sp.csr_matrix
    M2: sp.csr_matrix
    M3: sp.csr_matrix
    R: sp.csr_matrix  # xi3*D2 - xi2*D3, exactly skew-symmetric


def build_operators(grid: SectionGrid) -> SectionOperators:
    D2 = _first_difference(grid, 0)
    D3 = _first_difference(grid, 1)
    R = sp.diags(grid.xi3) @ D2 - sp.diags(grid.xi2) @ D3
    return SectionOperators(
        laplacian(grid), D2, D3, _neighbor_average(grid, 0),
        _neighbor_average(grid, 1), R.tocsr(),
    )


@dataclass
class SectionSpectrum:
    """Lowest eigenpairs plus the derived per-mode coefficients.

    Arrays are indexed 0-based; mode numbers n in the API are 1-based.
    C[k] = |R phi|^2 by the closure quadrature (interior nodes plus the
    zero-extension ring, trapezoid weights), which keeps the boundary
    strip of |R phi|^2 and converges at O(h^2) on grid-aligned sections.
    C_int[k] is the plain interior sum; it pairs with the skew stencil R
    and is what the expansion recurrence needs for its solvability
    identities to hold exactly on the grid. m2/m3 are the linear moments
    of phi^2, a2/a3 the neighbor-average moments <M phi, phi> (discrete
    factors, -> 1 + O(h^2), used by the reduced-operator assembly for
    the same reason as C_int).
    """

    grid: SectionGrid
    ops: SectionOperators
    lam: np.ndarray
    phi: np.ndarray  # (count, n_interior)
    C: np.ndarray
    C_int: np.ndarray
    m2: np.ndarray
    m3: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    _factors: dict = field(default_factory=dict, repr=False)

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def count(self) -> int:
        return self.lam.size

    def mode(self, n: int):
        """1-based accessor: (lambda_n, phi_n)."""
        if not 1 <= n <= self.count:
            raise IndexError(f"mode {n} not stored (count={self.count})")
        return float(self.lam[n - 1]), self.phi[n - 1]


def solve_section(grid: SectionGrid, count: int) -> SectionSpectrum:
    """Lowest `count` Dirichlet eigenpairs, ascending, h^2-orthonormal."""
    if count < 1:
        raise ValueError("count must be >= 1")
    ops = build_operators(grid)
    n = grid.n_interior
    if count >= n - 1:
        raise SolverFail(f"count {count} too large for {n} interior nodes")
    v0 = np.ones(n) / np.sqrt(n)
    try:
        lam, vecs = eigsh(ops.S, k=count, sigma=0.0, which="LM", v0=v0, tol=0)
    except Exception as e:  # ArpackError / ArpackNoConvergence
        raise SolverFail(f"section eigensolve failed: {e}") from e
    order = np.argsort(lam)
    lam = lam[order]
    phi = vecs[:, order].T.copy()
    for k in range(count):
        phi[k] /= grid.h * np.sqrt(np.sum(phi[k] ** 2))
        if phi[k][np.argmax(np.abs(phi[k]))] < 0:
            phi[k] = -phi[k]
    if np.any(lam <= 0):
        raise SolverFail("nonpositive section eigenvalue")

    h2 = grid.h**2
    C = np.array([_closure_rotational(grid, p) for p in phi])
    C_int = np.array([h2 * np.sum((ops.R @ p) ** 2) for p in phi])
    m2 = np.array([h2 * np.sum(grid.xi2 * p**2) for p in phi])
    m3 = np.array([h2 * np.sum(grid.xi3 * p**2) for p in phi])
    a2 = np.array([h2 * np.sum(p * (ops.M2 @ p)) for p in phi])
    a3 = np.array([h2 * np.sum(p * (ops.M3 @ p)) for p in phi])
    return SectionSpectrum(grid, ops, lam, phi, C, C_int, m2, m3, a2, a3)


def assert_simple(spectrum: SectionSpectrum, n: int, gap_tol: float = 1e-6) -> None:
    """Refuse modes that are not numerically simple (relative gap test)."""
    lam, _ = spectrum.mode(n)
    if n + 1 > spectrum.count:
        raise IndexError(f"need mode {n + 1} stored to assess the gap above mode {n}")
    gap = spectrum.lam[n] - lam
    if n >= 2:
        gap = min(gap, lam - spectrum.lam[n - 2])
    if gap <= gap_tol * lam:
        raise MultipleEigenvalue(
            f"section mode {n}: relative gap {gap / lam:.3e} <= {gap_tol:g}"
        )


def _closure_rotational(grid: SectionGrid, phi: np.ndarray) -> float:
    """h^2 sum of w |R phi|^2 over interior nodes plus the zero-extension ring.

    On the ring the derivative is one-sided into the domain (second order
    where two closure values exist). Trapezoid weights halve nodes that
    end a grid line along an axis, so the half-cell boundary strip of
    |R phi|^2 is integrated consistently instead of dropped. On staircase
    masks of smooth curved sections the ring does not lie on the true
    boundary, which leaves an O(h) layer; see the module docstring.
    """
    ny, nz = grid.mask.shape
    h = grid.h
    P = np.zeros((ny + 4, nz + 4))
    P[2:-2, 2:-2][grid.mask] = phi
    inside = np.zeros((ny + 4, nz + 4), dtype=bool)
    inside[2:-2, 2:-2] = grid.mask
    ring = np.zeros_like(inside)
    for ax, k in ((0, 1), (0, -1), (1, 1), (1, -1)):
        ring |= np.roll(inside, k, axis=ax)
    clo = ring | inside
    ring &= ~inside

    i0, j0 = map(int, np.argwhere(grid.mask)[0])
    p0 = int(grid.idx[i0, j0])
    x2 = grid.xi2[p0] + h * (np.arange(ny + 4) - (i0 + 2))
    x3 = grid.xi3[p0] + h * (np.arange(nz + 4) - (j0 + 2))
    X2, X3 = np.meshgrid(x2, x3, indexing="ij")

    def deriv(axis):
        s = lambda k: np.roll(clo, -k, axis=axis)
        v = lambda k: np.roll(P, -k, axis=axis)
        up, up2, dn, dn2 = s(1), s(2), s(-1), s(-2)
        d = np.zeros_like(P)
        c = up & dn
        d[c] = (v(1)[c] - v(-1)[c]) / (2 * h)
        f = ~c & up & up2
        d[f] = (-3 * P[f] + 4 * v(1)[f] - v(2)[f]) / (2 * h)
        b = ~c & ~f & dn & dn2
        d[b] = (3 * P[b] - 4 * v(-1)[b] + v(-2)[b]) / (2 * h)
        f1 = ~c & ~f & ~b & up
        d[f1] = (v(1)[f1] - P[f1]) / h
        b1 = ~c & ~f & ~b & ~f1 & dn
        d[b1] = (P[b1] - v(-1)[b1]) / h
        return d, np.where(up & dn, 1.0, 0.5)

    d2, w2 = deriv(0)
    d3, w3 = deriv(1)
    rp = X3 * d2 - X2 * d3
    return float(h * h * np.sum((w2 * w3 * rp * rp)[clo]))


def rotational_coefficient(spectrum: SectionSpectrum, n: int):
    """C_n = |R phi_n|^2 (closure quadrature) and the interior field R phi_n."""
    _, p = spectrum.mode(n)
    return _closure_rotational(spectrum.grid, p), spectrum.ops.R @ p


def deflated_resolvent(
    spectrum: SectionSpectrum, n: int, rhs: np.ndarray, noise_floor: float = 0.0
) -> np.ndarray:
    """u with (S - lambda_n) u = P_n rhs, <u, phi_n> = 0.

    Bordered sparse LU, factorized once per n, reused across calls.
    noise_floor: magnitude of the rhs before cancellation; rows whose norm
    fell below it are rounding residue and are not solvability-checked
    against themselves.
    """
    lam, phi = spectrum.mode(n)
    h2 = spectrum.h**2
    rhs = np.asarray(rhs, dtype=float)
    one_d = rhs.ndim == 1
    rhs2 = rhs[None, :] if one_d else rhs

    nrm = np.sqrt(h2 * np.sum(rhs2**2, axis=1))
    dot = h2 * (rhs2 @ phi)
    floor = np.maximum(np.max(nrm) if nrm.size else 0.0, noise_floor)
    bad = np.abs(dot) > _ORTHO_TOL * np.maximum(nrm, floor)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise SolvabilityViolation(
            f"section rhs row {k}: defect {abs(dot[k]):.3e} vs {nrm[k]:.3e}"
        )

    lu = spectrum._factors.get(n)
    if lu is None:
        K = sp.bmat(
            [[spectrum.ops.S - lam * sp.eye(phi.size), phi[:, None]], [phi[None, :], None]],
            format="csc",
        )
        lu = splu(K)
        spectrum._factors[n] = lu

    B = np.concatenate([rhs2, np.zeros((rhs2.shape[0], 1))], axis=1)
    out = lu.solve(B.T).T[:, :-1]
    proj = rhs2 - dot[:, None] * phi[None, :]
    res = np.sqrt(h2 * np.sum(((spectrum.ops.S @ out.T).T - lam * out - proj) ** 2, axis=1))
    bad = res > _RESIDUAL_TOL * np.maximum(np.maximum(nrm, noise_floor), 1e-300)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise SolverFail(f"deflated section solve residual {res[k]:.3e} (row {k})")
    return out[0] if one_d else out
