"""Order-by-order expansion of the rod eigenvalue problem.

The small parameter eps scales the cross-section; matching powers of
eps in (H_eps - lambda B_eps) psi = 0 on the straightened rod yields a
recurrence: each order solves a deflated section problem per s-node, a
deflated reduced 1D problem in s, and fixes one eigenvalue coefficient
lambda_i through the solvability (orthogonality) conditions.

Everything here is built from the same discrete stencils the direct
solver uses, so the solvability conditions hold to rounding, not just
to discretization order. The identities that make that work, with
q(s,xi) = kappa1 xi2 - kappa2 xi3 linear in xi and arithmetic-mean
edge coefficients:

    div_xi(q grad u)   = q Delta_h u + (k1 D2 - k2 D3) u     (exact)
    Delta_h(q u)       = q Delta_h u + 2 (k1 D2 - k2 D3) u   (exact)
    <D phi, phi>       = 0, <R phi, phi> = 0                 (skewness)
    <M2 phi, phi> = a2, <R phi, R phi> = C_int               (weights of
                                 the reduced potential, see curve_operator)

s-direction flux coefficients use the arithmetic mean of nodal q first
and the power afterwards, matching the eps-Taylor expansion of the
direct operator's 1/(1 - eps q_mid) coefficient term by term. Fields
are (M_s, n_section) arrays on the full s-grid with zero end rows.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .cross_section import SectionSpectrum, assert_simple, deflated_resolvent
from .curve_operator import (
    ReducedOperator,
    build_reduced,
    deflated_reduced_resolvent,
    solve_reduced,
)
from .errors import EpsilonOutOfRange
from .geometry import FrameField

TensorField = np.ndarray  # (M_s, n_interior) values, zero rows at s = 0, s0

N_MAX_DEFAULT = 6


def q_field(frame: FrameField, spectrum: SectionSpectrum, n: int = 1):
    """Nodal q = kappa1 xi2 - kappa2 xi3 and its mode moment q_n(s)."""
    g = spectrum.grid
    q = frame.kappa1[:, None] * g.xi2[None, :] - frame.kappa2[:, None] * g.xi3[None, :]
    q_n = frame.kappa1 * spectrum.m2[n - 1] - frame.kappa2 * spectrum.m3[n - 1]
    return q, q_n


@dataclass
class EngineContext:
    """Shared immutable data for one (frame, section, n) configuration."""

    frame: FrameField
    spectrum: SectionSpectrum
    n: int
    lam_n: float
    phi: np.ndarray
    Rphi: np.ndarray
    q: TensorField
    q_n: np.ndarray
    C_n: float  # interior |R phi|^2, the reduced-potential coefficient
    reduced: ReducedOperator


def build_context(frame: FrameField, spectrum: SectionSpectrum, n: int = 1) -> EngineContext:
    assert_simple(spectrum, n)
    lam_n, phi = spectrum.mode(n)
    q, q_n = q_field(frame, spectrum, n)
    k = n - 1
    reduced = build_reduced(
        frame,
        float(spectrum.C_int[k]),
        n=n,
        transverse_weights=(float(spectrum.a2[k]), float(spectrum.a3[k])),
    )
    return EngineContext(
        frame, spectrum, n, lam_n, phi, spectrum.ops.R @ phi, q, q_n,
        float(spectrum.C_int[k]), reduced,
    )


def _sec(M, U):
    """Apply a section operator to every s-row."""
    return (M @ U.T).T


def _f1_minus_lq(ctx: EngineContext, U: TensorField) -> TensorField:
    """(F_1 - lam_n q) U; F_1 = -div_xi(q grad_xi .) in flux form.

    Uses the exact factorization q (S - lam_n) - (k1 D2 - k2 D3); this is
    the same matrix as the midpoint-flux assembly because q is linear in xi.
    """
    ops = ctx.spectrum.ops
    out = ctx.q * (_sec(ops.S, U) - ctx.lam_n * U)
    out -= ctx.frame.kappa1[:, None] * _sec(ops.D2, U)
    out += ctx.frame.kappa2[:, None] * _sec(ops.D3, U)
    return out


def apply_Fj(ctx: EngineContext, j: int, U: TensorField) -> TensorField:
    """The order-j coupling operator, symmetric by construction.

    j = 1: -div_xi(q grad_xi .).
    j >= 2: d/ds c d/ds + R k3 c d/ds + d/ds k3 c R + k3^2 R c R with
    c = q^(j-2); s-fluxes with mean-then-power midpoint coefficients,
    first s-derivatives central, zero extension at the rod ends.
    """
    if j < 1:
        raise ValueError("j must be >= 1")
    ops = ctx.spectrum.ops
    if j == 1:
        out = ctx.q * _sec(ops.S, U)
        out -= ctx.frame.kappa1[:, None] * _sec(ops.D2, U)
        out += ctx.frame.kappa2[:, None] * _sec(ops.D3, U)
        return out

    hs = ctx.frame.h
    k3 = ctx.frame.kappa3
    p = j - 2
    c = np.ones_like(ctx.q) if p == 0 else ctx.q**p
    c_mid = np.ones_like(ctx.q[:-1]) if p == 0 else (0.5 * (ctx.q[1:] + ctx.q[:-1])) ** p

    out = np.zeros_like(U)
    flux = c_mid * (U[1:] - U[:-1]) / hs
    out[1:-1] = (flux[1:] - flux[:-1]) / hs

    DsU = np.zeros_like(U)
    DsU[1:-1] = (U[2:] - U[:-2]) / (2 * hs)
    out[1:-1] += _sec(ops.R, k3[:, None] * c * DsU)[1:-1]

    W = k3[:, None] * c * _sec(ops.R, U)
    out[1:-1] += (W[2:] - W[:-2]) / (2 * hs)

    out[1:-1] += (k3**2)[1:-1, None] * _sec(ops.R, c * _sec(ops.R, U))[1:-1]
    return out


def _ftilde(ctx: EngineContext, V: TensorField) -> TensorField:
    """F~ V = (1/2)(F_1 - lam_n q)(q V) + F_2 V."""
    return 0.5 * _f1_minus_lq(ctx, ctx.q * V) + apply_Fj(ctx, 2, V)


@dataclass
class ExpansionState:
    """Coefficients and correction fields of one (n, m) expansion.

    lam holds lambda_{-2} .. lambda_{N-2} (lam[i + 2] = lambda_i);
    lam_diag is the next, truncated coefficient lambda_{N-1}, kept as a
    convergence hint. Psi rows are the longitudinal profiles Psi_0..Psi_N
    (Psi_N = 0 by truncation), psi_tilde and psi the correction fields,
    with psi_i = psi_tilde_i + (1/2) Psi_{i-1} q phi + Psi_i phi.
    solve_defects records the relative orthogonality defect of every
    deflated solve's right-hand side.
    """

    n: int
    m: int
    N: int
    lam: np.ndarray
    lam_diag: float
    Psi: np.ndarray
    psi_tilde: np.ndarray
    psi: np.ndarray
    ctx: EngineContext
    lam0: float
    solve_defects: list = field(default_factory=list)

    def lam_i(self, i: int) -> float:
        """lambda_i, i from -2 to N-2."""
        return float(self.lam[i + 2])

    @property
    def max_defect(self) -> float:
        return max((d for _, d in self.solve_defects), default=0.0)


def _inner(ctx: EngineContext, A: TensorField, B: TensorField) -> float:
    return float(ctx.frame.h * ctx.spectrum.h**2 * np.sum(A * B))


def _rel_defect(ctx, G: TensorField, scale: float) -> float:
    """Max per-s-node |<G, phi>| / ||G||, floored by the pre-cancellation scale."""
    h2 = ctx.spectrum.h**2
    dots = np.abs(h2 * (G[1:-1] @ ctx.phi))
    nrms = np.sqrt(h2 * np.sum(G[1:-1] ** 2, axis=1))
    floor = max(float(nrms.max(initial=0.0)), scale, 1e-300)
    return float((dots / np.maximum(nrms, floor)).max(initial=0.0))


def _row_scale(h2: float, T: TensorField) -> float:
    return float(np.sqrt(h2 * np.sum(T[1:-1] ** 2, axis=1)).max(initial=0.0))


def run_recurrence(
    frame: FrameField, spectrum: SectionSpectrum, n: int, m: int, N: int
) -> ExpansionState:
    """Run the recurrence to order N for section mode n, reduced mode m."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if N > N_MAX_DEFAULT:
        warnings.warn(
            f"N = {N} > {N_MAX_DEFAULT}: finite-difference error in high "
            "s-derivatives of the correction fields may dominate",
            stacklevel=2,
        )
    ctx = build_context(frame, spectrum, n)
    modes = solve_reduced(ctx.reduced, m)
    md = modes[m - 1]
    lam0, Psi0 = md.lam0, md.Psi0

    M_s = frame.s_grid.size
    nw = ctx.phi.size
    hs = frame.h

    # lam_all[k] = lambda_{k-2}; filled through lambda_{N-1}
    lam_all = np.zeros(N + 2)
    lam_all[0] = ctx.lam_n
    lam_all[1] = 0.0  # <(k1 D2 - k2 D3) phi, phi> = 0 by skewness
    lam_all[2] = lam0

    Psi = np.zeros((N + 1, M_s))
    Psi[0] = Psi0
    psi_tilde = np.zeros((N + 1, M_s, nw))
    psi = np.zeros((N + 1, M_s, nw))
    qphi = ctx.q * ctx.phi[None, :]
    psi0 = Psi0[:, None] * ctx.phi[None, :]
    psi[0] = psi0
    defects = []

    h2 = ctx.spectrum.h**2
    # scale of the largest quantity the recurrence has touched; right-hand
    # sides more than 10 orders below it are cancellation residue and their
    # solutions are exact zeros, so structural zeros propagate exactly
    base = max(abs(ctx.lam_n), abs(lam0))
    Ft_next = np.zeros((M_s, nw))  # F~_{i+1} entering step i; F~_2 = 0
    for i in range(1, N):
        # section solve for psi~_{i+1}
        t = _ftilde(ctx, Psi[i - 1][:, None] * ctx.phi[None, :])
        g_scale = max(_row_scale(h2, Ft_next), _row_scale(h2, t))
        G = Ft_next + t
        for j in range(2, i + 2):
            t = lam_all[j] * psi[i + 1 - j]
            g_scale = max(g_scale, _row_scale(h2, t))
            G += t
        base = max(base, g_scale)
        if _row_scale(h2, G) <= 1e-10 * base:
            defects.append((f"section i={i + 1} (zero rhs)", 0.0))
        else:
            defects.append((f"section i={i + 1}", _rel_defect(ctx, G, g_scale)))
            psi_tilde[i + 1][1:-1] = deflated_resolvent(
                spectrum, n, G[1:-1], noise_floor=g_scale
            )

        # F~_{i+2}
        Ft = _f1_minus_lq(ctx, psi_tilde[i + 1])
        Ft += apply_Fj(ctx, 2, psi_tilde[i] + 0.5 * Psi[i - 1][:, None] * qphi)
        for j in range(3, i + 3):
            Ft += apply_Fj(ctx, j, psi[i + 2 - j]) - lam_all[j - 1] * ctx.q * psi[i + 2 - j]
        Ft_next = Ft

        # lambda_i from the two solvability sums
        lam_i = -_inner(ctx, Ft, psi0)
        for j in range(i):
            lam_i -= 0.5 * lam_all[j + 2] * hs * float(
                np.sum(Psi[i - j - 1] * Psi0 * ctx.q_n)
            )
        lam_all[i + 2] = lam_i

        # reduced solve for Psi_i
        def _p_scale(v):
            return float(np.sqrt(hs * np.sum(v[1:-1] ** 2)))

        f = h2 * (Ft @ ctx.phi)
        for j in range(i):
            f += 0.5 * lam_all[j + 2] * Psi[i - j - 1] * ctx.q_n
        rhs = f.copy()
        r_scale = _p_scale(f)
        for j in range(1, i + 1):
            t = lam_all[j + 2] * Psi[i - j]
            r_scale = max(r_scale, _p_scale(t))
            rhs += t
        base = max(base, r_scale)
        nrm = _p_scale(rhs)
        if nrm <= 1e-10 * base:
            defects.append((f"reduced i={i} (zero rhs)", 0.0))
        else:
            defects.append(
                (
                    f"reduced i={i}",
                    float(abs(hs * np.dot(rhs[1:-1], Psi0[1:-1])) / max(nrm, r_scale)),
                )
            )
            Psi[i] = deflated_reduced_resolvent(ctx.reduced, md, rhs, noise_floor=r_scale)

        psi[i] = psi_tilde[i] + 0.5 * Psi[i - 1][:, None] * qphi + Psi[i][:, None] * ctx.phi[None, :]

    # truncation: Psi_N = 0
    psi[N] = psi_tilde[N] + 0.5 * Psi[N - 1][:, None] * qphi

    return ExpansionState(
        n=n,
        m=m,
        N=N,
        lam=lam_all[: N + 1].copy(),
        lam_diag=float(lam_all[N + 1]),
        Psi=Psi,
        psi_tilde=psi_tilde,
        psi=psi,
        ctx=ctx,
        lam0=lam0,
        solve_defects=defects,
    )


def lambda1_closed(ctx: EngineContext, Psi0: np.ndarray, lam0: float) -> float:
    """First-order coefficient from the closed-form quadrature,
    (psi0, Q psi0) + 2 (R psi0, k3^2 q R psi0), with
    Q = (2 lam0 - (2 C_n - 1/2) k3^2) q + (1/2) d^2q/ds^2 + (1/2) k3' (R q);
    R q = kappa1 xi3 + kappa2 xi2 evaluated in closed form.
    """
    fr = ctx.frame
    g = ctx.spectrum.grid
    hs, h2 = fr.h, ctx.spectrum.h**2
    k3 = fr.kappa3

    d2q = np.zeros_like(ctx.q)
    d2q[1:-1] = (ctx.q[2:] - 2 * ctx.q[1:-1] + ctx.q[:-2]) / hs**2
    Rq = fr.kappa1[:, None] * g.xi3[None, :] + fr.kappa2[:, None] * g.xi2[None, :]
    Qf = (
        (2 * lam0 - (2 * ctx.C_n - 0.5) * k3**2)[:, None] * ctx.q
        + 0.5 * d2q
        + 0.5 * fr.kappa3_prime[:, None] * Rq
    )
    psi0 = Psi0[:, None] * ctx.phi[None, :]
    Rpsi0 = Psi0[:, None] * ctx.Rphi[None, :]
    term1 = hs * h2 * np.sum(psi0 * Qf * psi0)
    term2 = 2 * hs * h2 * np.sum(Rpsi0 * (k3**2)[:, None] * ctx.q * Rpsi0)
    return float(term1 + term2)


def partial_sums(state: ExpansionState, eps: float):
    """(lambda_{eps,N}, psi_{eps,N}): truncated eigenvalue and field sums."""
    check_epsilon(state.ctx.q, eps)
    lam = state.lam[0] / eps**2
    for i in range(state.N - 1):
        lam += eps**i * state.lam[i + 2]
    psi_eps = np.zeros_like(state.psi[0])
    for i in range(state.N + 1):
        psi_eps += eps**i * state.psi[i]
    return float(lam), psi_eps


def check_epsilon(q: TensorField, eps: float) -> None:
    """Require 0 < eps < 0.5/max|q| so the weight 1 - eps q stays above 1/2."""
    qmax = float(np.abs(q).max())
    bound = 0.5 / qmax if qmax > 0 else np.inf
    if not 0 < eps < bound:
        raise EpsilonOutOfRange(f"eps = {eps:g} outside (0, {bound:g})")


def order_equation_residual(state: ExpansionState, i: int) -> float:
    """Grid norm of the order-i equation defect,
    (S - lam_n) psi_i - sum_j lambda_{j-2} psi_{i-j} - F_i,
    F_i = sum_{j=1}^{i} (F_j - lambda_{j-3} q) psi_{i-j}; rounding-level
    for 0 <= i <= N-2 (higher orders are truncated).
    """
    if not 0 <= i <= state.N - 2:
        raise ValueError("residual defined for 0 <= i <= N-2")
    ctx = state.ctx
    r = _sec(ctx.spectrum.ops.S, state.psi[i]) - ctx.lam_n * state.psi[i]
    for j in range(1, i + 1):
        r -= state.lam[j] * state.psi[i - j]  # lam[j] = lambda_{j-2}
        r -= apply_Fj(ctx, j, state.psi[i - j])
        if j != 2:  # lambda_{j-3}: lam_n at j=1, 0 at j=2
            r += state.lam[j - 1] * ctx.q * state.psi[i - j]
    return float(np.sqrt(ctx.frame.h * ctx.spectrum.h**2 * np.sum(r**2)))
