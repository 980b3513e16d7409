"""Tests for the direct straightened-domain eigensolve.

Expected values come from closed forms computed in each test: Kronecker-sum
spectra for the straight rod, the exact geometric-series remainder for the
coefficient table, and the quasimode distance bound, which is an identity
for symmetric pencils.
"""

import numpy as np
import pytest
import scipy.sparse as sp

from thinrod import asymptotic_engine as engine
from thinrod.cross_section import laplacian, solve_section, square_grid
from thinrod.direct_oracle import (
    assemble,
    compare,
    dump_matrix,
    operator_checks,
    residual_certificate,
    separable_eigenvalues,
    series_defect,
    solve_direct,
    to_field,
    to_vector,
)
from thinrod.errors import (
    EpsilonOutOfRange,
    PairingAmbiguous,
    SolverFail,
    UnderresolvedWindow,
)
from thinrod.geometry import CurveSpec, build_frame


def _square(n=12, side=1.0, center=(0.0, 0.0), count=3):
    return solve_section(square_grid(side, n, center=center), count=count)


def _sine_eigenvalue(m, h, s0):
    return (4.0 / h**2) * np.sin(m * np.pi * h / (2 * s0)) ** 2


def _helix_op(eps=0.25, n=12, M_s=24):
    fr = build_frame(
        CurveSpec("helix", s0=3.0, a=1.0, b=0.5, twist="linear", twist_rate=0.6),
        M_s,
    )
    spec = _square(n=n, center=(0.12, -0.07))
    return assemble(fr, spec, eps)


# ----------------------------------------------------------------------
# assembly
# ----------------------------------------------------------------------


def test_straight_rod_assembles_to_kronecker_sum():
    # with every curvature zero the pencil must reduce, bit for bit, to
    # 1D Dirichlet tridiagonal (x) I + eps^-2 I (x) section Laplacian, B = I
    fr = build_frame(CurveSpec("straight", s0=np.pi), 20)
    grid = square_grid(1.0, 10)
    eps = 0.1
    op = assemble(fr, grid, eps)
    ms, nw = fr.s_grid.size - 2, grid.n_interior
    hs = fr.h
    diag0 = np.full(ms * nw, 2.0 / hs**2)
    diag1 = np.full((ms - 1) * nw, -1.0 / hs**2)
    ref = sp.diags([diag1, diag0, diag1], [-nw, 0, nw], format="csr")
    ref = ref + sp.kron(sp.identity(ms, format="csr"), laplacian(grid), format="csr") * (
        eps**-2.0
    )
    dif = (op.H - ref).tocsr()
    assert dif.nnz == 0 or np.abs(dif.data).max() == 0.0
    assert np.all(op.B == 1.0)
    tab = op.coefficient_table()
    assert np.all(tab.A11 == 1.0) and np.all(tab.A22 == 1.0) and np.all(tab.A33 == 1.0)
    assert np.all(tab.A12 == 0.0) and np.all(tab.A13 == 0.0) and np.all(tab.A23 == 0.0)


def test_assemble_rejects_large_epsilon():
    fr = build_frame(CurveSpec("circular_arc", s0=2.0, radius=1.0), 20)
    grid = square_grid(1.0, 10)
    qmax = np.abs(grid.xi2).max() / 1.0  # |q| = |xi2| / R on the arc
    with pytest.raises(EpsilonOutOfRange):
        assemble(fr, grid, 0.5 / qmax * 1.05)


def test_coefficient_taylor_remainder_is_geometric():
    # |1/(1-x) - sum_{k<=3} x^k| = x^4/(1-x) exactly; the sup over nodes is
    # attained at the most positive eps*q
    fr = build_frame(CurveSpec("circular_arc", s0=2.0, radius=1.5), 24)
    grid = square_grid(1.0, 12, center=(0.1, 0.0))
    for eps in (0.1, 0.05, 0.025):
        op = assemble(fr, grid, eps)
        tab = op.coefficient_table()
        x = eps * op.q
        err = np.abs(tab.A11 - (1.0 + x + x**2 + x**3)).max()
        ref = (x**4 / (1.0 - x)).max()
        assert err == pytest.approx(ref, rel=1e-9)
        assert err <= 1.1 * (eps * np.abs(op.q).max()) ** 4 / (1 - eps * np.abs(op.q).max())


def test_weight_minimum_matches_tilt_maximum():
    op = _helix_op(eps=0.25)
    assert op.p.min() == 1.0 - 0.25 * op.q.max()
    lo, hi = operator_checks(op)["b_range"]
    assert 0.5 < lo <= hi < 1.5


def test_assembled_matrix_is_exactly_symmetric():
    op = _helix_op(eps=0.25)
    checks = operator_checks(op)
    assert checks["symmetry_defect"] == 0.0
    assert checks["positive_definite"]
    d1, d2, d3 = checks["minor_defects"]
    assert d1 == 0.0 and d2 < 1e-13 and d3 < 1e-13


def test_series_defect_decays_geometrically():
    op = _helix_op(eps=0.25)
    x = 0.25 * np.abs(op.q).max()
    d = {K: series_defect(op, K) for K in (2, 4, 6, 40)}
    assert d[4] < d[2] * 8 * x**2
    assert d[6] < d[4] * 8 * x**2
    assert d[40] < 1e-12


def test_series_defect_straight_twisted_is_machine_level():
    # q = 0 makes every coefficient series terminate at its first term
    fr = build_frame(
        CurveSpec("straight", s0=np.pi, twist="linear", twist_rate=0.8), 20
    )
    op = assemble(fr, _square(n=10), 0.2)
    assert series_defect(op, 2) < 1e-13


# ----------------------------------------------------------------------
# eigensolve
# ----------------------------------------------------------------------


def test_straight_rod_eigenvalues_are_separable_sums():
    fr = build_frame(CurveSpec("straight", s0=np.pi), 20)
    spec = _square(n=10, count=4)
    op = assemble(fr, spec, 0.2)
    sol = solve_direct(op, 4)
    ref = [v for v, _, _ in separable_eigenvalues(op, 4)]
    assert sol.lam == pytest.approx(ref, rel=1e-9)
    assert np.all(sol.residuals < 1e-8)
    assert np.all(np.diff(sol.lam) > 0)
    gram = sol.vectors.T @ (op.B[:, None] * sol.vectors)
    assert np.abs(gram - np.eye(4)).max() < 1e-8


def test_iterative_solver_matches_dense_solver():
    fr = build_frame(CurveSpec("straight", s0=np.pi), 20)
    spec = _square(n=10, count=4)
    op = assemble(fr, spec, 0.2)
    dense = solve_direct(op, 3)
    it = solve_direct(op, 3, dense_cutoff=0)
    assert it.lam == pytest.approx(dense.lam, abs=1e-7)
    assert np.all(it.residuals < 1e-8)
    assert any(h["stage"] == "lobpcg" for h in it.history)


def test_iterative_solver_on_curved_twisted_rod():
    op = _helix_op(eps=0.2, n=10, M_s=20)
    dense = solve_direct(op, 3)
    it = solve_direct(op, 3, dense_cutoff=0)
    assert it.lam == pytest.approx(dense.lam, abs=1e-7)


def test_solver_rejects_bad_sizes():
    op = _helix_op(eps=0.2, n=10, M_s=20)
    with pytest.raises(ValueError):
        solve_direct(op, 0)
    with pytest.raises(ValueError):
        solve_direct(op, op.n)


# ----------------------------------------------------------------------
# certificates
# ----------------------------------------------------------------------


def test_certificate_on_exact_eigenpair():
    op = _helix_op(eps=0.2, n=10, M_s=20)
    sol = solve_direct(op, 3)
    rho, ok = residual_certificate(op, float(sol.lam[0]), sol.vectors[:, 0], sol)
    assert rho < 1e-8
    assert ok is True
    assert np.abs(sol.lam - sol.lam[0]).min() == 0.0 <= rho


def test_certificate_distance_bound_holds_for_any_quasimode():
    # |nearest eigenvalue - mu| <= rho is an identity for symmetric pencils;
    # probe it with deliberately poor candidates
    op = _helix_op(eps=0.2, n=10, M_s=20)
    sol = solve_direct(op, 6)
    v = sol.vectors[:, 0] + 0.3 * sol.vectors[:, 1] + 0.05 * sol.vectors[:, 2]
    for mu in (float(sol.lam[0]) + 0.5, float(sol.lam[1]) - 0.2):
        rho, ok = residual_certificate(op, mu, v, sol)
        dist = np.abs(sol.lam - mu).min()
        assert dist <= rho
        assert ok is True


def test_certificate_warns_outside_window():
    op = _helix_op(eps=0.2, n=10, M_s=20)
    sol = solve_direct(op, 2)
    probe = float(sol.ritz_all[-1]) + 100.0
    with pytest.warns(UnderresolvedWindow):
        rho, ok = residual_certificate(op, probe, sol.vectors[:, 0], sol)
    assert ok is None and rho > 0


def test_certificate_rejects_zero_candidate():
    op = _helix_op(eps=0.2, n=10, M_s=20)
    with pytest.raises(ValueError):
        residual_certificate(op, 1.0, np.zeros(op.n))


# ----------------------------------------------------------------------
# comparison against the expansion
# ----------------------------------------------------------------------


def test_compare_straight_rod_gaps_at_machine_level():
    # the expansion of a straight rod terminates: partial sums equal the
    # separable eigenvalues, so gaps and angles sit at solver level
    fr = build_frame(CurveSpec("straight", s0=np.pi), 20)
    spec = _square(n=10, count=3)
    eps = 0.2
    op = assemble(fr, spec, eps)
    sol = solve_direct(op, 4)
    states = [engine.run_recurrence(fr, spec, 1, m, N=3) for m in (1, 2, 3)]
    rep = compare(sol, states, eps)
    assert rep.ok and not rep.ambiguous
    assert [r.match_index for r in rep.rows] == [0, 1, 2]
    for r in rep.rows:
        assert r.abs_gap < 1e-7
        assert r.sin_angle < 1e-6
        assert r.bound_ok is True
        assert r.neighbor_gap > 10 * r.abs_gap


def test_compare_curved_twisted_rod_certifies():
    fr = build_frame(
        CurveSpec("helix", s0=3.0, a=1.0, b=0.5, twist="linear", twist_rate=0.6),
        22,
    )
    spec = _square(n=10, center=(0.12, -0.07))
    eps = 0.1
    op = assemble(fr, spec, eps)
    sol = solve_direct(op, 5)
    states = [engine.run_recurrence(fr, spec, 1, m, N=3) for m in (1, 2)]
    rep = compare(sol, states, eps)
    assert rep.ok and not rep.ambiguous
    for r in rep.rows:
        assert r.bound_ok is True  # nearest-distance bound, zero tolerance
        assert r.abs_gap <= r.rho
        assert r.abs_gap < 1.0
        assert r.sin_angle < 0.05


def test_compare_twisted_straight_rod_small_gap():
    # q = 0: corrections enter only through even orders; at N = 6 the
    # truncation remainder sits far below the eps^2 shift itself
    fr = build_frame(
        CurveSpec("straight", s0=np.pi, twist="linear", twist_rate=0.8), 20
    )
    spec = _square(n=10)
    eps = 0.1
    op = assemble(fr, spec, eps)
    sol = solve_direct(op, 3)
    st = engine.run_recurrence(fr, spec, 1, 1, N=6)
    rep = compare(sol, [st], eps)
    row = rep.rows[0]
    assert row.abs_gap < 1e-4
    assert row.bound_ok is True


def test_compare_flags_ambiguous_pairing():
    fr = build_frame(CurveSpec("straight", s0=np.pi), 20)
    spec = _square(n=10)
    eps = 0.2
    op = assemble(fr, spec, eps)
    sol = solve_direct(op, 3)
    st = engine.run_recurrence(fr, spec, 1, 1, N=2)
    rep = compare(sol, [st, st], eps)
    assert rep.ambiguous and not rep.ok
    assert all("pairing" in r.flags for r in rep.rows)
    with pytest.raises(PairingAmbiguous):
        compare(sol, [st, st], eps, strict=True)


def test_compare_rejects_mismatched_epsilon():
    fr = build_frame(CurveSpec("straight", s0=np.pi), 20)
    spec = _square(n=10)
    op = assemble(fr, spec, 0.2)
    sol = solve_direct(op, 2)
    st = engine.run_recurrence(fr, spec, 1, 1, N=2)
    with pytest.raises(ValueError):
        compare(sol, [st], 0.1)


# ----------------------------------------------------------------------
# plumbing
# ----------------------------------------------------------------------


def test_field_vector_roundtrip():
    op = _helix_op(eps=0.2, n=10, M_s=20)
    v = np.sin(0.1 + np.arange(op.n))
    f = to_field(op, v)
    assert f.shape == (op.M_s, op.n_omega)
    assert np.all(f[0] == 0.0) and np.all(f[-1] == 0.0)
    assert np.array_equal(to_vector(op, f), v)
    with pytest.raises(ValueError):
        to_vector(op, np.zeros((3, 3)))


def test_matrix_dump_roundtrips(tmp_path):
    op = _helix_op(eps=0.2, n=10, M_s=20)
    path = tmp_path / "H.mtx"
    dump_matrix(op, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("%%MatrixMarket matrix coordinate real symmetric")
    n_rows, n_cols, nnz = (int(t) for t in lines[2].split())
    assert (n_rows, n_cols) == op.H.shape
    entries = [ln.split() for ln in lines[3:]]
    assert len(entries) == nnz
    rows = np.array([int(e[0]) for e in entries])
    cols = np.array([int(e[1]) for e in entries])
    vals = np.array([float(e[2]) for e in entries])
    assert np.all(rows >= cols)  # lower triangle, 0-based
    low = sp.coo_matrix((vals, (rows, cols)), shape=op.H.shape).tocsr()
    strict = sp.triu(low.T, k=1)
    dif = (low + strict - op.H).tocsr()
    assert dif.nnz == 0 or np.abs(dif.data).max() == 0.0


def test_solution_is_deterministic():
    op1 = _helix_op(eps=0.2, n=10, M_s=20)
    op2 = _helix_op(eps=0.2, n=10, M_s=20)
    dif = (op1.H - op2.H).tocsr()
    assert dif.nnz == 0 or np.abs(dif.data).max() == 0.0
    s1 = solve_direct(op1, 3, dense_cutoff=0)
    s2 = solve_direct(op2, 3, dense_cutoff=0)
    assert np.array_equal(s1.lam, s2.lam)
