"""Reference curve, rotating frame, and curvature functions.

The frame is built by rotation-minimizing transport (RK4 on
eta' = -(eta . tau') tau with re-orthonormalization per step), then
twisted by the angle alpha(s) in the (eta, beta) plane. The Frenet
frame is only used for the optional consistency check, since it does
not exist on straight segments.

Conventions: s_grid has M_s nodes including both endpoints,
h = s0/(M_s-1). All derivative stencils are 4th order (central in the
interior, one-sided 5-point at the ends).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator
from scipy.integrate import cumulative_trapezoid

from .errors import FrameDrift, FrenetUndefined, InvalidCurve

_AXES = np.eye(3)


@dataclass(frozen=True)
class CurveSpec:
    """Curve + twist description.

    kind: "straight" | "circular_arc" | "helix" | "sampled"
    s0: arc length (derived from the data for sampled curves)
    radius: arc radius (circular_arc)
    a, b: helix radius and pitch parameters, r(s) lies on radius a
    points: (K,3) array of samples (sampled)
    twist: "none" | "linear" | "tabulated"
    twist_rate: d(alpha)/ds for linear twist
    twist_values: alpha per s-grid node for tabulated twist
    """

    kind: str
    s0: float = 0.0
    radius: Optional[float] = None
    a: Optional[float] = None
    b: Optional[float] = None
    points: Optional[np.ndarray] = None
    twist: str = "none"
    twist_rate: float = 0.0
    twist_values: Optional[np.ndarray] = None


@dataclass(frozen=True)
class FrameField:
    """Sampled curve, orthonormal frame and curvatures on a uniform s-grid."""

    s_grid: np.ndarray
    r: np.ndarray
    tau: np.ndarray
    eta: np.ndarray
    beta: np.ndarray
    kappa1: np.ndarray
    kappa2: np.ndarray
    kappa3: np.ndarray
    kappa3_prime: np.ndarray
    alpha: np.ndarray  # applied twist angle per node

    @property
    def h(self) -> float:
        return float(self.s_grid[1] - self.s_grid[0])

    @property
    def s0(self) -> float:
        return float(self.s_grid[-1])


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def fd_weights(x: np.ndarray, z: float, m: int) -> np.ndarray:
    """Finite-difference weights for the m-th derivative at z from nodes x
    (Fornberg's recursion)."""
    n = len(x)
    c = np.zeros((n, m + 1))
    c1 = 1.0
    c4 = x[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, m]


def diff4(f: np.ndarray, h: float, order: int = 1) -> np.ndarray:
    """4th-order-accurate derivative of given order on a uniform grid.

    Central stencils in the interior, one-sided near the ends, applied in
    a single pass (composing first derivatives loses accuracy at the
    boundary). Works on (M,) or (M,3) arrays along axis 0.
    """
    f = np.asarray(f, dtype=float)
    M = f.shape[0]
    w = (order + 1) // 2 + 1
    npts = order + 4
    if M < npts:
        raise ValueError(f"diff4(order={order}) needs at least {npts} nodes")
    out = np.zeros_like(f)
    cw = fd_weights(np.arange(-w, w + 1, dtype=float), 0.0, order)
    for k, o in enumerate(range(-w, w + 1)):
        out[w : M - w] += cw[k] * f[w + o : M - w + o]
    base = np.arange(npts, dtype=float)
    for i in range(w):
        ci = fd_weights(base, float(i), order)
        out[i] = np.tensordot(ci, f[:npts], axes=(0, 0))
        cj = fd_weights(base, float(npts - 1 - i), order)
        out[M - 1 - i] = np.tensordot(cj, f[M - npts :], axes=(0, 0))
    return out / h**order


def _dots(u, v):
    return np.einsum("ij,ij->i", u, v)


class _AnalyticCurve:
    """r, tau, tau' in closed form for the built-in curve kinds."""

    def __init__(self, spec: CurveSpec):
        self.spec = spec
        if spec.kind == "circular_arc":
            if not spec.radius or spec.radius <= 0:
                raise InvalidCurve("circular_arc needs radius > 0")
            if spec.s0 >= 2 * np.pi * spec.radius:
                raise InvalidCurve("arc length covers a full circle")
        elif spec.kind == "helix":
            if spec.a is None or spec.b is None or spec.a <= 0:
                raise InvalidCurve("helix needs a > 0 and b")
            if spec.b == 0 and spec.s0 >= 2 * np.pi * spec.a:
                raise InvalidCurve("flat helix covers a full circle")

    def r(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        k = self.spec.kind
        if k == "straight":
            return np.column_stack([s, np.zeros_like(s), np.zeros_like(s)])
        if k == "circular_arc":
            R = self.spec.radius
            return np.column_stack(
                [R * np.sin(s / R), R * (1 - np.cos(s / R)), np.zeros_like(s)]
            )
        a, b = self.spec.a, self.spec.b
        c = np.hypot(a, b)
        return np.column_stack([a * np.cos(s / c), a * np.sin(s / c), b * s / c])

    def tau(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        k = self.spec.kind
        if k == "straight":
            out = np.zeros((s.size, 3))
            out[:, 0] = 1.0
            return out
        if k == "circular_arc":
            R = self.spec.radius
            return np.column_stack(
                [np.cos(s / R), np.sin(s / R), np.zeros_like(s)]
            )
        a, b = self.spec.a, self.spec.b
        c = np.hypot(a, b)
        return np.column_stack(
            [-(a / c) * np.sin(s / c), (a / c) * np.cos(s / c), np.full_like(s, b / c)]
        )

    def tau_prime(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        k = self.spec.kind
        if k == "straight":
            return np.zeros((s.size, 3))
        if k == "circular_arc":
            R = self.spec.radius
            return np.column_stack(
                [-np.sin(s / R) / R, np.cos(s / R) / R, np.zeros_like(s)]
            )
        a, b = self.spec.a, self.spec.b
        c2 = a * a + b * b
        return np.column_stack(
            [-(a / c2) * np.cos(s / np.sqrt(c2)), -(a / c2) * np.sin(s / np.sqrt(c2)),
             np.zeros_like(s)]
        )


class _SampledCurve:
    """Arc-length reparameterization of a point list.

    Coordinates are C^2 cubic splines in cumulative chord length; the
    chord->arc-length map and its inverse use monotone cubic (PCHIP)
    interpolation so the parameterization never backtracks. tau' comes
    from 4th-order differences of the resampled tangent.
    """

    def __init__(self, spec: CurveSpec, n_fine: int):
        pts = np.asarray(spec.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 4:
            raise InvalidCurve("sampled curve needs at least 4 points in R^3")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg <= 0):
            raise InvalidCurve("duplicate consecutive points")
        t = np.concatenate([[0.0], np.cumsum(seg)])
        self._p = CubicSpline(t, pts, axis=0)
        tq = np.linspace(0.0, t[-1], max(4096, 4 * n_fine))
        speed = np.linalg.norm(self._p(tq, 1), axis=1)
        if np.any(speed <= 0):
            raise InvalidCurve("vanishing speed after reparameterization")
        s_of_t = cumulative_trapezoid(speed, tq, initial=0.0)
        self.s0 = float(s_of_t[-1])
        if self.s0 <= 0:
            raise InvalidCurve("curve too short")
        self._t_of_s = PchipInterpolator(s_of_t, tq)
        # tau / tau' sampled on the fine grid, filled in by build_frame
        self._fine_s = None
        self._fine_tau = None
        self._fine_taup = None

    def r(self, s):
        return self._p(self._t_of_s(np.atleast_1d(s)))

    def tau_raw(self, s):
        v = self._p(self._t_of_s(np.atleast_1d(s)), 1)
        return v / np.linalg.norm(v, axis=1)[:, None]


def _pick_eta0(tau0: np.ndarray) -> np.ndarray:
    for ax in _AXES:
        if abs(float(tau0 @ ax)) < 0.9:
            e = ax - (ax @ tau0) * tau0
            return e / np.linalg.norm(e)
    raise InvalidCurve("no admissible frame axis")  # unreachable for unit tau0


def _transport(tau_f: np.ndarray, taup_f: np.ndarray, h: float) -> np.ndarray:
    """Rotation-minimizing eta on the coarse grid from fine-grid tau data.

    tau_f/taup_f live on the 2x refined grid (2M-1 nodes) so RK4 can use
    exact half-step samples.
    """
    M = (tau_f.shape[0] + 1) // 2
    eta = np.empty((M, 3))
    e = _pick_eta0(tau_f[0])
    eta[0] = e
    for i in range(M - 1):
        t0, tm, t1 = tau_f[2 * i], tau_f[2 * i + 1], tau_f[2 * i + 2]
        d0, dm, d1 = taup_f[2 * i], taup_f[2 * i + 1], taup_f[2 * i + 2]
        k1 = -(e @ d0) * t0
        k2 = -((e + 0.5 * h * k1) @ dm) * tm
        k3 = -((e + 0.5 * h * k2) @ dm) * tm
        k4 = -((e + h * k3) @ d1) * t1
        e = e + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        e = e - (e @ t1) * t1
        n = np.linalg.norm(e)
        if abs(n - 1.0) > 1e-3:
            raise FrameDrift(f"transport step {i}: renormalization {n:.3e}")
        e = e / n
        eta[i + 1] = e
    return eta


def _twist_angle(spec: CurveSpec, s: np.ndarray) -> np.ndarray:
    if spec.twist == "none":
        return np.zeros_like(s)
    if spec.twist == "linear":
        return spec.twist_rate * s
    if spec.twist == "tabulated":
        vals = np.asarray(spec.twist_values, dtype=float)
        if vals.shape != s.shape:
            raise InvalidCurve("tabulated twist needs one value per s node")
        return vals
    raise InvalidCurve(f"unknown twist kind {spec.twist!r}")


def build_frame(spec: CurveSpec, M_s: int) -> FrameField:
    """Construct the rotation-minimizing-then-twisted frame on M_s nodes."""
    if M_s < 16:
        raise InvalidCurve("M_s must be at least 16")

    if spec.kind == "sampled":
        curve = _SampledCurve(spec, 2 * M_s)
        s0 = curve.s0
    else:
        if spec.kind not in ("straight", "circular_arc", "helix"):
            raise InvalidCurve(f"unknown curve kind {spec.kind!r}")
        if spec.s0 <= 0:
            raise InvalidCurve("s0 must be positive")
        curve = _AnalyticCurve(spec)
        s0 = spec.s0

    s = np.linspace(0.0, s0, M_s)
    h = s[1] - s[0]
    s_fine = np.linspace(0.0, s0, 2 * M_s - 1)

    if spec.kind == "sampled":
        r = curve.r(s)
        tau_f = curve.tau_raw(s_fine)
        taup_f = diff4(tau_f, s_fine[1] - s_fine[0])
        dmin = _min_nonadjacent_distance(r)
        if dmin <= 1e-12 * max(1.0, s0):
            raise InvalidCurve("resampled curve is self-intersecting")
    else:
        r = curve.r(s)
        tau_f = curve.tau(s_fine)
        taup_f = curve.tau_prime(s_fine)

    tau = tau_f[::2]
    eta_rm = _transport(tau_f, taup_f, h)
    beta_rm = np.cross(tau, eta_rm)

    alpha = _twist_angle(spec, s)
    ca, sa = np.cos(alpha)[:, None], np.sin(alpha)[:, None]
    eta = ca * eta_rm + sa * beta_rm
    beta = np.cross(tau, eta)

    k1, k2, k3 = _curvatures(tau, eta, beta, h)
    k3p = diff4(k3, h)

    frame = FrameField(s, r, tau, eta, beta, k1, k2, k3, k3p, alpha)
    _freeze(s, r, tau, eta, beta, k1, k2, k3, k3p, alpha)
    _validate(frame)
    return frame


def _min_nonadjacent_distance(r: np.ndarray) -> float:
    d = np.linalg.norm(r[:, None, :] - r[None, :, :], axis=2)
    M = r.shape[0]
    ii, jj = np.triu_indices(M, k=2)
    return float(d[ii, jj].min())


def _curvatures(tau, eta, beta, h):
    taup = diff4(tau, h)
    etap = diff4(eta, h)
    k1 = _dots(taup, eta)
    k2 = -_dots(taup, beta)
    k3 = _dots(etap, beta)
    return k1, k2, k3


def curvatures_from_frame(frame: FrameField):
    """kappa1 = tau'.eta, kappa2 = -tau'.beta, kappa3 = eta'.beta by FD."""
    return _curvatures(frame.tau, frame.eta, frame.beta, frame.h)


def _validate(frame: FrameField) -> None:
    for name, v in (("tau", frame.tau), ("eta", frame.eta), ("beta", frame.beta)):
        err = np.max(np.abs(np.linalg.norm(v, axis=1) - 1.0))
        if err > 1e-10:
            raise FrameDrift(f"|{name}| deviates from 1 by {err:.3e}")
    for a, b, lbl in (
        (frame.tau, frame.eta, "tau.eta"),
        (frame.tau, frame.beta, "tau.beta"),
        (frame.eta, frame.beta, "eta.beta"),
    ):
        err = np.max(np.abs(_dots(a, b)))
        if err > 1e-8:
            raise FrameDrift(f"{lbl} = {err:.3e}")
    err = np.max(np.abs(frame.beta - np.cross(frame.tau, frame.eta)))
    if err > 1e-8:
        raise FrameDrift(f"beta != tau x eta by {err:.3e}")


def frame_ode_residual(frame: FrameField) -> float:
    """Max nodal residual of tau' = k1 eta - k2 beta, eta' = -k1 tau + k3 beta,
    beta' = k2 tau - k3 eta, with 4th-order FD derivatives."""
    h = frame.h
    taup = diff4(frame.tau, h)
    etap = diff4(frame.eta, h)
    betap = diff4(frame.beta, h)
    k1 = frame.kappa1[:, None]
    k2 = frame.kappa2[:, None]
    k3 = frame.kappa3[:, None]
    r1 = taup - (k1 * frame.eta - k2 * frame.beta)
    r2 = etap - (-k1 * frame.tau + k3 * frame.beta)
    r3 = betap - (k2 * frame.tau - k3 * frame.eta)
    return float(max(np.abs(r1).max(), np.abs(r2).max(), np.abs(r3).max()))


@dataclass(frozen=True)
class FrenetReport:
    max_curvature_dev: float  # max |k1^2 + k2^2 - kappa^2|
    max_torsion_dev: float  # max |k3 - alpha' - torsion|
    kappa_min: float
    kappa_max: float


def frenet_consistency_check(frame: FrameField) -> FrenetReport:
    """Compare frame curvatures against Frenet quantities derived from r.

    Raises FrenetUndefined when the curvature vanishes somewhere (e.g.
    straight segments), in which case no Frenet frame exists.
    """
    h = frame.h
    r1 = diff4(frame.r, h)
    r2 = diff4(frame.r, h, order=2)
    r3 = diff4(frame.r, h, order=3)
    cr = np.cross(r1, r2)
    crn = np.linalg.norm(cr, axis=1)
    speed = np.linalg.norm(r1, axis=1)
    kappa = crn / speed**3
    kmin, kmax = float(kappa.min()), float(kappa.max())
    if kmin < 1e-6 * max(kmax, 1.0 / frame.s0):
        raise FrenetUndefined(
            f"curvature ~ {kmin:.3e} somewhere; Frenet frame undefined"
        )
    torsion = _dots(cr, r3) / crn**2

    # total angle between the Frenet normal and eta, from the frame itself
    alpha_total = np.unwrap(np.arctan2(frame.kappa2, frame.kappa1))
    alpha_prime = diff4(alpha_total, h)

    dev_k = np.abs(frame.kappa1**2 + frame.kappa2**2 - kappa**2)
    dev_t = np.abs(frame.kappa3 - alpha_prime - torsion)
    return FrenetReport(float(dev_k.max()), float(dev_t.max()), kmin, kmax)
