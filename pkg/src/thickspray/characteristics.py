"""Friction characteristics, the straightening map and Lagrangian pushforward.

The characteristics solve ``dX/ds = V``, ``dV/ds = -V + F(s, X)`` with
``(X, V) = (x, v)`` at ``s = t``. Friction is propagated exactly by
exponential factors; the force integrals use an exponential midpoint rule,
exact for constant forces and second order otherwise.

Positions are returned lifted to ``R^d`` (not reduced modulo ``2 pi``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import grid as gr
from .errors import DomainError, HorizonError, TailError


# ---------------------------------------------------------------------------
# force fields
# ---------------------------------------------------------------------------

class ForceField:
    """Time-indexed vector field on the torus.

    Subclasses implement ``_eval(t, X)`` with ``X`` of shape ``(d, n)``.
    """

    d: int = 1
    t0: float = -math.inf
    t1: float = math.inf
    is_zero: bool = False

    def __call__(self, t: float, X: np.ndarray) -> np.ndarray:
        return self._eval(t, X)

    def breakpoints(self) -> list:
        """Times at which the field may jump."""
        return []

    def check_interval(self, a: float, b: float) -> None:
        lo, hi = min(a, b), max(a, b)
        tol = 1e-12 * max(1.0, abs(lo), abs(hi))
        if lo < self.t0 - tol or hi > self.t1 + tol:
            raise DomainError(f"force defined on [{self.t0}, {self.t1}], "
                              f"queried on [{lo}, {hi}]")


class ZeroForce(ForceField):
    is_zero = True

    def __init__(self, d: int = 1):
        self.d = d

    def _eval(self, t, X):
        return np.zeros_like(X)


class ConstantForce(ForceField):
    """Spatially and temporally constant force."""

    def __init__(self, value, d: Optional[int] = None):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        self.d = d or value.size
        if value.size == 1:
            value = np.repeat(value, self.d)
        self.value = value
        self.is_zero = not np.any(value)

    def _eval(self, t, X):
        return np.broadcast_to(self.value[:, None], X.shape).copy()


class FunctionForce(ForceField):
    """Analytic force ``fn(t, X)`` with ``X`` of shape ``(d, n)``."""

    def __init__(self, fn: Callable, d: int = 1, t0: float = -math.inf,
                 t1: float = math.inf):
        self.fn = fn
        self.d = d
        self.t0, self.t1 = t0, t1

    def _eval(self, t, X):
        return np.asarray(self.fn(t, X), dtype=float).reshape(X.shape)


class GriddedForce(ForceField):
    """Piecewise-constant-in-time gridded force.

    Segment ``i`` covers ``[times[i], times[i+1]]`` and carries
    ``fields[i]`` of shape ``(d,) + (Nx,)*d``. Spatial evaluation uses the
    trigonometric interpolant.
    """

    def __init__(self, times, fields):
        self.times = np.asarray(times, dtype=float)
        self.fields = [np.asarray(F, dtype=float) for F in fields]
        if len(self.fields) != len(self.times) - 1:
            raise ValueError("need one field per time segment")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("segment times must increase")
        self.d = self.fields[0].shape[0]
        self.t0, self.t1 = float(self.times[0]), float(self.times[-1])
        self.is_zero = all(not np.any(F) for F in self.fields)

    @classmethod
    def frozen(cls, field, t0: float, t1: float) -> "GriddedForce":
        return cls([t0, t1], [field])

    @classmethod
    def from_segments(cls, segments) -> "GriddedForce":
        """Build from a list of ``(t_start, t_end, field)`` records."""
        times = [segments[0][0]] + [s[1] for s in segments]
        return cls(times, [s[2] for s in segments])

    def breakpoints(self):
        return list(self.times[1:-1])

    def segment(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(max(i, 0), len(self.fields) - 1)

    def _eval(self, t, X):
        F = self.fields[self.segment(t)]
        return np.array([gr.trig_interpolate(F[i], X) for i in range(self.d)])


# ---------------------------------------------------------------------------
# flow
# ---------------------------------------------------------------------------

@dataclass
class FlowResult:
    """Phase point reached by the flow.

    ``jacobian_phase`` is the determinant of ``(x, v) -> (X, V)``.
    """

    X: np.ndarray
    V: np.ndarray
    jacobian_phase: float


def _as_points(a, d):
    a = np.asarray(a, dtype=float)
    if d == 1 and (a.ndim == 0 or a.shape[0] != 1):
        return a[None], True
    if a.shape[0] != d:
        raise ValueError(f"expected leading axis of length {d}")
    return a, False


def exp_midpoint_step(F: ForceField, sigma: float, h: float, X, V):
    """One exponential-midpoint substep of signed length ``h`` from ``sigma``.

    ``X``, ``V`` have shape ``(d, n)``.
    """
    em = math.expm1(-h)  # e^{-h} - 1
    if F.is_zero:
        return X - em * V, (1.0 + em) * V
    Xmid = X - math.expm1(-h / 2) * V
    Fm = F(sigma + h / 2, Xmid)
    Xn = X - em * V + (h + em) * Fm
    Vn = (1.0 + em) * V - em * Fm
    return Xn, Vn


def _substeps(F, t, s, dt_sub):
    """Signed substep lengths from ``t`` to ``s`` respecting breakpoints."""
    sign = 1.0 if s >= t else -1.0
    lo, hi = min(t, s), max(t, s)
    cuts = sorted({lo, hi, *[b for b in F.breakpoints() if lo < b < hi]})
    if sign < 0:
        cuts = cuts[::-1]
    steps = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        n = max(1, int(math.ceil(abs(b - a) / dt_sub - 1e-9)))
        h = (b - a) / n
        steps.extend([(a + i * h, h) for i in range(n)])
    return steps


def flow(F: ForceField, x, v, t: float, s: float, dt_sub: float = 1e-3) -> FlowResult:
    """Characteristic ``(X^{s;t}(x, v), V^{s;t}(x, v))``.

    Parameters
    ----------
    F : ForceField
    x, v : array_like
        Shape ``(d,) + S``; for ``d = 1`` a plain array or scalar is accepted.
    t, s : float
        Start and end times; ``s < t`` flows backward.
    dt_sub : float
        Maximal substep length.
    """
    if not dt_sub > 0:
        raise ValueError("dt_sub must be positive")
    F.check_interval(t, s)
    d = F.d
    x, squeeze = _as_points(x, d)
    v, _ = _as_points(v, d)
    x, v = np.broadcast_arrays(x, v)
    S = x.shape[1:]
    X = x.reshape(d, -1).astype(float).copy()
    V = v.reshape(d, -1).astype(float).copy()
    for sigma, h in _substeps(F, t, s, dt_sub):
        X, V = exp_midpoint_step(F, sigma, h, X, V)
    X = X.reshape((d,) + S)
    V = V.reshape((d,) + S)
    jac = math.exp(d * (t - s))
    if squeeze:
        X, V = X[0], V[0]
    return FlowResult(X, V, jac)


def constant_force_flow(c, x, v, t: float, s: float):
    """Closed-form characteristic for a constant force ``c``.

    ``V = c + (v - c) e^{t-s}``, ``X = x + c (s - t) + (v - c)(1 - e^{t-s})``.
    ``x``, ``v`` have shape ``(d,) + S``.
    """
    c = np.asarray(c, dtype=float)
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    c = c.reshape(c.shape + (1,) * (v.ndim - c.ndim))
    e = math.exp(t - s)
    return x + c * (s - t) - (v - c) * math.expm1(t - s), c + (v - c) * e


def reference_flow(F: ForceField, x, v, t: float, s: float, rtol: float = 1e-12):
    """High-accuracy characteristic by DOP853, for verification.

    ``x``, ``v`` have shape ``(d, n)``.
    """
    from scipy.integrate import solve_ivp

    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    d, n = x.shape

    def rhs(tau, y):
        X, V = y[: d * n].reshape(d, n), y[d * n:].reshape(d, n)
        return np.concatenate([V.ravel(), (-V + F(tau, X)).ravel()])

    sol = solve_ivp(rhs, (t, s), np.concatenate([x.ravel(), v.ravel()]), method="DOP853",
                    rtol=rtol, atol=rtol * 1e-2)
    y = sol.y[:, -1]
    return y[: d * n].reshape(d, n), y[d * n:].reshape(d, n)


# ---------------------------------------------------------------------------
# straightening
# ---------------------------------------------------------------------------

@dataclass
class StraighteningMap:
    """Straightening ``psi_{s,t}`` sampled on nodes.

    ``psi`` and ``v`` have shape ``(d, n)``; ``det`` has shape ``(n,)``.
    """

    x: np.ndarray
    v: np.ndarray
    psi: np.ndarray
    det: np.ndarray
    residual: float
    contraction: float
    C: float = 2.0

    @property
    def det_ok(self) -> bool:
        return bool(np.all(self.det >= 1.0 / self.C) and np.all(self.det <= self.C))


def _solve_psi(F, x, v, s, t, tol, dt_sub, max_iter):
    """Fixed point ``psi = v - Xt(x, psi)``; returns psi, residual, contraction."""
    a = -math.expm1(t - s)  # 1 - e^{t-s}
    target = x + a * v
    psi = v.copy()
    prev_step = None
    contraction = 0.0
    for _ in range(max_iter):
        X = flow(F, x, psi, t, s, dt_sub).X
        res = X - target
        rmax = float(np.max(np.abs(res)))
        if rmax < tol:
            return psi, rmax, contraction
        step = -res / a
        smax = float(np.max(np.abs(step)))
        if prev_step is not None and prev_step > 0:
            contraction = max(contraction, smax / prev_step)
            if smax / prev_step >= 1.0:
                raise HorizonError(f"straightening fixed point does not contract "
                                   f"(factor {smax / prev_step:.3g})")
        prev_step = smax
        psi = psi + step
    raise HorizonError(f"straightening did not converge in {max_iter} iterations")


def straighten(F: ForceField, x, v, s: float, t: float, tol: float = 1e-12,
               horizon: float = 0.5, dt_sub: float = 1e-3, delta: float = 1e-4,
               max_iter: int = 200):
    """Solve ``X^{s;t}(x, psi) = x + (1 - e^{t-s}) v`` for ``psi``.

    Returns
    -------
    psi : ndarray
        Same layout as ``v``.
    det : ndarray
        ``det D_v psi`` by central differences of step ``delta``.
    """
    sm = straightening_map(F, x, v, s, t, tol=tol, horizon=horizon, dt_sub=dt_sub,
                           delta=delta, max_iter=max_iter)
    d = F.d
    v_arr = np.asarray(v, dtype=float)
    shape = v_arr.shape if not (d == 1 and (v_arr.ndim == 0 or v_arr.shape[0] != 1)) \
        else (1,) + v_arr.shape
    psi = sm.psi.reshape(shape)
    det = sm.det.reshape(shape[1:])
    if d == 1 and shape != v_arr.shape:
        psi = psi[0]
    return psi, det


def straightening_map(F: ForceField, x, v, s: float, t: float, tol: float = 1e-12,
                      horizon: float = 0.5, dt_sub: float = 1e-3, delta: float = 1e-4,
                      max_iter: int = 200, C: float = 2.0) -> StraighteningMap:
    """Straightening map with determinant and monitor values on nodes."""
    if abs(s - t) > horizon:
        raise HorizonError(f"|s - t| = {abs(s - t):.3g} exceeds horizon {horizon}")
    d = F.d
    x, _ = _as_points(x, d)
    v, _ = _as_points(v, d)
    x, v = np.broadcast_arrays(x, v)
    x = x.reshape(d, -1).astype(float)
    v = v.reshape(d, -1).astype(float)
    if abs(s - t) < 1e-14:
        return StraighteningMap(x, v, v.copy(), np.ones(v.shape[1]), 0.0, 0.0, C)
    psi, res, contraction = _solve_psi(F, x, v, s, t, tol, dt_sub, max_iter)
    J = np.empty((v.shape[1], d, d))
    for j in range(d):
        e = np.zeros((d, 1))
        e[j] = delta
        pp, _, _ = _solve_psi(F, x, v + e, s, t, tol, dt_sub, max_iter)
        pm, _, _ = _solve_psi(F, x, v - e, s, t, tol, dt_sub, max_iter)
        J[:, :, j] = ((pp - pm) / (2 * delta)).T
    det = np.linalg.det(J)
    return StraighteningMap(x, v, psi, det, res, contraction, C)


# ---------------------------------------------------------------------------
# Lagrangian representation
# ---------------------------------------------------------------------------

def pushforward_representation(f_in, F: ForceField, t: float, grid: Optional[gr.PhaseGrid] = None,
                               dt_sub: float = 1e-3,
                               tail_tol: float = gr.DEFAULT_TAIL_TOL) -> gr.Distribution:
    """``f(t, x, v) = e^{dt} f_in(X^{0;t}(x, v), V^{0;t}(x, v))`` on the grid.

    Parameters
    ----------
    f_in : Distribution or callable
        Gridded data (cubic-spline interpolated, zero outside the velocity
        box) or an analytic ``f_in(X, V)`` with ``X, V`` of shape ``(d, ...)``.
    F : ForceField
    t : float
    grid : PhaseGrid, optional
        Required when ``f_in`` is a callable.
    """
    if isinstance(f_in, gr.Distribution):
        grid = f_in.grid
    elif grid is None:
        raise ValueError("grid is required for an analytic f_in")
    d = grid.d
    if t == 0:
        if isinstance(f_in, gr.Distribution):
            return gr.Distribution(grid, f_in.values.copy())
    X0, V0 = grid.phase_mesh()
    x = np.array([np.broadcast_to(a, grid.phase_shape) for a in X0])
    v = np.array([np.broadcast_to(a, grid.phase_shape) for a in V0])
    res = flow(F, x, v, t, 0.0, dt_sub) if t != 0 else FlowResult(x, v, 1.0)
    scale = math.exp(d * t)
    if isinstance(f_in, gr.Distribution):
        outside = np.any(np.abs(res.V) > grid.Vmax, axis=0)
        if outside.any() and f_in.tail_ratio() >= tail_tol:
            raise TailError("backward characteristics leave the velocity box "
                            f"where the tail ratio is {f_in.tail_ratio():.3e}")
        vals = gr.spline_interpolate(f_in.values, grid, res.X, res.V)
    else:
        vals = np.asarray(f_in(res.X, res.V), dtype=float)
    vals = scale * vals
    return gr.Distribution(grid, np.maximum(vals, 0.0))
