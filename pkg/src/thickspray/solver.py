"""Operator-splitting time integration of the regularized thick-spray system.

Unknowns are the particle density ``f``, the conserved fluid mass
``m = (1 - rho_f) rho`` and the fluid velocity ``u``. One step composes

* a semi-Lagrangian Vlasov update along friction characteristics with a
  force frozen over the substep (``vlasov_step``),
* an SSP-RK3 update of the fluid pair ``(m, u)`` with the kinetic moments
  frozen (``fluid_step``), optionally with a Crank-Nicolson treatment of
  a constant-coefficient Lame part,

in Lie or Strang order. ``rho`` is always reconstructed as
``m / (1 - rho_f)``.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import characteristics as ch
from . import grid as gr
from . import model as md
from . import penrose as pn
from .errors import (BoundError, ConfigError, DivergenceError, ResolutionError,
                     StabilityError, TailError, ThickSprayError, VacuumError)

log = logging.getLogger(__name__)

BLOWUP = 1e6
RK3_REAL_STABILITY = 2.5127  # SSP-RK3 stability interval on the negative real axis
CSV_COLUMNS = ("t", "fluid_mass", "particle_mass", "clipped_mass", "min_f", "min_rho",
               "max_rhof", "penrose_margin", "N_mr", "div_defect")
SPLITTINGS = ("strang", "lie")
MOMENTUM_MODES = ("explicit", "semi-implicit")
COUPLINGS = ("midpoint", "frozen")


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    """Numerical parameters of a run.

    ``coupling='midpoint'`` evaluates the kinetic force at the step
    midpoint by a predictor pass (second order in the coupling);
    ``'frozen'`` keeps the force of the step start. ``penrose_band_tol``
    is the spectral noise level accepted by the in-run Penrose monitor; the
    initial check uses the strict default. ``fluid_frozen`` holds
    ``(m, u)`` fixed (decoupled kinetic runs).
    """

    eps: float = 0.1
    dt: float = 1e-3
    T_end: float = 0.5
    splitting: str = "strang"
    momentum_mode: str = "explicit"
    coupling: str = "midpoint"
    safety: float = 0.9
    penrose_cadence: int = 20
    penrose_variant: str = "standard"
    c_required: float = 0.1
    penrose_sampling: pn.PenroseSampling = field(default_factory=pn.PenroseSampling)
    monitor_sampling: Optional[pn.PenroseSampling] = None
    penrose_band_tol: float = 1e-6
    penrose_enabled: bool = True
    require_penrose: bool = False
    tail_tol: float = gr.DEFAULT_TAIL_TOL
    advect_momentum: bool = True
    dealias: bool = False
    sobolev_m: int = 4
    sobolev_r: float = 3.0
    snapshot_every: int = 0
    record_history: bool = True
    interp_order: int = 3
    fluid_frozen: bool = False

    def __post_init__(self):
        errs = []
        if not self.eps >= 0:
            errs.append(f"eps must be >= 0, got {self.eps}")
        if not self.dt > 0:
            errs.append(f"dt must be > 0, got {self.dt}")
        if not self.T_end >= 0:
            errs.append(f"T_end must be >= 0, got {self.T_end}")
        if self.splitting not in SPLITTINGS:
            errs.append(f"splitting must be one of {SPLITTINGS}")
        if self.momentum_mode not in MOMENTUM_MODES:
            errs.append(f"momentum_mode must be one of {MOMENTUM_MODES}")
        if self.coupling not in COUPLINGS:
            errs.append(f"coupling must be one of {COUPLINGS}")
        if not self.safety > 0:
            errs.append(f"safety must be > 0, got {self.safety}")
        if self.penrose_cadence < 1:
            errs.append("penrose_cadence must be >= 1")
        if self.penrose_variant not in ("standard", "optimal"):
            errs.append("penrose_variant must be 'standard' or 'optimal'")
        if self.snapshot_every < 0:
            errs.append("snapshot_every must be >= 0")
        if self.interp_order not in (3, 5):
            errs.append("interp_order must be 3 or 5")
        if errs:
            raise ConfigError(errs)

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.T_end / self.dt - 1e-9))

    def monitor(self, grid: gr.PhaseGrid) -> pn.PenroseSampling:
        """Reduced sampling used between full checks."""
        if self.monitor_sampling is not None:
            return self.monitor_sampling
        s = self.penrose_sampling
        return pn.PenroseSampling(max(3, s.n_phi // 4), max(2, s.n_beta // 4),
                                  max(4, s.n_khat // 4), max(s.x_stride, grid.Nx // 8))

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__
               if k not in ("penrose_sampling", "monitor_sampling")}
        out["penrose_sampling"] = self.penrose_sampling.to_dict()
        out["monitor_sampling"] = (self.monitor_sampling.to_dict()
                                   if self.monitor_sampling else None)
        return out


def diffusive_limit(grid: gr.PhaseGrid, m_min: float, safety: float) -> float:
    """Explicit RK3 step limit for ``Lame(u) / m``.

    ``safety * C * dx^2 * m_min / (2d)`` with ``C = RK3_REAL_STABILITY / pi^2``,
    which keeps ``dt`` times the largest Lame eigenvalue
    ``2 d (pi/dx)^2 / m_min`` inside the real stability interval of SSP-RK3.
    """
    C = RK3_REAL_STABILITY / math.pi ** 2
    return safety * C * grid.dx ** 2 * m_min / (2 * grid.d)


def check_cfl(grid: gr.PhaseGrid, m: np.ndarray, cfg: SolverConfig) -> None:
    """Transport and (explicit mode) diffusive time-step restrictions."""
    errs = []
    lim_t = cfg.safety * grid.dx / grid.Vmax
    if cfg.dt > lim_t:
        errs.append(f"dt = {cfg.dt:g} exceeds transport limit safety*dx/Vmax = {lim_t:.4g}")
    if cfg.momentum_mode == "explicit":
        lim_d = diffusive_limit(grid, float(np.min(m)), cfg.safety)
        if cfg.dt > lim_d:
            errs.append(f"dt = {cfg.dt:g} exceeds explicit diffusive limit {lim_d:.4g}")
    if errs:
        raise ConfigError(errs)


@dataclass
class SimState:
    """Solution at time ``t`` with the force cache and step bookkeeping.

    ``history`` holds ``(t0, t1, E)`` records of the force actually used by
    the kinetic substeps; it is shared between successive states.
    """

    t: float
    f: gr.Distribution
    fluid: md.FluidState
    E: np.ndarray
    step_index: int = 0
    clipped_step: float = 0.0
    clipped_total: float = 0.0
    min_f_raw: float = 0.0
    history: list = field(default_factory=list)

    @property
    def grid(self) -> gr.PhaseGrid:
        return self.f.grid

    @property
    def m(self) -> np.ndarray:
        return self.fluid.m


def initial_state(f: gr.Distribution, fluid: md.FluidState, law: md.PressureLaw,
                  eps: float) -> SimState:
    """Wrap initial data; fills ``m`` when missing and computes the force."""
    if fluid.m is None:
        fluid = md.FluidState.from_rho(fluid.rho, fluid.u, gr.velocity_moment(f, 0))
    E = md.compute_force(fluid, law, eps)
    return SimState(0.0, f, fluid, E, min_f_raw=float(f.values.min()))


# ---------------------------------------------------------------------------
# kinetic substep
# ---------------------------------------------------------------------------

def characteristic_feet(grid: gr.PhaseGrid, E: np.ndarray, dt: float):
    """Backward feet ``(X, V)`` of one exponential-midpoint step with frozen ``E``.

    Same update as :func:`characteristics.exp_midpoint_step` with
    ``h = -dt``; the force at ``x + c v`` is evaluated by spectral shifts.
    """
    d = grid.d
    Xg, Vg = grid.phase_mesh()
    x = [np.broadcast_to(a, grid.phase_shape) for a in Xg]
    v = [np.broadcast_to(a, grid.phase_shape) for a in Vg]
    em = math.expm1(dt)
    c = -math.expm1(dt / 2)
    if np.any(E):
        vm = grid.vmesh()
        shifts = np.array([np.broadcast_to(c * vm[i], grid.velocity_shape) for i in range(d)])
        Fm = gr.shifted_samples(np.asarray(E, dtype=float), shifts)
    else:
        Fm = np.zeros((d,) + grid.phase_shape)
    X = np.array([x[i] - em * v[i] + (em - dt) * Fm[i] for i in range(d)])
    V = np.array([(1.0 + em) * v[i] - em * Fm[i] for i in range(d)])
    return X, V


def vlasov_step(f: gr.Distribution, E: np.ndarray, dt: float,
                tail_tol: float = gr.DEFAULT_TAIL_TOL, return_stats: bool = False,
                order: int = 3):
    """Semi-Lagrangian update ``f <- e^{d dt} f(X, V)`` along backward feet.

    Parameters
    ----------
    f : Distribution
    E : ndarray, shape ``(d,) + (Nx,)*d``
        Force, frozen over the step.
    dt : float
    tail_tol : float
        Feet leaving the velocity box are an error unless the tail ratio of
        ``f`` is below this value.
    return_stats : bool
        Also return ``(clipped_mass, min_before_floor)``.
    order : int
        B-spline order of the interpolation (3 or 5).
    """
    g = f.grid
    if dt == 0:
        out = gr.Distribution(g, f.values.copy())
        return (out, 0.0, float(f.values.min())) if return_stats else out
    X, V = characteristic_feet(g, E, dt)
    outside = np.any(np.abs(V) > g.Vmax, axis=0)
    if outside.any() and f.tail_ratio() >= tail_tol:
        raise TailError("backward feet leave the velocity box where the tail ratio is "
                        f"{f.tail_ratio():.3e} >= {tail_tol:.1e}")
    vals = math.exp(g.d * dt) * gr.spline_interpolate(f.values, g, X, V, order)
    vmin = float(vals.min())
    neg = vals < 0
    clipped = 0.0
    if neg.any():
        clipped = float(-vals[neg].sum() * g.vweight / g.Nx ** g.d)
        vals[neg] = 0.0
    out = gr.Distribution(g, vals)
    return (out, clipped, vmin) if return_stats else out


# ---------------------------------------------------------------------------
# fluid substeps
# ---------------------------------------------------------------------------

def _rk3(y, rhs, dt):
    """SSP-RK3 on a tuple of arrays."""
    k = rhs(y)
    y1 = tuple(a + dt * b for a, b in zip(y, k))
    k = rhs(y1)
    y2 = tuple(0.75 * a + 0.25 * (b + dt * c) for a, b, c in zip(y, y1, k))
    k = rhs(y2)
    return tuple(a / 3.0 + 2.0 / 3.0 * (b + dt * c) for a, b, c in zip(y, y2, k))


def _maybe_dealias(a, d, on):
    return gr.dealias(a, d) if on else a


def _mass_rhs(m, u, dealias=False):
    d = u.shape[0]
    return -gr.divergence(_maybe_dealias(m * u, d, dealias))


def mass_step(m, u, dt: float, dealias: bool = False) -> np.ndarray:
    """SSP-RK3 for ``dm/dt = -div(m u)`` with ``u`` frozen.

    The spatial mean of ``m`` is conserved up to rounding.
    """
    m = np.asarray(m, dtype=float)
    u = np.asarray(u, dtype=float)
    if m.min() <= 0:
        raise VacuumError(f"m <= 0 (min {m.min():.3e})")
    (out,) = _rk3((m,), lambda y: (_mass_rhs(y[0], u, dealias),), dt)
    if out.min() <= 0:
        raise VacuumError(f"m <= 0 after mass step (min {out.min():.3e})")
    return out


def harmonic_mean(m) -> float:
    m = np.asarray(m, dtype=float)
    return float(1.0 / np.mean(1.0 / m))


def _momentum_rhs(m, u, rho_f, j_f, law, Theta, advect=True, mbar=None, dealias=False):
    """Right side of the velocity equation divided out by ``m``.

    With ``mbar`` set, only ``(1/m - 1/mbar) Lame u`` of the viscous term
    is kept (the rest is treated implicitly).
    """
    d = u.shape[0]
    rho = md.reconstruct_rho(m, rho_f, Theta)
    lame = gr.apply_lame(u)
    inv_m = 1.0 / m
    visc = (inv_m - 1.0 / mbar) * lame if mbar is not None else inv_m * lame
    out = visc + inv_m * (j_f - rho_f * u)
    if law.name != "off":
        out = out - law.pi_prime(rho) * gr.gradient(rho)
    if advect:
        grads = [gr.gradient(u[i]) for i in range(d)]
        adv = np.array([sum(u[j] * grads[i][j] for j in range(d)) for i in range(d)])
        out = out - np.array([_maybe_dealias(adv[i], d, dealias) for i in range(d)])
    return out


def _cn_half(u, tau, mbar):
    """Crank-Nicolson step of length ``tau`` for ``du/dt = Lame(u) / mbar``."""
    a = 0.5 * tau / mbar
    return gr.solve_lame_implicit(u + a * gr.apply_lame(u), a)


def _check_velocity(u):
    if not np.all(np.isfinite(u)):
        raise DivergenceError("non-finite fluid velocity")
    umax = float(np.abs(u).max())
    if umax > BLOWUP:
        raise DivergenceError(f"|u|_inf = {umax:.3e} exceeds {BLOWUP:g}")


def momentum_step(state: md.FluidState, f: gr.Distribution, law: md.PressureLaw, dt: float,
                  mode: str = "explicit", Theta: float = 0.99, advect: bool = True,
                  dealias: bool = False) -> np.ndarray:
    """Advance ``u`` by ``dt`` with ``m`` and the kinetic moments frozen.

    ``mode='explicit'`` uses SSP-RK3 on the full right side;
    ``'semi-implicit'`` wraps an explicit RK3 for the remainder between two
    Crank-Nicolson half steps of ``Lame(u) / mbar`` with ``mbar`` the
    harmonic mean of ``m``.
    """
    if mode not in MOMENTUM_MODES:
        raise ConfigError(f"unknown momentum mode {mode!r}")
    rho_f = gr.velocity_moment(f, 0)
    j_f = gr.velocity_moment(f, 1)
    m = state.m if state.m is not None else (1.0 - rho_f) * state.rho
    u = state.u
    if mode == "explicit":
        (u,) = _rk3((u,), lambda y: (_momentum_rhs(m, y[0], rho_f, j_f, law, Theta, advect,
                                                   None, dealias),), dt)
    else:
        mbar = harmonic_mean(m)
        u = _cn_half(u, 0.5 * dt, mbar)
        (u,) = _rk3((u,), lambda y: (_momentum_rhs(m, y[0], rho_f, j_f, law, Theta, advect,
                                                   mbar, dealias),), dt)
        u = _cn_half(u, 0.5 * dt, mbar)
    _check_velocity(u)
    return u


def fluid_step(m, u, f: gr.Distribution, law: md.PressureLaw, dt: float, Theta: float,
               mode: str = "explicit", advect: bool = True, dealias: bool = False):
    """Joint SSP-RK3 update of ``(m, u)`` with ``f`` frozen.

    Returns the new ``(m, u)``.
    """
    rho_f = gr.velocity_moment(f, 0)
    j_f = gr.velocity_moment(f, 1)
    mbar = harmonic_mean(m) if mode == "semi-implicit" else None

    def rhs(y):
        mm, uu = y
        return (_mass_rhs(mm, uu, dealias),
                _momentum_rhs(mm, uu, rho_f, j_f, law, Theta, advect, mbar, dealias))

    if mbar is not None:
        u = _cn_half(u, 0.5 * dt, mbar)
    m, u = _rk3((m, u), rhs, dt)
    if mbar is not None:
        u = _cn_half(u, 0.5 * dt, mbar)
    if m.min() <= 0:
        raise VacuumError(f"m <= 0 after fluid step (min {m.min():.3e})")
    _check_velocity(u)
    return m, u


# ---------------------------------------------------------------------------
# coupled step
# ---------------------------------------------------------------------------

def _frozen_fluid(m, u, *args, **kwargs):
    return m, u


def _force(m, u, f, law, eps, Theta):
    rho = md.reconstruct_rho(m, gr.velocity_moment(f, 0), Theta)
    return md.compute_force(md.FluidState(rho, u), law, eps)


def step(state: SimState, cfg: SolverConfig, law: md.PressureLaw,
         witness: md.BoundWitness, dt: Optional[float] = None) -> SimState:
    """Advance one time step.

    Strang: Vlasov ``dt/2`` / fluid ``dt`` / Vlasov ``dt/2``. Lie: Vlasov
    ``dt`` then fluid ``dt``. The bounds are re-checked at the end.
    """
    dt = cfg.dt if dt is None else dt
    Theta = witness.Theta
    f0, m0, u0, E0 = state.f, state.m, state.fluid.u, state.E
    kw = dict(mode=cfg.momentum_mode, advect=cfg.advect_momentum, dealias=cfg.dealias)
    advance = _frozen_fluid if cfg.fluid_frozen else fluid_step
    tt, io = cfg.tail_tol, cfg.interp_order
    if cfg.splitting == "strang":
        E = E0
        if cfg.coupling == "midpoint":
            fa = vlasov_step(f0, E0, 0.5 * dt, tt, order=io)
            mp, up = advance(m0, u0, fa, law, dt, Theta, **kw)
            fb = vlasov_step(fa, E0, 0.5 * dt, tt, order=io)
            E = 0.5 * (E0 + _force(mp, up, fb, law, cfg.eps, Theta))
        fa, c1, n1 = vlasov_step(f0, E, 0.5 * dt, tt, True, io)
        m1, u1 = advance(m0, u0, fa, law, dt, Theta, **kw)
        f1, c2, n2 = vlasov_step(fa, E, 0.5 * dt, tt, True, io)
        clipped, vmin = c1 + c2, min(n1, n2)
        segs = [(state.t, state.t + 0.5 * dt, E), (state.t + 0.5 * dt, state.t + dt, E)]
    else:
        f1, clipped, vmin = vlasov_step(f0, E0, dt, tt, True, io)
        m1, u1 = advance(m0, u0, f1, law, dt, Theta, **kw)
        segs = [(state.t, state.t + dt, E0)]
    rho_f = gr.velocity_moment(f1, 0)
    rho1 = md.reconstruct_rho(m1, rho_f, Theta)
    fluid = md.FluidState(rho1, u1, m1)
    verdict = md.check_bounds(fluid, f1, witness)
    if not verdict:
        raise BoundError("bound condition violated at t = "
                         f"{state.t + dt:.6g}: {verdict.describe()}")
    E1 = md.compute_force(fluid, law, cfg.eps)
    history = state.history
    if cfg.record_history:
        history.extend(segs)
    return SimState(state.t + dt, f1, fluid, E1, state.step_index + 1, clipped,
                    state.clipped_total + clipped, vmin, history)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

class MixedNorm:
    """Running ``N_{m,r}`` accumulator.

    ``sup ||f||_{H^{m-1}_r} + ||rho||_{L^2 H^m} + sup ||u||_{H^m}
    + ||u||_{L^2 H^{m+1}}`` with trapezoid time integrals. Returns NaN
    when the grid does not resolve the orders involved.
    """

    def __init__(self, m: int = 4, r: float = 3.0):
        self.m, self.r = m, r
        self.sup_f = self.sup_u = 0.0
        self.int_rho = self.int_u = 0.0
        self._prev = None
        self.resolved = True

    def update(self, t, f: gr.Distribution, rho, u) -> float:
        if not self.resolved:
            return math.nan
        try:
            nf = gr.weighted_phase_norm(f, self.m - 1, self.r)
            nr = gr.sobolev_norm(rho, self.m)
            nu = gr.sobolev_norm(u, self.m, d=f.grid.d)
            nu1 = gr.sobolev_norm(u, self.m + 1, d=f.grid.d)
        except ResolutionError as exc:
            log.warning("N_mr not resolved on this grid: %s", exc)
            self.resolved = False
            return math.nan
        self.sup_f = max(self.sup_f, nf)
        self.sup_u = max(self.sup_u, nu)
        if self._prev is not None:
            t0, r0, u0 = self._prev
            self.int_rho += 0.5 * (t - t0) * (r0 ** 2 + nr ** 2)
            self.int_u += 0.5 * (t - t0) * (u0 ** 2 + nu1 ** 2)
        self._prev = (t, nr, nu1)
        return self.value

    @property
    def value(self) -> float:
        if not self.resolved:
            return math.nan
        return self.sup_f + math.sqrt(self.int_rho) + self.sup_u + math.sqrt(self.int_u)


def conservation_residual(rho_f0, j_f0, rho_f1, j_f1, dt: float) -> float:
    """``|| (rho_f1 - rho_f0)/dt + div (j_f0 + j_f1)/2 ||_{L^2}`` (centered at the midpoint)."""
    res = (rho_f1 - rho_f0) / dt + 0.5 * (gr.divergence(j_f0) + gr.divergence(j_f1))
    return gr.l2_norm(res)


@dataclass
class MomentDefects:
    """Lagrangian versus evolved moments at time ``t``."""

    t: float
    rho_f_defect: float
    j_f_defect: float
    conservation_residual: float

    def to_dict(self) -> dict:
        return {"t": self.t, "rho_f_defect": self.rho_f_defect, "j_f_defect": self.j_f_defect,
                "conservation_residual": self.conservation_residual}


def moment_consistency_check(state: SimState, f_in: gr.Distribution, history=None,
                             dt_sub: Optional[float] = None) -> MomentDefects:
    """Compare moments of the evolved ``f`` with those of the pushforward of ``f_in``.

    The Lagrangian side follows the stored force history. The
    conservation residual is formed by centered differencing of the
    pushforward moments over the last history segment.
    """
    history = state.history if history is None else history
    if state.t == 0:
        return MomentDefects(0.0, 0.0, 0.0, math.nan)
    if not history:
        raise ConfigError("force history is empty; run with record_history enabled")
    F = ch.GriddedForce.from_segments(history)
    if abs(F.t1 - state.t) > 1e-9 * max(1.0, state.t) or F.t0 != 0.0:
        raise ConfigError(f"force history covers [{F.t0}, {F.t1}], state is at t = {state.t}")
    seg = max(s1 - s0 for s0, s1, _ in history)
    dt_sub = seg if dt_sub is None else dt_sub
    lag = ch.pushforward_representation(f_in, F, state.t, dt_sub=dt_sub)
    rf_a, jf_a = gr.velocity_moment(state.f, 0), gr.velocity_moment(state.f, 1)
    rf_b, jf_b = gr.velocity_moment(lag, 0), gr.velocity_moment(lag, 1)
    t_prev = history[-1][0]
    if t_prev > 0:
        lag_prev = ch.pushforward_representation(f_in, F, t_prev, dt_sub=dt_sub)
    else:
        lag_prev = f_in
    res = conservation_residual(gr.velocity_moment(lag_prev, 0), gr.velocity_moment(lag_prev, 1),
                                rf_b, jf_b, state.t - t_prev)
    return MomentDefects(state.t, gr.l2_norm(rf_a - rf_b), gr.l2_norm(jf_a - jf_b, d=state.grid.d),
                         res)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    """Outcome of :func:`run`.

    ``status`` is ``'completed'``, ``'failed'`` (error while stepping) or
    ``'refused'`` (initial checks failed).
    """

    status: str
    state: Optional[SimState]
    rows: list
    summary: dict
    error: Optional[BaseException] = None
    reports: dict = field(default_factory=dict)
    out_dir: Optional[Path] = None

    @property
    def exit_code(self) -> int:
        if self.error is None:
            return 0
        return getattr(self.error, "exit_code", 3)


def _fmt(x) -> str:
    return "%.17g" % x


def write_csv(path, rows) -> None:
    """Diagnostics table with ``%.17g`` formatting."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[c]) for c in CSV_COLUMNS) + "\n")


def _snapshot(out: Path, st: SimState) -> list:
    g = st.grid
    sub = out / "snapshots" / f"step_{st.step_index:06d}"
    fields = {"f": st.f.values, "rho": st.fluid.rho, "m": st.m, "u": st.fluid.u,
              "rho_f": gr.velocity_moment(st.f, 0), "E": st.E}
    paths = []
    for name, arr in fields.items():
        gr.write_field(sub, name, arr, g, st.t)
        paths += [str((sub / f"{name}.bin").relative_to(out)),
                  str((sub / f"{name}.json").relative_to(out))]
    return paths


def _failure_record(exc: BaseException, st: Optional[SimState]) -> dict:
    return {"error": type(exc).__name__, "message": str(exc),
            "exit_code": getattr(exc, "exit_code", 3),
            "t": None if st is None else st.t,
            "step": None if st is None else st.step_index}


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _row(st: SimState, margin, nmr, div_defect) -> dict:
    rf = gr.velocity_moment(st.f, 0)
    return {"t": st.t, "fluid_mass": float(np.mean(st.m)), "particle_mass": st.f.total_mass(),
            "clipped_mass": st.clipped_step, "min_f": st.min_f_raw,
            "min_rho": float(st.fluid.rho.min()), "max_rhof": float(rf.max()),
            "penrose_margin": margin, "N_mr": nmr, "div_defect": div_defect}


def precheck(f: gr.Distribution, fluid: md.FluidState, law: md.PressureLaw,
             witness: md.BoundWitness, cfg: SolverConfig):
    """Refusal checks on the initial data; returns the initial Penrose report or None."""
    adm = md.check_pressure_admissible(law)
    if not adm:
        raise ConfigError(f"pressure law {law.name} is not admissible: {adm.reason}")
    if not witness.Theta < 1:
        raise ConfigError(f"Theta must be < 1, got {witness.Theta}")
    verdict = md.check_initial_hypotheses(fluid, f, witness)
    if not verdict:
        raise BoundError(f"initial data violate the hypotheses: {verdict.describe()}")
    f.check_tail(cfg.tail_tol)
    m = fluid.m if fluid.m is not None else (1 - gr.velocity_moment(f, 0)) * fluid.rho
    check_cfl(f.grid, m, cfg)
    report = None
    if cfg.penrose_enabled:
        report = pn.check_condition(f, fluid, law, cfg.penrose_sampling, cfg.penrose_variant,
                                    cfg.c_required)
        if cfg.require_penrose and not report.verdict:
            raise StabilityError(f"Penrose margin {report.margin:.4g} <= c = {cfg.c_required:g}")
    return report


def run(f0: gr.Distribution, fluid0: md.FluidState, law: md.PressureLaw,
        witness: md.BoundWitness, cfg: SolverConfig, out_dir=None,
        meta: Optional[dict] = None) -> RunResult:
    """Integrate to ``cfg.T_end`` with diagnostics.

    Writes ``diagnostics.csv``, ``summary.json``, snapshots and, on error,
    ``failure.json`` into ``out_dir`` when given. Errors are caught and
    returned in the result.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows, files, reports = [], [], {}
    st = None
    try:
        report0 = precheck(f0, fluid0, law, witness, cfg)
    except ThickSprayError as exc:
        summary = {"status": "refused", "failure": _failure_record(exc, None), "meta": meta or {}}
        if out is not None:
            _write_json(out / "failure.json", summary["failure"])
            summary["files"] = ["failure.json"]
            _write_json(out / "summary.json", summary)
        return RunResult("refused", None, rows, summary, exc, reports, out)

    st = initial_state(f0, fluid0, law, cfg.eps)
    nmr = MixedNorm(cfg.sobolev_m, cfg.sobolev_r)
    margins = []
    if report0 is not None:
        reports["initial"] = report0.to_dict()
        margins.append((0.0, report0.margin))
    rows.append(_row(st, report0.margin if report0 else math.nan,
                     nmr.update(0.0, st.f, st.fluid.rho, st.fluid.u), math.nan))
    if out is not None and cfg.snapshot_every:
        files += _snapshot(out, st)
    fluid_defects, particle_defects, div_defects = [], [], []
    n = cfg.n_steps
    error = None
    monitor = cfg.monitor(f0.grid)
    try:
        for i in range(n):
            dt = min(cfg.dt, cfg.T_end - st.t) if i == n - 1 else cfg.dt
            prev = st
            st = step(prev, cfg, law, witness, dt)
            margin = math.nan
            last = i == n - 1
            if cfg.penrose_enabled and (last or st.step_index % cfg.penrose_cadence == 0):
                rep = pn.check_condition(st.f, st.fluid, law,
                                         cfg.penrose_sampling if last else monitor,
                                         cfg.penrose_variant, cfg.c_required,
                                         band_tol=cfg.penrose_band_tol)
                margin = rep.margin
                margins.append((st.t, margin))
                if last:
                    reports["final"] = rep.to_dict()
            rf0, rf1 = gr.velocity_moment(prev.f, 0), gr.velocity_moment(st.f, 0)
            dd = conservation_residual(rf0, gr.velocity_moment(prev.f, 1), rf1,
                                       gr.velocity_moment(st.f, 1), dt)
            row = _row(st, margin, nmr.update(st.t, st.f, st.fluid.rho, st.fluid.u), dd)
            fluid_defects.append(abs(row["fluid_mass"] - rows[-1]["fluid_mass"]))
            particle_defects.append(abs(row["particle_mass"] - row["clipped_mass"]
                                        - rows[-1]["particle_mass"]))
            div_defects.append(dd)
            rows.append(row)
            if out is not None and cfg.snapshot_every and (
                    st.step_index % cfg.snapshot_every == 0 or last):
                files += _snapshot(out, st)
    except ThickSprayError as exc:
        error = exc
        log.error("run halted at t = %.6g: %s", st.t, exc)

    status = "completed" if error is None else "failed"
    summary = {
        "status": status,
        "t_final": st.t,
        "steps": st.step_index,
        "min_penrose_margin": min((m for _, m in margins), default=math.nan),
        "initial_penrose_margin": margins[0][1] if margins else math.nan,
        "final_penrose_margin": reports.get("final", {}).get("margin", math.nan),
        "max_clipped_mass": max((r["clipped_mass"] for r in rows), default=0.0),
        "total_clipped_mass": st.clipped_total,
        "max_fluid_mass_defect": max(fluid_defects, default=0.0),
        "max_particle_mass_defect": max(particle_defects, default=0.0),
        "max_div_defect": max(div_defects, default=math.nan),
        "N_mr_final": nmr.value,
        "bounds": md.check_bounds(st.fluid, st.f, witness).extrema,
        "config": cfg.to_dict(),
        "meta": meta or {},
    }
    if error is not None:
        summary["failure"] = _failure_record(error, st)
    if out is not None:
        write_csv(out / "diagnostics.csv", rows)
        files = ["diagnostics.csv"] + files
        if reports:
            _write_json(out / "penrose.json", reports)
            files.append("penrose.json")
        if error is not None:
            _write_json(out / "failure.json", summary["failure"])
            files.append("failure.json")
        summary["files"] = files
        _write_json(out / "summary.json", summary)
    return RunResult(status, st, rows, summary, error, reports, out)


def output_dir(cli_out=None, config_out=None) -> Optional[Path]:
    """Output directory precedence: command line, ``THICKSPRAY_OUT``, config."""
    for cand in (cli_out, os.environ.get("THICKSPRAY_OUT"), config_out):
        if cand:
            return Path(cand)
    return None
