"""Pressure laws, fluid state, regularized force, Brinkman source and bound checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import grid as gr
from .errors import BoundError, NumericInputError, VacuumError


# ---------------------------------------------------------------------------
# pressure
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PressureLaw:
    """Barotropic pressure ``p(rho)`` with derivative ``dp``.

    Use :meth:`power` for ``rho**gamma`` and :meth:`off` to switch the
    pressure off in verification runs.
    """

    p: Callable
    dp: Callable
    name: str = "custom"
    gamma: Optional[float] = None

    @classmethod
    def power(cls, gamma: float) -> "PressureLaw":
        g = float(gamma)
        return cls(lambda r: np.power(r, g), lambda r: g * np.power(r, g - 1.0),
                   name=f"rho^{g:g}", gamma=g)

    @classmethod
    def off(cls) -> "PressureLaw":
        return cls(lambda r: np.zeros_like(np.asarray(r, dtype=float)),
                   lambda r: np.zeros_like(np.asarray(r, dtype=float)), name="off")

    def pi_prime(self, rho):
        """``p'(rho)/rho``, so that ``grad p / rho = pi'(rho) grad rho``."""
        return self.dp(rho) / rho


@dataclass(frozen=True)
class AdmissibilityVerdict:
    ok: bool
    witness_rho: Optional[float] = None
    reason: str = ""

    def __bool__(self):
        return self.ok


def check_pressure_admissible(law: PressureLaw, rho_min: float = 1e-6,
                              rho_max: float = 1e3, n: int = 512) -> AdmissibilityVerdict:
    """Sampled check of ``p(0)=0``, ``p' > 0`` and ``rho p'`` nondecreasing.

    Returns the first violating sample on a log grid of ``[rho_min, rho_max]``.
    """
    rho = np.logspace(np.log10(rho_min), np.log10(rho_max), n)
    with np.errstate(all="ignore"):
        p0 = np.asarray(law.p(np.array([0.0])), dtype=float)
        dp = np.asarray(law.dp(rho), dtype=float)
    if not (np.all(np.isfinite(dp)) and np.all(np.isfinite(p0))):
        raise NumericInputError(f"pressure law {law.name} is not finite on the sample")
    if abs(p0[0]) > 0:
        return AdmissibilityVerdict(False, 0.0, "p(0) != 0")
    g = rho * dp
    bad_pos = np.flatnonzero(dp <= 0)
    # relative slack absorbs roundoff on flat stretches
    dec = np.flatnonzero(g[1:] < g[:-1] - 1e-12 * np.abs(g[:-1])) + 1
    first_pos = bad_pos[0] if bad_pos.size else n
    first_dec = dec[0] if dec.size else n
    if first_pos == n and first_dec == n:
        return AdmissibilityVerdict(True)
    if first_pos <= first_dec:
        return AdmissibilityVerdict(False, float(rho[first_pos]), "p' <= 0")
    return AdmissibilityVerdict(False, float(rho[first_dec]), "rho p'(rho) decreasing")


# ---------------------------------------------------------------------------
# fluid state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FluidState:
    """Fluid density ``rho``, velocity ``u`` and conserved mass ``m``.

    ``m = (1 - rho_f) rho``; it may be left as None when no particle
    density is attached.
    """

    rho: np.ndarray
    u: np.ndarray
    m: Optional[np.ndarray] = None

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        u = np.asarray(self.u, dtype=float)
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(u))):
            raise NumericInputError("fluid state has non-finite entries")
        if rho.min() <= 0:
            raise VacuumError(f"rho <= 0 (min {rho.min():.3e})")
        if u.shape != (rho.ndim,) + rho.shape:
            raise ValueError(f"u shape {u.shape} incompatible with rho shape {rho.shape}")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "u", u)
        if self.m is not None:
            object.__setattr__(self, "m", np.asarray(self.m, dtype=float))

    @property
    def d(self) -> int:
        return self.rho.ndim

    @classmethod
    def from_rho(cls, rho, u, rho_f) -> "FluidState":
        rho = np.asarray(rho, dtype=float)
        return cls(rho, u, (1.0 - np.asarray(rho_f)) * rho)

    @classmethod
    def from_mass(cls, m, u, rho_f, Theta: float) -> "FluidState":
        return cls(reconstruct_rho(m, rho_f, Theta), u, np.asarray(m, dtype=float))

    def alpha(self, rho_f) -> np.ndarray:
        return 1.0 - np.asarray(rho_f)


def reconstruct_rho(m, rho_f, Theta: float) -> np.ndarray:
    """``rho = m / (1 - rho_f)`` guarded by the floor ``(1 - Theta)/2``."""
    alpha = 1.0 - np.asarray(rho_f, dtype=float)
    floor = 0.5 * (1.0 - Theta)
    if alpha.min() < floor:
        raise BoundError(f"1 - rho_f = {alpha.min():.4g} below floor (1-Theta)/2 = {floor:.4g}")
    m = np.asarray(m, dtype=float)
    if m.min() <= 0:
        raise VacuumError(f"m <= 0 (min {m.min():.3e})")
    return m / alpha


# ---------------------------------------------------------------------------
# force and source
# ---------------------------------------------------------------------------

def compute_force(state: FluidState, law: PressureLaw, eps: float, f=None) -> np.ndarray:
    """Regularized kinetic force ``E = u - p'(rho) grad(J_eps rho)``.

    ``f`` is accepted for signature symmetry and not used.
    """
    rho = state.rho
    if rho.min() <= 0:
        raise VacuumError("rho <= 0")
    grad = gr.gradient(gr.apply_j_epsilon(rho, eps))
    return state.u - law.dp(rho) * grad


def brinkman_source(f: gr.Distribution, u: np.ndarray) -> np.ndarray:
    """Drag ``j_f - rho_f u`` exerted by the particles on the fluid."""
    return gr.velocity_moment(f, 1) - gr.velocity_moment(f, 0) * np.asarray(u)


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundWitness:
    """Constants of the bound conditions."""

    Theta: float
    mu: float
    theta_lower: float
    theta_upper: float


@dataclass
class BoundVerdict:
    ok: bool
    failures: list = field(default_factory=list)
    extrema: dict = field(default_factory=dict)

    def __bool__(self):
        return self.ok

    def describe(self) -> str:
        if self.ok:
            return "all bounds hold"
        return "; ".join(f"{name}: {val:.6g} vs limit {lim:.6g} at {loc}"
                         for name, val, lim, loc in self.failures)


def _measure(rho_f, rho):
    m = (1.0 - rho_f) * rho
    ext = {"max_rho_f": float(rho_f.max()), "min_rho": float(rho.min()),
           "min_m": float(m.min()), "max_m": float(m.max())}
    locs = {"max_rho_f": np.unravel_index(np.argmax(rho_f), rho_f.shape),
            "min_rho": np.unravel_index(np.argmin(rho), rho.shape),
            "min_m": np.unravel_index(np.argmin(m), m.shape),
            "max_m": np.unravel_index(np.argmax(m), m.shape)}
    return ext, {k: tuple(int(i) for i in v) for k, v in locs.items()}


def check_bounds(state: FluidState, f: gr.Distribution, witness: BoundWitness) -> BoundVerdict:
    """Check the four bound inequalities on the grid."""
    rho_f = gr.velocity_moment(f, 0)
    ext, loc = _measure(rho_f, state.rho)
    w = witness
    tests = [
        ("rho_f <= (Theta+1)/2", ext["max_rho_f"], 0.5 * (w.Theta + 1), loc["max_rho_f"],
         ext["max_rho_f"] <= 0.5 * (w.Theta + 1)),
        ("rho >= mu/2", ext["min_rho"], 0.5 * w.mu, loc["min_rho"], ext["min_rho"] >= 0.5 * w.mu),
        ("(1-rho_f) rho >= theta_lower/2", ext["min_m"], 0.5 * w.theta_lower, loc["min_m"],
         ext["min_m"] >= 0.5 * w.theta_lower),
        ("(1-rho_f) rho <= 2 theta_upper", ext["max_m"], 2 * w.theta_upper, loc["max_m"],
         ext["max_m"] <= 2 * w.theta_upper),
    ]
    failures = [(n, v, lim, l) for n, v, lim, l, ok in tests if not ok]
    return BoundVerdict(not failures, failures, ext)


def check_initial_hypotheses(state: FluidState, f: gr.Distribution,
                             witness: BoundWitness) -> BoundVerdict:
    """Strict hypotheses on the initial data.

    ``rho_f < Theta < 1``, ``rho >= mu`` and
    ``theta_lower <= (1-rho_f) rho <= theta_upper``.
    """
    rho_f = gr.velocity_moment(f, 0)
    ext, loc = _measure(rho_f, state.rho)
    w = witness
    tests = [
        ("rho_f < Theta", ext["max_rho_f"], w.Theta, loc["max_rho_f"],
         ext["max_rho_f"] < w.Theta < 1),
        ("rho >= mu", ext["min_rho"], w.mu, loc["min_rho"], ext["min_rho"] >= w.mu),
        ("(1-rho_f) rho >= theta_lower", ext["min_m"], w.theta_lower, loc["min_m"],
         ext["min_m"] >= w.theta_lower),
        ("(1-rho_f) rho <= theta_upper", ext["max_m"], w.theta_upper, loc["max_m"],
         ext["max_m"] <= w.theta_upper),
    ]
    failures = [(n, v, lim, l) for n, v, lim, l, ok in tests if not ok]
    return BoundVerdict(not failures, failures, ext)


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bump:
    """``amplitude * exp(-|v - center|^2 / width^2)``."""

    amplitude: float
    center: Sequence[float] | float = 0.0
    width: float = 1.0


@dataclass(frozen=True)
class KineticSpec:
    bumps: tuple = ()
    modulation_mode: int = 0
    modulation_amp: float = 0.0


@dataclass(frozen=True)
class FluidSpec:
    rho0: float = 1.0
    rho_perturbation_mode: int = 0
    rho_perturbation_amp: float = 0.0
    u0: Sequence[float] | float = 0.0


def _as_vec(c, d):
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if c.size == 1:
        c = np.repeat(c, d)
    if c.size != d:
        raise ValueError(f"expected {d} components, got {c.size}")
    return c


def bump_profile(grid: gr.PhaseGrid, bumps) -> np.ndarray:
    """Velocity profile on ``velocity_shape`` from a list of bumps."""
    vm = grid.vmesh()
    out = np.zeros(grid.velocity_shape)
    for b in bumps:
        c = _as_vec(b.center, grid.d)
        r2 = sum((vm[i] - c[i]) ** 2 for i in range(grid.d))
        out += b.amplitude * np.exp(-r2 / b.width ** 2)
    return out


def build_initial(grid: gr.PhaseGrid, kinetic: KineticSpec, fluid: FluidSpec):
    """Initial ``(Distribution, FluidState)`` from specs.

    The spatial modulations act along the first coordinate.
    """
    if len(kinetic.bumps) > 4:
        raise ValueError("at most 4 bumps are supported")
    x0 = grid.xmesh()[0]
    mod = 1.0 + kinetic.modulation_amp * np.cos(kinetic.modulation_mode * x0)
    prof = bump_profile(grid, kinetic.bumps)
    vals = mod.reshape(grid.spatial_shape + (1,) * grid.d) * prof
    f = gr.Distribution(grid, vals)
    rho = fluid.rho0 * (1.0 + fluid.rho_perturbation_amp * np.cos(fluid.rho_perturbation_mode * x0))
    u0 = _as_vec(fluid.u0, grid.d)
    u = np.broadcast_to(u0.reshape((grid.d,) + (1,) * grid.d),
                        (grid.d,) + grid.spatial_shape).copy()
    state = FluidState.from_rho(rho, u, gr.velocity_moment(f, 0))
    return f, state
