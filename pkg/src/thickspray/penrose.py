"""Penrose function, sampled stability margin and sufficient-condition tags.

For a unit direction ``khat`` the ray function is

    ray(u) = i khat . (F_v grad_v f)(x, khat u) = -u (F_v f)(x, khat u),

with ``F_v f(xi) = sum_j exp(-i xi . v_j) f(x, v_j) dv^d``. Substituting
``u = |k| s`` turns the time integral into a Laplace transform,

    int_0^inf e^{-(gamma + i tau) s} ik . (F_v grad_v f)(x, k s) ds
        = int_0^inf e^{-z u} ray(u) du,    z = (gamma + i tau) / |k|,

so the integral only depends on ``z`` and ``khat``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import grid as gr
from .errors import BoundError, ConfigError, ResolutionError

GAMMA_FLOOR = 1e-6
ENVELOPE_CUT = 1e-12
ENVELOPE_BAND = 1e-10
QUAD_TOL = 1e-9
GL_ORDER = 16
DYADIC_LEVELS = 12
MAX_LEVEL = 7
Z_CHUNK = 2048

_GL_X, _GL_W = np.polynomial.legendre.leggauss(GL_ORDER)


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrequencyPoint:
    gamma: float
    tau: float
    k: tuple

    def __post_init__(self):
        k = tuple(float(c) for c in np.atleast_1d(self.k))
        object.__setattr__(self, "k", k)
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not np.linalg.norm(k) > 0:
            raise ValueError("k must be nonzero")

    @property
    def knorm(self) -> float:
        return float(np.linalg.norm(self.k))

    @property
    def z(self) -> complex:
        return complex(self.gamma, self.tau) / self.knorm

    @property
    def khat(self) -> np.ndarray:
        return np.asarray(self.k) / self.knorm


@dataclass(frozen=True)
class PenroseSampling:
    """Sampling of ``T^d x S^+``.

    ``n_phi`` angles of ``(gamma, tau)`` on ``[-pi/2, pi/2]``, ``n_beta``
    balance angles between ``|k|`` and ``|(gamma, tau)|`` on ``(0, pi/2]``,
    ``n_khat`` directions of ``k`` (only used for ``d = 2``), and every
    ``x_stride``-th grid point per axis. :meth:`refined` returns a sampling
    whose nodes contain the current ones.
    """

    n_phi: int = 64
    n_beta: int = 48
    n_khat: int = 32
    x_stride: int = 1

    def __post_init__(self):
        errs = [f"{name} must be a positive integer, got {getattr(self, name)}"
                for name in ("n_phi", "n_beta", "n_khat", "x_stride")
                if not (isinstance(getattr(self, name), (int, np.integer))
                        and getattr(self, name) >= 1)]
        if errs:
            raise ConfigError(errs)

    def refined(self) -> "PenroseSampling":
        return PenroseSampling(2 * self.n_phi - 1 if self.n_phi > 1 else 3,
                               2 * self.n_beta, 2 * self.n_khat,
                               max(1, self.x_stride // 2))

    def phis(self) -> np.ndarray:
        if self.n_phi == 1:
            return np.zeros(1)
        return np.linspace(-np.pi / 2, np.pi / 2, self.n_phi)

    def betas(self) -> np.ndarray:
        return np.linspace(0.0, np.pi / 2, self.n_beta + 1)[1:]

    def khats(self, d: int) -> np.ndarray:
        if d == 1:
            return np.array([[1.0], [-1.0]])
        th = 2 * np.pi * np.arange(self.n_khat) / self.n_khat
        return np.stack([np.cos(th), np.sin(th)], axis=1)

    def to_dict(self) -> dict:
        return {"n_phi": self.n_phi, "n_beta": self.n_beta, "n_khat": self.n_khat,
                "x_stride": self.x_stride}


@dataclass
class PenroseReport:
    """Sampled margin ``inf |1 - P|`` with its argmin and verdict."""

    margin: float
    argmin: dict
    samples: dict
    variant: str
    c_required: float
    verdict: bool = field(init=False)

    def __post_init__(self):
        self.verdict = bool(self.margin > self.c_required)

    def to_dict(self) -> dict:
        return {"margin": float(self.margin), "argmin": self.argmin,
                "variant": self.variant, "samples": self.samples,
                "c_required": float(self.c_required), "pass": self.verdict,
                "kind": "sampled margin"}


# ---------------------------------------------------------------------------
# ray transform
# ---------------------------------------------------------------------------

def _vnodes(grid: gr.PhaseGrid) -> np.ndarray:
    return grid.vmesh().reshape(grid.d, -1)


def _ray_values(profiles: np.ndarray, grid: gr.PhaseGrid, khat: np.ndarray,
                u: np.ndarray) -> np.ndarray:
    """Ray function at ``u`` for each profile; shape ``(len(u), nprof)``.

    ``profiles`` has shape ``(nprof, Nv^d)``.
    """
    w = khat @ _vnodes(grid)  # khat . v_j
    E = np.exp(-1j * np.outer(u, w))
    Fv = E @ profiles.T * grid.vweight
    return -u[:, None] * Fv


def _x_index(grid, x):
    idx = tuple(np.atleast_1d(x).astype(int))
    if len(idx) != grid.d:
        raise ValueError(f"x index must have {grid.d} entries")
    return idx


def ray_transform(f: gr.Distribution, x, khat, s) -> np.ndarray:
    """``i khat . (F_v grad_v f)(x, khat s)`` at grid point index ``x``."""
    g = f.grid
    khat = np.atleast_1d(np.asarray(khat, dtype=float))
    if abs(np.linalg.norm(khat) - 1.0) > 1e-12:
        raise ValueError("khat must be a unit vector")
    prof = f.values[_x_index(g, x)].reshape(1, -1)
    s_arr = np.atleast_1d(np.asarray(s, dtype=float))
    out = _ray_values(prof, g, khat, s_arr)[:, 0]
    return out if np.ndim(s) else complex(out[0])


def _cutoff(profiles, grid, khats, band_tol=ENVELOPE_BAND):
    """Truncation point where the ray envelope drops below ``1e-12`` of peak.

    Raises ResolutionError when the envelope on the outer tenth of the
    resolved band ``|u| <= pi/dv`` is not below ``band_tol`` times its peak.
    """
    band = np.pi / grid.dv
    u = np.linspace(0.0, band, 2049)
    env = np.zeros_like(u)
    for kh in khats:
        env = np.maximum(env, np.abs(_ray_values(profiles, grid, kh, u)).max(axis=1))
    peak = env.max()
    if peak == 0:
        return None
    tail = np.maximum.accumulate(env[::-1])[::-1]
    # outer tenth of the band: symmetric profiles vanish exactly at the edge
    edge = tail[int(0.9 * (len(u) - 1))]
    if edge >= band_tol * peak:
        raise ResolutionError(f"velocity spectrum not decayed in the resolved band "
                              f"(edge/peak = {edge / peak:.2e}); refine Nv or Vmax")
    below = np.flatnonzero(tail < ENVELOPE_CUT * peak)
    i = below[0] if below.size else len(u) - 1
    return float(u[min(i + 1, len(u) - 1)])


def _nodes(u_max: float, level: int):
    edges = u_max * np.concatenate([[0.0], 2.0 ** -np.arange(DYADIC_LEVELS, -1, -1)])
    sub = 2 ** level
    e = np.concatenate([np.linspace(a, b, sub + 1)[:-1] for a, b in zip(edges[:-1], edges[1:])]
                       + [[u_max]])
    a, b = e[:-1], e[1:]
    nodes = (0.5 * (b - a)[:, None] * _GL_X[None, :] + 0.5 * (a + b)[:, None]).ravel()
    weights = (0.5 * (b - a)[:, None] * _GL_W[None, :]).ravel()
    return nodes, weights


def _laplace(z: np.ndarray, nodes, weights, R):
    out = np.empty((z.size, R.shape[1]), dtype=complex)
    chunk = max(1, min(Z_CHUNK, int(4e6 // nodes.size)))
    for lo in range(0, z.size, chunk):
        zc = z[lo:lo + chunk]
        out[lo:lo + chunk] = (np.exp(-np.outer(zc, nodes)) * weights) @ R
    return out


def laplace_integrals(profiles: np.ndarray, grid: gr.PhaseGrid, khats: np.ndarray,
                      z: np.ndarray, tol: float = QUAD_TOL, absolute: bool = False,
                      band_tol: float = ENVELOPE_BAND):
    """``int_0^inf e^{-z u} ray(u) du`` for all ``z``, profiles and directions.

    Composite Gauss-Legendre on dyadic panels over ``[0, u_max]``; panels are
    split in two until the largest change is below ``tol``.

    Returns
    -------
    ndarray, shape ``(len(z), nprof, len(khats))``
    """
    z = np.asarray(z, dtype=complex).ravel()
    nprof = profiles.shape[0]
    u_max = _cutoff(profiles, grid, khats, band_tol)
    if u_max is None:
        return np.zeros((z.size, nprof, len(khats)), dtype=complex)
    prev = None
    for level in range(MAX_LEVEL + 1):
        nodes, weights = _nodes(u_max, level)
        R = np.concatenate([_ray_values(profiles, grid, kh, nodes) for kh in khats], axis=1)
        if absolute:
            R = np.abs(R).astype(complex)
        cur = _laplace(z, nodes, weights, R)
        if prev is not None:
            scale = max(1.0, float(np.abs(cur).max()))
            if np.abs(cur - prev).max() < tol * scale:
                break
        prev = cur
    else:
        raise ResolutionError("Laplace quadrature did not converge")
    return cur.reshape(z.size, len(khats), nprof).transpose(0, 2, 1)


# ---------------------------------------------------------------------------
# Penrose function
# ---------------------------------------------------------------------------

def prefactor(rho_f, rho, law) -> np.ndarray:
    """``p'(rho) rho / (1 - rho_f)``."""
    rho_f = np.asarray(rho_f, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if np.any(rho_f >= 1.0):
        raise BoundError("rho_f >= 1: Penrose prefactor has a pole")
    return law.dp(rho) * rho / (1.0 - rho_f)


def _weight(knorm, variant):
    if variant == "standard":
        return 1.0 / (1.0 + knorm ** 2)
    if variant == "optimal":
        return 1.0
    raise ConfigError(f"unknown Penrose variant {variant!r}")


def _at(field_, idx):
    a = np.asarray(field_, dtype=float)
    return float(a) if a.ndim == 0 else float(a[idx])


def penrose_value(f: gr.Distribution, rho_f, rho, law, x, point: FrequencyPoint,
                  variant: str = "standard") -> complex:
    """Penrose function at grid point index ``x`` and frequency ``point``.

    ``rho_f`` and ``rho`` may be fields or scalars.
    """
    g = f.grid
    idx = _x_index(g, x)
    C = float(prefactor(_at(rho_f, idx), _at(rho, idx), law))
    W = _weight(point.knorm, variant)
    prof = f.values[idx].reshape(1, -1)
    khat = point.khat
    if khat.size != g.d:
        raise ValueError(f"k must have {g.d} components")
    I = laplace_integrals(prof, g, khat[None, :], np.array([point.z]))
    return complex(C * W * I[0, 0, 0])


def penrose_majorant(f: gr.Distribution, rho_f, rho, law, x, point: FrequencyPoint,
                     variant: str = "standard") -> float:
    """Upper bound ``C W int_0^inf |ray(u)| du`` for ``|P|`` at this point."""
    g = f.grid
    idx = _x_index(g, x)
    C = float(prefactor(_at(rho_f, idx), _at(rho, idx), law))
    W = _weight(point.knorm, variant)
    prof = f.values[idx].reshape(1, -1)
    I = laplace_integrals(prof, g, point.khat[None, :], np.array([0.0]), tol=1e-6,
                          absolute=True)
    return float(C * W * I[0, 0, 0].real)


def min_over_lambda(z) -> np.ndarray:
    """``inf_{lambda in (0, 1]} |1 - lambda z|`` in closed form."""
    z = np.asarray(z, dtype=complex)
    a2 = np.abs(z) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(a2 > 0, z.real / np.where(a2 > 0, a2, 1.0), 0.0)
    lam = np.clip(lam, 0.0, 1.0)
    out = np.abs(1.0 - lam * z)
    out = np.where(z.real <= 0, 1.0, out)
    return out if out.ndim else float(out)


def _best_lambda(z):
    z = np.asarray(z, dtype=complex)
    a2 = np.abs(z) ** 2
    if z.real <= 0 or a2 == 0:
        return 0.0
    return float(min(1.0, z.real / a2))


def _x_indices(grid, stride):
    axes = [range(0, grid.Nx, stride)] * grid.d
    return list(itertools.product(*axes))


def check_condition(f: gr.Distribution, state, law, sampling: Optional[PenroseSampling] = None,
                    variant: str = "standard", c_required: float = 0.1,
                    band_tol: float = ENVELOPE_BAND) -> PenroseReport:
    """Sampled Penrose margin over ``x`` and the compactified frequency set.

    The standard variant minimizes ``|1 - lambda P_opt|`` over
    ``lambda in (0, 1]`` in closed form; the optimal variant uses
    ``|1 - P_opt|``. The ``(gamma, tau)`` component is floored at
    ``1e-6 |k|``. ``band_tol`` is the accepted velocity-spectrum level at
    the band edge relative to its peak; evolved data carry an
    interpolation noise floor and need a looser value.
    """
    sampling = sampling or PenroseSampling()
    _weight(1.0, variant)
    g = f.grid
    rho_f = gr.velocity_moment(f, 0)
    C = prefactor(rho_f, state.rho, law)
    xs = _x_indices(g, sampling.x_stride)
    rows = np.array([f.values[ix].ravel() for ix in xs])
    uniq, inv = np.unique(rows, axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    khats = sampling.khats(g.d)
    phis, betas = sampling.phis(), sampling.betas()
    cot = np.cos(betas) / np.sin(betas)
    Z = cot[:, None] * np.exp(1j * phis)[None, :]
    Z = np.maximum(Z.real, GAMMA_FLOOR) + 1j * Z.imag
    zf = Z.ravel()
    I = laplace_integrals(uniq, g, khats, zf, band_tol=band_tol)  # (Nz, nuniq, nkhat)
    best = (np.inf, None)
    for j, ix in enumerate(xs):
        vals = C[ix] * I[:, inv[j], :]
        m = min_over_lambda(vals) if variant == "standard" else np.abs(1.0 - vals)
        flat = int(np.argmin(m))
        if m.flat[flat] < best[0]:
            best = (float(m.flat[flat]), (j, flat, vals.flat[flat]))
    j, flat, pval = best[1]
    iz, ik = np.unravel_index(flat, (zf.size, len(khats)))
    ib, ip = np.unravel_index(iz, Z.shape)
    beta, phi = betas[ib], phis[ip]
    knorm = math.sin(beta)
    gamma = max(math.cos(beta) * math.cos(phi), GAMMA_FLOOR * knorm)
    argmin = {"x_index": [int(i) for i in xs[j]],
              "x": [float(g.x[i]) for i in xs[j]],
              "gamma": float(gamma), "tau": float(math.cos(beta) * math.sin(phi)),
              "k": [float(knorm * c) for c in khats[ik]],
              "lambda": _best_lambda(pval) if variant == "standard" else 1.0,
              "P_opt": [float(np.real(pval)), float(np.imag(pval))]}
    samples = {**sampling.to_dict(), "n_x": len(xs), "n_khat_used": len(khats),
               "n_z": int(zf.size)}
    return PenroseReport(best[0], argmin, samples, variant, c_required)


# ---------------------------------------------------------------------------
# sufficient conditions
# ---------------------------------------------------------------------------

def _one_bump(prof, tol):
    d = np.diff(prof)
    s = np.sign(np.where(np.abs(d) <= tol, 0.0, d))
    s = s[s != 0]
    changes = np.flatnonzero(s[1:] != s[:-1])
    return changes.size == 1 and s[changes[0]] > 0


def _radial_nonincreasing(prof, r, tol):
    key = np.round(r, 9)
    radii = np.unique(key)
    means = []
    for rad in radii:
        vals = prof[key == rad]
        if vals.max() - vals.min() > tol:
            return False
        means.append(vals.mean())
    return bool(np.all(np.diff(means) <= tol))


def classify_sufficient(f: gr.Distribution, prefactor_value=1.0) -> set:
    """Tags of the sufficient Penrose conditions met by ``f``.

    ``one-bump`` (d = 1): every nonzero profile increases then decreases.
    ``radial-nonincreasing``: every nonzero profile depends on ``|v|`` only
    and is nonincreasing in it. ``small-amplitude``: ``sup C int |ray| < 1/2``
    with ``C`` the given prefactor (scalar or field).
    """
    g = f.grid
    tags = set()
    vals = f.values.reshape((-1,) + g.velocity_shape)
    nz = [p for p in vals if p.max() > 0]
    if g.d == 1 and nz and all(_one_bump(p, 1e-10 * p.max()) for p in nz):
        tags.add("one-bump")
    r = np.sqrt((g.vmesh() ** 2).sum(axis=0)).ravel()
    if nz and all(_radial_nonincreasing(p.ravel(), r, 1e-8 * p.max()) for p in nz):
        tags.add("radial-nonincreasing")
    Cf = np.broadcast_to(np.asarray(prefactor_value, dtype=float), g.spatial_shape).ravel()
    rows = vals.reshape(vals.shape[0], -1)
    uniq, inv = np.unique(rows, axis=0, return_inverse=True)
    khats = PenroseSampling(n_khat=16).khats(g.d)
    I = laplace_integrals(uniq, g, khats, np.array([0.0]), tol=1e-6, absolute=True)[0].real
    sup = float(np.max(Cf * I[np.asarray(inv).ravel()].max(axis=1)))
    if sup < 0.5:
        tags.add("small-amplitude")
    return tags or {"none"}
