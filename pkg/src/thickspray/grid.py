"""Phase-space grids, Fourier multipliers, velocity quadrature and norms.

Fields on the torus are plain numpy arrays. A scalar field has shape
``(Nx,) * d`` and a vector field has shape ``(d,) + (Nx,) * d``. A
distribution ``f(x, v)`` has shape ``(Nx,) * d + (Nv,) * d``.

The torus carries the normalized measure, so the mean of a field equals its
zero Fourier coefficient. Transforms use ``e^{-ik.x}`` forward, unnormalized,
with the ``1/Nx^d`` factor on the inverse.
"""
from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.fft as sfft
from scipy import ndimage

from .errors import ConfigError, NumericInputError, ResolutionError, TailError

TAIL_FRACTION = 0.9
DEFAULT_TAIL_TOL = 1e-10
NEG_TOL = -1e-12
SPLINE_PAD = 16


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseGrid:
    """Uniform grid on ``T^d x [-Vmax, Vmax]^d``.

    Positions are ``x_i = i dx``. Velocities are cell centred,
    ``v_j = -Vmax + (j + 1/2) dv``, so each node carries weight ``dv^d``.

    Parameters
    ----------
    d : int
        Spatial dimension, 1 or 2.
    Nx : int
        Points per torus direction (power of two, at least 8).
    Nv : int
        Points per velocity direction (even, at least 8).
    Vmax : float
        Velocity half-width.
    """

    d: int
    Nx: int
    Nv: int
    Vmax: float

    def __post_init__(self):
        errs = []
        if self.d not in (1, 2):
            errs.append(f"d must be 1 or 2, got {self.d}")
        if not (isinstance(self.Nx, (int, np.integer)) and self.Nx >= 8
                and self.Nx & (self.Nx - 1) == 0):
            errs.append(f"Nx must be a power of two >= 8, got {self.Nx}")
        if not (isinstance(self.Nv, (int, np.integer)) and self.Nv >= 8
                and self.Nv % 2 == 0):
            errs.append(f"Nv must be even and >= 8, got {self.Nv}")
        if not (np.isfinite(self.Vmax) and self.Vmax > 0):
            errs.append(f"Vmax must be positive, got {self.Vmax}")
        if errs:
            raise ConfigError(errs)

    @property
    def dx(self) -> float:
        return 2 * np.pi / self.Nx

    @property
    def dv(self) -> float:
        return 2 * self.Vmax / self.Nv

    @property
    def x(self) -> np.ndarray:
        return np.arange(self.Nx) * self.dx

    @property
    def v(self) -> np.ndarray:
        return -self.Vmax + (np.arange(self.Nv) + 0.5) * self.dv

    @property
    def k(self) -> np.ndarray:
        """Integer wavenumbers in FFT order, ``-Nx/2 .. Nx/2-1``."""
        return wavenumbers(self.Nx)

    @property
    def spatial_shape(self) -> tuple:
        return (self.Nx,) * self.d

    @property
    def velocity_shape(self) -> tuple:
        return (self.Nv,) * self.d

    @property
    def phase_shape(self) -> tuple:
        return self.spatial_shape + self.velocity_shape

    @property
    def vweight(self) -> float:
        return self.dv ** self.d

    def xmesh(self) -> np.ndarray:
        """Positions as an array of shape ``(d,) + spatial_shape``."""
        return np.array(np.meshgrid(*([self.x] * self.d), indexing="ij"))

    def vmesh(self) -> np.ndarray:
        """Velocities as an array of shape ``(d,) + velocity_shape``."""
        return np.array(np.meshgrid(*([self.v] * self.d), indexing="ij"))

    def phase_mesh(self):
        """Broadcastable position and velocity arrays over the phase grid.

        Returns
        -------
        X, V : list of ndarray
            ``d`` arrays each, broadcasting to ``phase_shape``.
        """
        d = self.d
        X = [self.x.reshape([-1 if a == i else 1 for a in range(2 * d)])
             for i in range(d)]
        V = [self.v.reshape([-1 if a == d + i else 1 for a in range(2 * d)])
             for i in range(d)]
        return X, V

    def to_dict(self) -> dict:
        return {"d": int(self.d), "Nx": int(self.Nx), "Nv": int(self.Nv),
                "Vmax": float(self.Vmax)}


def wavenumbers(n: int) -> np.ndarray:
    return np.fft.fftfreq(n, 1.0 / n)


def _kvecs(shape, odd=False):
    """Broadcastable wavenumber arrays for a spatial shape."""
    d = len(shape)
    out = []
    for i, n in enumerate(shape):
        k = wavenumbers(n)
        if odd and n % 2 == 0:
            k = k.copy()
            k[n // 2] = 0.0
        out.append(k.reshape([-1 if a == i else 1 for a in range(d)]))
    return out


def _check_finite(a):
    if not np.all(np.isfinite(a)):
        raise NumericInputError("non-finite values in input field")


def fft(a, d):
    """Forward transform over the last ``d`` axes."""
    return sfft.fftn(a, axes=tuple(range(-d, 0)))


def ifft(a, d):
    """Inverse transform over the last ``d`` axes, real part."""
    return sfft.ifftn(a, axes=tuple(range(-d, 0))).real


def fourier_coefficients(field: np.ndarray) -> np.ndarray:
    """Coefficients of a scalar field w.r.t. the normalized torus measure."""
    return fft(field, field.ndim) / field.size


# ---------------------------------------------------------------------------
# multipliers
# ---------------------------------------------------------------------------

def spectral_derivative(field: np.ndarray, axis: int, order: int = 1) -> np.ndarray:
    """Derivative of the trigonometric interpolant along one axis.

    The Nyquist mode is dropped for odd orders so the result stays real.
    """
    field = np.asarray(field, dtype=float)
    _check_finite(field)
    d = field.ndim
    if not 0 <= axis < d:
        raise ValueError(f"axis {axis} out of range for a {d}-d field")
    k = _kvecs(field.shape, odd=(order % 2 == 1))[axis]
    return ifft(fft(field, d) * (1j * k) ** order, d)


def gradient(field: np.ndarray) -> np.ndarray:
    field = np.asarray(field, dtype=float)
    _check_finite(field)
    d = field.ndim
    fh = fft(field, d)
    return np.array([ifft(fh * 1j * k, d) for k in _kvecs(field.shape, odd=True)])


def divergence(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    _check_finite(u)
    d = u.shape[0]
    ks = _kvecs(u.shape[1:], odd=True)
    acc = sum(fft(u[i], d) * 1j * ks[i] for i in range(d))
    return ifft(acc, d)


def apply_j_epsilon(field: np.ndarray, eps: float) -> np.ndarray:
    """Apply ``J_eps = (I - eps^2 Laplacian)^{-1}``."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    field = np.asarray(field, dtype=float)
    _check_finite(field)
    if eps == 0:
        return field.copy()
    d = field.ndim
    k2 = sum(k ** 2 for k in _kvecs(field.shape))
    return ifft(fft(field, d) / (1.0 + eps ** 2 * k2), d)


def _lame_symbol(shape):
    """``|k|^2 I + k (x) k`` per mode, shape ``shape + (d, d)``.

    Off-diagonal products are built from first-derivative symbols, so the
    Nyquist row/column is dropped there.
    """
    d = len(shape)
    kf = _kvecs(shape)
    ko = _kvecs(shape, odd=True)
    k2 = sum(k ** 2 for k in kf)
    M = np.zeros(tuple(shape) + (d, d))
    for i in range(d):
        for j in range(d):
            kk = kf[i] ** 2 if i == j else ko[i] * ko[j]
            M[..., i, j] = np.broadcast_to(kk + (k2 if i == j else 0.0), shape)
    return M


def apply_lame(u: np.ndarray) -> np.ndarray:
    """Return ``(Laplacian + grad div) u`` for a vector field."""
    u = np.asarray(u, dtype=float)
    _check_finite(u)
    d = u.shape[0]
    if u.ndim != d + 1:
        raise ValueError("vector field must have shape (d,) + (Nx,)*d")
    uh = np.moveaxis(fft(u, d), 0, -1)
    M = _lame_symbol(u.shape[1:])
    wh = -np.einsum("...ij,...j->...i", M, uh)
    return ifft(np.moveaxis(wh, -1, 0), d)


def solve_lame_implicit(u: np.ndarray, a: float) -> np.ndarray:
    """Solve ``(I - a (Laplacian + grad div)) w = u`` mode by mode."""
    if not a > 0:
        raise ValueError(f"a must be positive, got {a}")
    u = np.asarray(u, dtype=float)
    _check_finite(u)
    d = u.shape[0]
    if u.ndim != d + 1:
        raise ValueError("vector field must have shape (d,) + (Nx,)*d")
    uh = np.moveaxis(fft(u, d), 0, -1)
    A = np.eye(d) + a * _lame_symbol(u.shape[1:])
    wh = np.linalg.solve(A, uh[..., None])[..., 0]
    return ifft(np.moveaxis(wh, -1, 0), d)


def dealias(field: np.ndarray, d: int) -> np.ndarray:
    """Zero all modes with some ``|k_i| > N/3`` (2/3 rule) on the last d axes."""
    shape = field.shape[-d:]
    mask = np.ones(shape, dtype=bool)
    for k, n in zip(_kvecs(shape), shape):
        mask = mask & (np.abs(k) <= n // 3)
    return ifft(fft(field, d) * mask, d)


def trig_interpolate(field: np.ndarray, points: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Evaluate the trigonometric interpolant of a scalar field at points.

    Uses Horner's rule in ``e^{ix}`` over the modes ``-N/2 .. N/2-1``.

    Parameters
    ----------
    field : ndarray, shape ``(Nx,)*d``
    points : ndarray, shape ``(d, npts)``
    """
    d = field.ndim
    points = np.asarray(points, dtype=float).reshape(d, -1)
    coef = np.fft.fftshift(fourier_coefficients(np.asarray(field, dtype=float)))
    out = np.empty(points.shape[1])
    for lo in range(0, points.shape[1], chunk):
        p = points[:, lo:lo + chunk]
        z = np.exp(1j * p)
        if d == 1:
            acc = _horner(coef, z[0])
        else:
            # inner sum over the last axis for every first-axis mode
            inner = np.broadcast_to(coef[:, -1:], (coef.shape[0], p.shape[1])).astype(complex)
            for j in range(coef.shape[1] - 2, -1, -1):
                inner = inner * z[1] + coef[:, j:j + 1]
            inner = inner * np.exp(-1j * (coef.shape[1] // 2) * p[1])
            acc = _horner(inner, z[0])
        out[lo:lo + chunk] = (acc * np.exp(-1j * (coef.shape[0] // 2) * p[0])).real
    return out


def _horner(c, z):
    """``sum_j c[j] z^j`` with ``c`` indexed along axis 0."""
    acc = np.zeros(np.broadcast(c[0], z).shape, dtype=complex) + c[-1]
    for j in range(c.shape[0] - 2, -1, -1):
        acc = acc * z + c[j]
    return acc


def shifted_samples(field: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Values of the trigonometric interpolant at ``x_i + a`` for many shifts.

    Parameters
    ----------
    field : ndarray, shape ``(..., Nx, ..., Nx)`` with ``d`` spatial axes last
    shifts : ndarray, shape ``(d,) + S``

    Returns
    -------
    ndarray, shape ``field.shape + S``
    """
    shifts = np.asarray(shifts, dtype=float)
    d = shifts.shape[0]
    S = shifts.shape[1:]
    sp_shape = field.shape[field.ndim - d:]
    fh = fft(field, d)
    ks = _kvecs(sp_shape)
    phase = 0.0
    for i in range(d):
        ki = ks[i].reshape(ks[i].shape + (1,) * len(S))
        phase = phase + ki * shifts[i]
    fh = fh.reshape(fh.shape + (1,) * len(S)) * np.exp(1j * phase)
    axes = tuple(range(field.ndim - d, field.ndim))
    return sfft.ifftn(fh, axes=axes).real


def spline_interpolate(values: np.ndarray, grid: "PhaseGrid", X: np.ndarray,
                       V: np.ndarray, order: int = 3) -> np.ndarray:
    """B-spline interpolation of phase-space data at arbitrary points.

    Periodic in x; in v the data are extended by zero outside the box.

    Parameters
    ----------
    values : ndarray, shape ``grid.phase_shape``
    X, V : ndarray, shape ``(d,) + S``
    order : int
        Spline order, 3 (cubic, default) or 5.
    """
    if order not in (3, 5):
        raise ValueError(f"spline order must be 3 or 5, got {order}")
    d = grid.d
    P = SPLINE_PAD
    pad = [(0, 0)] * d + [(P, P)] * d
    c = np.pad(values, pad)
    for ax in range(d):
        c = ndimage.spline_filter1d(c, order, axis=ax, mode="grid-wrap")
    for ax in range(d, 2 * d):
        c = ndimage.spline_filter1d(c, order, axis=ax, mode="mirror")
    X = np.asarray(X, dtype=float)
    V = np.asarray(V, dtype=float)
    S = X.shape[1:]
    coords = [np.mod(X[i], 2 * np.pi).ravel() / grid.dx for i in range(d)]
    coords += [(V[i].ravel() + grid.Vmax) / grid.dv - 0.5 + P for i in range(d)]
    out = ndimage.map_coordinates(c, coords, order=order, prefilter=False, mode="grid-wrap")
    inside = np.all(np.abs(V.reshape(d, -1)) <= grid.Vmax, axis=0)
    out[~inside] = 0.0
    return out.reshape(S)


# ---------------------------------------------------------------------------
# distributions and moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Distribution:
    """Nonnegative particle density sampled on a phase grid."""

    grid: PhaseGrid
    values: np.ndarray = dc_field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.phase_shape:
            raise ValueError(f"values shape {vals.shape} != {self.grid.phase_shape}")
        _check_finite(vals)
        if vals.size and vals.min() < NEG_TOL:
            raise NumericInputError(f"distribution has negative values (min {vals.min():.3e})")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_function(cls, grid: PhaseGrid, fn) -> "Distribution":
        """Sample ``fn(X, V)`` where X, V are lists of broadcastable arrays."""
        X, V = grid.phase_mesh()
        vals = np.broadcast_to(fn(X, V), grid.phase_shape).astype(float)
        return cls(grid, np.array(vals))

    @classmethod
    def zeros(cls, grid: PhaseGrid) -> "Distribution":
        return cls(grid, np.zeros(grid.phase_shape))

    def total_mass(self) -> float:
        """``int int f dx dv`` with the normalized torus measure."""
        return float(self.values.sum() * self.grid.vweight / self.grid.Nx ** self.grid.d)

    def tail_mass(self) -> float:
        g = self.grid
        vm = g.vmesh()
        outer = np.max(np.abs(vm), axis=0) > TAIL_FRACTION * g.Vmax
        spatial_axes = tuple(range(g.d))
        vel = self.values.sum(axis=spatial_axes) / g.Nx ** g.d
        return float(np.abs(vel[outer]).sum() * g.vweight)

    def tail_ratio(self) -> float:
        tot = self.total_mass()
        return 0.0 if tot == 0 else self.tail_mass() / tot

    def check_tail(self, tol: float = DEFAULT_TAIL_TOL) -> None:
        r = self.tail_ratio()
        if r >= tol:
            raise TailError(f"tail mass ratio {r:.3e} exceeds tolerance {tol:.1e}")


def velocity_moment(f: Distribution, order: int) -> np.ndarray:
    """Velocity moment of order 0 (density), 1 (flux) or 2 (energy)."""
    g = f.grid
    vaxes = tuple(range(g.d, 2 * g.d))
    w = g.vweight
    if order == 0:
        return f.values.sum(axis=vaxes) * w
    _, V = g.phase_mesh()
    if order == 1:
        return np.array([(f.values * V[i]).sum(axis=vaxes) * w for i in range(g.d)])
    if order == 2:
        v2 = sum(Vi ** 2 for Vi in V)
        return (f.values * v2).sum(axis=vaxes) * w
    raise ValueError(f"order must be 0, 1 or 2, got {order}")


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def l2_norm(field: np.ndarray, d: int | None = None) -> float:
    """L^2 norm w.r.t. the normalized measure (summing leading components)."""
    field = np.asarray(field, dtype=float)
    d = field.ndim if d is None else d
    n = np.prod(field.shape[-d:])
    return float(np.sqrt(np.sum(field ** 2) / n))


def sobolev_norm(field: np.ndarray, k: int, d: int | None = None) -> float:
    """``H^k`` norm ``(sum (1+|l|^2)^k |g_l|^2)^{1/2}``.

    Parameters
    ----------
    field : ndarray
        Scalar field, or a stack of fields whose last ``d`` axes are spatial.
    k : int
        Sobolev index, at most ``Nx/4``.
    d : int, optional
        Number of spatial axes; defaults to ``field.ndim``.
    """
    field = np.asarray(field, dtype=float)
    _check_finite(field)
    d = field.ndim if d is None else d
    shape = field.shape[-d:]
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k > min(shape) // 4:
        raise ResolutionError(f"Sobolev index {k} exceeds Nx/4 = {min(shape) // 4}")
    coef = fft(field, d) / np.prod(shape)
    w = (1.0 + sum(kk ** 2 for kk in _kvecs(shape))) ** k
    return float(np.sqrt(np.sum(w * np.abs(coef) ** 2)))


def weighted_phase_norm(f: Distribution, m: int, r: float) -> float:
    """Weighted phase-space Sobolev norm ``H^m_r``.

    Sums ``int int <v>^{2r} |d_x^a d_v^b f|^2`` over ``|a| + |b| <= m``;
    x-derivatives are spectral, v-derivatives second-order differences.
    """
    g = f.grid
    d = g.d
    _, V = g.phase_mesh()
    weight = (1.0 + sum(Vi ** 2 for Vi in V)) ** r
    total = np.sum(weight * f.values ** 2)
    prev = {(0,) * (2 * d): f.values}
    for order in range(1, m + 1):
        cur = {}
        for idx in itertools.product(range(order + 1), repeat=2 * d):
            if sum(idx) != order:
                continue
            # build from the first nonzero axis of the multi-index
            ax = next(a for a in range(2 * d) if idx[a] > 0)
            lower = list(idx)
            lower[ax] -= 1
            base = prev[tuple(lower)]
            if ax < d:
                k = _kvecs(g.spatial_shape, odd=True)[ax]
                k = k.reshape(k.shape + (1,) * d)
                der = sfft.ifftn(sfft.fftn(base, axes=tuple(range(d))) * 1j * k,
                                 axes=tuple(range(d))).real
            else:
                der = np.gradient(base, g.dv, axis=ax, edge_order=2)
            cur[idx] = der
            total += np.sum(weight * der ** 2)
        prev = cur
    return float(np.sqrt(total * g.vweight / g.Nx ** d))


# ---------------------------------------------------------------------------
# field dumps
# ---------------------------------------------------------------------------

def write_field(directory, name: str, array: np.ndarray, grid: PhaseGrid,
                time: float) -> tuple:
    """Write ``array`` as raw little-endian float64 plus a JSON sidecar.

    Returns
    -------
    (str, str)
        Paths of the binary file and the sidecar.
    """
    os.makedirs(directory, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype="<f8")
    bin_path = os.path.join(directory, name + ".bin")
    meta_path = os.path.join(directory, name + ".json")
    arr.tofile(bin_path)
    meta = {"shape": list(arr.shape), **grid.to_dict(), "time": float(time),
            "field_name": name, "endianness": "little", "dtype": "float64"}
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return bin_path, meta_path


def read_field(bin_path):
    """Read a field dump; returns ``(array, metadata)``."""
    stem, _ = os.path.splitext(bin_path)
    with open(stem + ".json") as fh:
        meta = json.load(fh)
    arr = np.fromfile(bin_path, dtype="<f8").reshape(meta["shape"])
    return arr, meta
