"""Kernel averaging operators along free and frictional characteristics.

For a kernel ``G(t, s, x, v)`` and a space-time field ``H(s, x)``,

    K_free H(t, x) = int_0^t int grad H(s, x - (t - s) v) . G(t, s, x, v) dv ds,
    K_fric H(t, x) = int_0^t int grad H(s, x + (1 - e^{t-s}) v) . G dv ds.

In Fourier series in ``x`` the output coefficient at ``l`` is

    sum_k int_0^t H_k(s) (ik) . (F_{x,v} G)(t, s, l - k, k phi(t, s)) ds,

with ``phi = t - s`` (free) or ``e^{t-s} - 1`` (friction). The ``s``
integral uses the trapezoid rule on the stored time grid, which makes each
operator a lower-triangular matrix per mode for x-independent kernels.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from . import grid as gr
from .errors import ConfigError, ConvergenceWarning

PHASES = {
    "free": lambda t, s: t - s,
    "fric": lambda t, s: np.expm1(t - s),
}


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpaceTimeField:
    """``H(t, x)`` on a time grid starting at 0; values ``(Nt,) + (Nx,)*d``."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values)
        if v.shape[0] != t.size:
            raise ConfigError("time grid and values disagree in length")
        if not np.all(np.isfinite(v)):
            raise ConfigError("space-time field has non-finite values")
        if t[0] != 0 or np.any(np.diff(t) <= 0):
            raise ConfigError("time grid must start at 0 and increase")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.ndim - 1

    def coefficients(self) -> np.ndarray:
        d = self.d
        return gr.fft(self.values, d) / np.prod(self.values.shape[1:])

    @classmethod
    def from_coefficients(cls, times, coef) -> "SpaceTimeField":
        d = coef.ndim - 1
        n = np.prod(coef.shape[1:])
        vals = gr.sfft.ifftn(coef * n, axes=tuple(range(1, d + 1)))
        if np.abs(vals.imag).max() <= 1e-12 * max(1.0, np.abs(vals.real).max()):
            vals = vals.real
        return cls(times, vals)


class Kernel:
    """Base class for kernels ``G(t, s, x, v)`` with ``d`` components."""

    d: int = 1
    diagonal_vanishing: bool = False
    x_independent: bool = True

    def fv(self, t, s, xi):
        """``F_v G(t, s, xi)`` for x-independent kernels, shape ``(d,) + B``."""
        raise NotImplementedError


class GaussianKernel(Kernel):
    """``a (t - s)^p grad_v exp(-|v|^2 / w^2)``.

    ``F_v G(xi) = a (t - s)^p i xi (sqrt(pi) w)^d exp(-w^2 |xi|^2 / 4)``.
    ``p > 0`` gives a kernel vanishing on the diagonal ``s = t``.
    """

    def __init__(self, d: int = 1, width: float = 1.0, amplitude: float = 1.0,
                 time_power: int = 0):
        self.d = d
        self.width = width
        self.amplitude = amplitude
        self.time_power = time_power
        self.diagonal_vanishing = time_power > 0

    def fv(self, t, s, xi):
        xi = np.asarray(xi, dtype=float)
        w = self.width
        tf = self.amplitude * (np.asarray(t - s, dtype=float) ** self.time_power)
        g = (math.sqrt(math.pi) * w) ** self.d * np.exp(-0.25 * w ** 2 * (xi ** 2).sum(axis=0))
        return 1j * xi * (tf * g)

    def diagonal_multiplied(self) -> "GaussianKernel":
        """The same kernel times ``(t - s)``."""
        return GaussianKernel(self.d, self.width, self.amplitude, self.time_power + 1)


class GriddedKernel(Kernel):
    """Kernel sampled on ``times x times x T^d x [-Vmax, Vmax]^d``.

    ``values`` has shape ``(Nt, Nt, d) + phase_shape``. Modes are coupled
    up to ``|l - k| <= coupling_band`` per axis.
    """

    x_independent = False

    def __init__(self, grid: gr.PhaseGrid, times, values, diagonal_vanishing: bool = False,
                 coupling_band: int = 16):
        self.grid = grid
        self.d = grid.d
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        nt = self.times.size
        if self.values.shape != (nt, nt, grid.d) + grid.phase_shape:
            raise ConfigError("gridded kernel shape does not match its grids")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("gridded kernel has non-finite values")
        self.diagonal_vanishing = diagonal_vanishing
        if diagonal_vanishing:
            diag = self.values[np.arange(nt), np.arange(nt)]
            if np.abs(diag).max() >= 1e-12:
                raise ConfigError("kernel flagged diagonal-vanishing but G(t,t) != 0")
        self.coupling_band = coupling_band
        d = grid.d
        # x-Fourier coefficients, normalized measure
        axes = tuple(range(3, 3 + d))
        self.coef = gr.sfft.fftn(self.values, axes=axes) / grid.Nx ** d

    def fxv(self, i, j, m, xi):
        """``(F_{x,v} G)(t_i, s_j, m, xi)`` for mode ``m``; shape ``(d, npts)``."""
        g = self.grid
        idx = tuple(int(c) % g.Nx for c in np.atleast_1d(m))
        prof = self.coef[(i, j, slice(None)) + idx].reshape(self.d, -1)
        vn = g.vmesh().reshape(g.d, -1)
        xi = np.asarray(xi, dtype=float).reshape(g.d, -1)
        E = np.exp(-1j * (xi.T @ vn))
        return (E @ prof.T).T * g.vweight


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def _trapezoid_weights(times):
    """``W[i, j]``: weight of ``s_j`` in ``int_0^{t_i}``."""
    nt = times.size
    W = np.zeros((nt, nt))
    dt = np.diff(times)
    for i in range(1, nt):
        W[i, :i] += 0.5 * dt[:i]
        W[i, 1:i + 1] += 0.5 * dt[:i]
    return W


def _mode_list(shape):
    return [np.array(m) for m in itertools.product(*[gr.wavenumbers(n) for n in shape])]


def _grad_symbol(l, shape):
    """``i l`` with the Nyquist component dropped."""
    l = np.asarray(l, dtype=float).copy()
    for a, n in enumerate(shape):
        if n % 2 == 0 and l[a] == -n // 2:
            l[a] = 0.0
    return 1j * l


def mode_matrix(G: Kernel, times, l, kind: str, shape=None) -> np.ndarray:
    """Lower-triangular ``Nt x Nt`` matrix of the operator on mode ``l``.

    Only for x-independent kernels.
    """
    if not G.x_independent:
        raise ConfigError("mode_matrix needs an x-independent kernel")
    times = np.asarray(times, dtype=float)
    l = np.atleast_1d(np.asarray(l, dtype=float))
    shape = shape or (10 ** 9,) * l.size
    T, S = np.meshgrid(times, times, indexing="ij")
    phi = PHASES[kind](T, S)
    xi = l.reshape((-1, 1, 1)) * phi[None]
    sym = _grad_symbol(l, shape).reshape((-1, 1, 1))
    vals = (sym * G.fv(T, S, xi)).sum(axis=0)
    return _trapezoid_weights(times) * vals


def _apply(G: Kernel, H: SpaceTimeField, kind: str) -> SpaceTimeField:
    if G.d != H.d:
        raise ConfigError(f"kernel dimension {G.d} != field dimension {H.d}")
    times = H.times
    coef = H.coefficients()
    shape = coef.shape[1:]
    out = np.zeros_like(coef, dtype=complex)
    if G.x_independent:
        for l in _mode_list(shape):
            idx = (slice(None),) + tuple(int(c) % n for c, n in zip(l, shape))
            if not np.any(coef[idx]):
                continue
            out[idx] = mode_matrix(G, times, l, kind, shape) @ coef[idx]
        return SpaceTimeField.from_coefficients(times, out)
    if G.times.shape != times.shape or np.any(G.times != times):
        raise ConfigError("kernel and field time grids do not match")
    if tuple(shape) != G.grid.spatial_shape:
        raise ConfigError("kernel and field spatial grids do not match")
    W = _trapezoid_weights(times)
    phi = PHASES[kind](times[:, None], times[None, :])
    band = G.coupling_band
    modes = _mode_list(shape)
    nt = times.size
    for k in modes:
        kidx = tuple(int(c) % n for c, n in zip(k, shape))
        hk = coef[(slice(None),) + kidx]
        if not np.any(hk):
            continue
        sym = _grad_symbol(k, shape)
        for l in modes:
            m = l - k
            if np.any(np.abs(m) > band):
                continue
            lidx = tuple(int(c) % n for c, n in zip(l, shape))
            acc = np.zeros(nt, dtype=complex)
            for i in range(1, nt):
                xi = k[:, None] * phi[i, :i + 1][None, :]
                vals = np.stack([G.fxv(i, j, m, xi[:, j:j + 1])[:, 0] for j in range(i + 1)], axis=1)
                acc[i] = np.sum(W[i, :i + 1] * (sym[:, None] * vals).sum(axis=0) * hk[:i + 1])
            out[(slice(None),) + lidx] += acc
    return SpaceTimeField.from_coefficients(times, out)


def k_free(G: Kernel, H: SpaceTimeField) -> SpaceTimeField:
    """Averaging along free characteristics ``x - (t - s) v``."""
    return _apply(G, H, "free")


def k_fric(G: Kernel, H: SpaceTimeField) -> SpaceTimeField:
    """Averaging along friction characteristics ``x + (1 - e^{t-s}) v``."""
    return _apply(G, H, "fric")


# ---------------------------------------------------------------------------
# operator norms
# ---------------------------------------------------------------------------

def _time_weights(times):
    w = np.zeros_like(times)
    dt = np.diff(times)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def weighted_mode_matrix(G, times, l, kind, out_space="L2", shape=None):
    """Mode matrix in the orthonormal bases of ``L^2_T`` (input) and output."""
    M = mode_matrix(G, times, l, kind, shape)
    sw = np.sqrt(_time_weights(np.asarray(times, dtype=float)))
    with np.errstate(divide="ignore"):
        inv = np.where(sw > 0, 1.0 / sw, 0.0)
    g = 1.0 if out_space == "L2" else math.sqrt(1.0 + float(np.sum(np.square(l))))
    return g * sw[:, None] * M * inv[None, :]


def averaging_operator(G: Kernel, times, shape, kind: str, out_space: str = "L2",
                       subtract: Optional[str] = None) -> LinearOperator:
    """Weighted coefficient-space operator for an x-independent kernel.

    Acts on complex vectors of length ``Nt * prod(shape)``. With
    ``subtract`` set to another kind the difference of the two operators is
    returned. Modes ``-l`` reuse the conjugate of the ``l`` block.
    """
    if out_space not in ("L2", "H1"):
        raise ConfigError(f"unknown output space {out_space!r}")
    times = np.asarray(times, dtype=float)
    nt = times.size
    modes = _mode_list(shape)
    keys = [tuple(int(c) for c in l) for l in modes]
    slot = {}
    blocks = []
    own, mirror = [], []  # (mode index, block index)
    for i, (l, key) in enumerate(zip(modes, keys)):
        neg = tuple(-c for c in key)
        if neg in slot:
            mirror.append((i, slot[neg]))
            continue
        B = weighted_mode_matrix(G, times, l, kind, out_space, shape)
        if subtract:
            B = B - weighted_mode_matrix(G, times, l, subtract, out_space, shape)
        slot[key] = len(blocks)
        own.append((i, len(blocks)))
        blocks.append(B)
    blocks = np.array(blocks)
    own_i = np.array([i for i, _ in own])
    own_b = np.array([b for _, b in own])
    mir_i = np.array([i for i, _ in mirror], dtype=int)
    mir_b = np.array([b for _, b in mirror], dtype=int)
    n = nt * len(modes)
    nb = blocks.shape[0]

    def _apply_blocks(x, mats):
        x = np.asarray(x).reshape(len(modes), nt, -1)
        y = np.empty(x.shape, dtype=complex)
        xo = np.zeros((nb,) + x.shape[1:], dtype=complex)
        xo[own_b] = x[own_i]
        y[own_i] = (mats @ xo)[own_b]
        if mir_i.size:
            xm = np.zeros_like(xo)
            xm[mir_b] = x[mir_i].conj()
            y[mir_i] = (mats @ xm)[mir_b].conj()
        return y

    bh = blocks.conj().transpose(0, 2, 1)

    def matvec(x):
        return _apply_blocks(x, blocks).ravel()

    def rmatvec(x):
        return _apply_blocks(x, bh).ravel()

    def matmat(X):
        return _apply_blocks(X, blocks).reshape(n, -1)

    def rmatmat(X):
        return _apply_blocks(X, bh).reshape(n, -1)

    op = LinearOperator((n, n), matvec=matvec, rmatvec=rmatvec, matmat=matmat,
                        rmatmat=rmatmat, dtype=complex)
    op.blocks = blocks
    return op


def operator_norm_estimate(op, probes: int = 8, seed: int = 0, maxiter: int = 200,
                           tol: float = 1e-10) -> float:
    """Largest singular value by block power iteration on ``op^H op``.

    The block of ``probes`` random vectors is accelerated by a Rayleigh-Ritz
    step over the block, its residual and the previous search direction.
    Deterministic for a fixed seed. Warns with :class:`ConvergenceWarning`
    and returns the last estimate if ``maxiter`` is reached.
    """
    if probes < 8:
        raise ConfigError("probes must be at least 8")
    A = aslinearoperator(op)
    n = A.shape[1]

    def M(V):
        return A.rmatmat(A.matmat(V))

    rng = np.random.default_rng(seed)
    p = min(probes, n)
    X, _ = np.linalg.qr(rng.standard_normal((n, p)) + 1j * rng.standard_normal((n, p)))
    AX = M(X)
    P = AP = None
    lam_prev = None
    lam = 0.0
    for _ in range(maxiter):
        H = X.conj().T @ AX
        R = AX - X @ H
        if not np.any(AX) or np.linalg.norm(R) <= 1e-14 * max(np.linalg.norm(AX), 1e-300):
            lam = float(np.linalg.eigvalsh(0.5 * (H + H.conj().T)).max())
            return math.sqrt(max(lam, 0.0))
        AR = M(R)
        S = np.hstack([X, R] + ([P] if P is not None else []))
        AS = np.hstack([AX, AR] + ([AP] if AP is not None else []))
        scale = np.linalg.norm(S, axis=0)
        scale[scale == 0] = 1.0
        S, AS = S / scale, AS / scale
        gram = S.conj().T @ S
        g, W = np.linalg.eigh(0.5 * (gram + gram.conj().T))
        keep = g > 1e-10 * g[-1]
        C = W[:, keep] / np.sqrt(g[keep])
        T = C.conj().T @ (S.conj().T @ AS) @ C
        w, Y = np.linalg.eigh(0.5 * (T + T.conj().T))
        Y = C @ Y[:, -p:]
        Xn, AXn = S @ Y, AS @ Y
        G = X.conj().T @ Xn
        P, AP = Xn - X @ G, AXn - AX @ G
        X, AX = Xn, AXn
        lam = float(w[-1])
        if lam <= 0:
            return 0.0
        if lam_prev is not None and abs(lam - lam_prev) <= tol * lam:
            return math.sqrt(lam)
        lam_prev = lam
    warnings.warn(f"power iteration stopped after {maxiter} iterations", ConvergenceWarning)
    return math.sqrt(max(lam, 0.0))


def exact_norm(op) -> float:
    """Largest singular value from the stored per-mode blocks (SVD)."""
    return max(np.linalg.norm(B, 2) for B in op.blocks)


# ---------------------------------------------------------------------------
# smoothing suite
# ---------------------------------------------------------------------------

@dataclass
class SuiteRow:
    test: str
    Nx: int
    k: str
    value: float
    verdict: str

    def as_tuple(self):
        return (self.test, self.Nx, self.k, self.value, self.verdict)


def _ladder_verdict(values, ratio=1.25):
    v = np.asarray(values, dtype=float)
    ok = v.min() > 0 and v.max() / v.min() < ratio
    return "pass" if ok else "fail"


def smoothing_suite(kernel: Kernel, ladder=(32, 64, 128), T: float = 1.0,
                    time_factor: int = 1, probes: int = 16, seed: int = 0,
                    ratio: float = 1.25, tol: float = 1e-8) -> list:
    """Empirical boundedness tests across a resolution ladder.

    ``a_free``/``a_fric``: L2 -> L2 norms. ``b_free``/``b_fric``: L2 -> H1
    graded norms for ``(t - s) G``. ``c_diff``: ``|k|`` times the per-mode
    norm of ``K_free - K_fric`` for ``k = 1..Nx/4`` (summary row uses the
    maximum). ``c_diff_tail``: ratio of the maximum over ``Nx/8 < k <= Nx/4``
    to the maximum over ``k <= Nx/8``, a saturation check in ``k``.
    The time grid has ``time_factor * Nx + 1`` points on ``[0, T]``.
    """
    if not kernel.x_independent or kernel.d != 1:
        raise ConfigError("smoothing_suite needs a 1-d x-independent kernel")
    if kernel.diagonal_vanishing:
        raise ConfigError("base kernel must not vanish on the diagonal")
    diag = kernel.diagonal_multiplied()
    if not diag.diagonal_vanishing:
        raise ConfigError("diagonal-vanishing family has the wrong flag")
    rows = []
    series = {"a_free": [], "a_fric": [], "b_free": [], "b_fric": [], "c_diff": []}
    per_k = {}
    for Nx in ladder:
        times = np.linspace(0.0, T, time_factor * Nx + 1)
        shape = (Nx,)
        for kind in ("free", "fric"):
            op = averaging_operator(kernel, times, shape, kind)
            series["a_" + kind].append(operator_norm_estimate(op, probes, seed, tol=tol))
            op = averaging_operator(diag, times, shape, kind, out_space="H1")
            series["b_" + kind].append(operator_norm_estimate(op, probes, seed, tol=tol))
        vals = []
        for k in range(1, Nx // 4 + 1):
            B = (weighted_mode_matrix(kernel, times, [k], "free", shape=shape)
                 - weighted_mode_matrix(kernel, times, [k], "fric", shape=shape))
            vals.append(k * np.linalg.norm(B, 2))
        per_k[Nx] = vals
        series["c_diff"].append(max(vals))
    for name, vals in series.items():
        verdict = _ladder_verdict(vals, ratio)
        for Nx, v in zip(ladder, vals):
            rows.append(SuiteRow(name, Nx, "all", float(v), verdict))
    for Nx in ladder:
        vals = per_k[Nx]
        head = max(vals[: max(Nx // 8, 1)])
        tail = max(vals[Nx // 8:]) if len(vals) > Nx // 8 else head
        sat = tail / head if head > 0 else math.inf
        rows.append(SuiteRow("c_diff_tail", Nx, "tail/head", float(sat),
                             "pass" if sat < ratio else "fail"))
    for Nx in ladder:
        for k, v in enumerate(per_k[Nx], start=1):
            rows.append(SuiteRow("c_diff_mode", Nx, str(k), float(v), "info"))
    return rows


def growth_in_T(kernel: Kernel, T_values=(0.5, 1.0, 2.0), Nx: int = 64,
                time_factor: int = 1, probes: int = 16, seed: int = 0,
                tol: float = 1e-8) -> list:
    """Measured norms of the suite quantities as functions of ``T``."""
    rows = []
    diag = kernel.diagonal_multiplied()
    for T in T_values:
        nt = int(round(time_factor * Nx * T)) + 1
        times = np.linspace(0.0, T, nt)
        shape = (Nx,)
        a = operator_norm_estimate(averaging_operator(kernel, times, shape, "fric"), probes, seed,
                                   tol=tol)
        b = operator_norm_estimate(averaging_operator(diag, times, shape, "fric", "H1"),
                                   probes, seed, tol=tol)
        c = max(k * np.linalg.norm(weighted_mode_matrix(kernel, times, [k], "free", shape=shape)
                                   - weighted_mode_matrix(kernel, times, [k], "fric", shape=shape), 2)
                for k in range(1, Nx // 4 + 1))
        rows += [SuiteRow(f"growth_a_fric_T{T:g}", Nx, "all", float(a), "info"),
                 SuiteRow(f"growth_b_fric_T{T:g}", Nx, "all", float(b), "info"),
                 SuiteRow(f"growth_c_diff_T{T:g}", Nx, "all", float(c), "info")]
    return rows
