import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.sparse.linalg import aslinearoperator

from thickspray import avgops as ao
from thickspray import grid as gr
from thickspray.errors import ConfigError, ConvergenceWarning

SQPI = math.sqrt(math.pi)
GAUSS = ao.GaussianKernel(1, 1.0, 1.0)


def mode_field(times, Nx, k=1, fn=None):
    x = np.arange(Nx) * 2 * np.pi / Nx
    amp = np.ones_like(times) if fn is None else fn(times)
    return ao.SpaceTimeField(times, amp[:, None] * np.exp(1j * k * x)[None, :])


def coef(field, k=1):
    return field.coefficients()[:, k]


# --- closed-form single-mode responses ----------------------------------------------------

def test_k_free_gaussian_example():
    times = np.linspace(0, 1, 1001)
    out = coef(ao.k_free(GAUSS, mode_field(times, 8)))[-1]
    exact = -SQPI * 2 * (1 - math.exp(-0.25))
    assert exact == pytest.approx(-0.7842, abs=1e-4)
    assert abs(out - exact) < 1e-6


def test_k_fric_gaussian_example():
    times = np.linspace(0, 1, 1001)
    out = coef(ao.k_fric(GAUSS, mode_field(times, 8)))[-1]
    exact = -SQPI * quad(lambda w: w * math.exp(-w * w / 4) / (1 + w), 0, math.e - 1,
                         epsabs=1e-14)[0]
    assert abs(out - exact) < 1e-6


def test_trivial_inputs():
    times = np.linspace(0, 1, 11)
    zero = ao.GaussianKernel(1, 1.0, 0.0)
    assert np.abs(ao.k_free(zero, mode_field(times, 8)).values).max() == 0
    const = ao.SpaceTimeField(times, np.ones((11, 8)))
    assert np.abs(ao.k_free(GAUSS, const).values).max() < 1e-15
    out = ao.k_fric(GAUSS, mode_field(times, 8))
    assert np.abs(out.values[0]).max() == 0


def test_dimension_mismatch():
    times = np.linspace(0, 1, 5)
    with pytest.raises(ConfigError):
        ao.k_free(ao.GaussianKernel(2), mode_field(times, 8))


def test_space_time_field_validation():
    with pytest.raises(ConfigError):
        ao.SpaceTimeField(np.array([0.0, 1.0]), np.zeros((3, 8)))
    with pytest.raises(ConfigError):
        ao.SpaceTimeField(np.array([0.5, 1.0]), np.zeros((2, 8)))


# --- structural properties ---------------------------------------------------------------

@given(st.integers(0, 2 ** 31), st.floats(-2, 2))
def test_linearity_in_H(seed, a):
    r = np.random.default_rng(seed)
    times = np.linspace(0, 1, 9)
    H1, H2 = r.standard_normal((9, 8)), r.standard_normal((9, 8))
    K = lambda v: ao.k_fric(GAUSS, ao.SpaceTimeField(times, v)).values
    assert np.abs(K(H1 + a * H2) - K(H1) - a * K(H2)).max() < 1e-12


def test_linearity_in_G():
    times = np.linspace(0, 1, 9)
    H = mode_field(times, 8, 2, np.cos)
    g1, g2 = ao.GaussianKernel(1, 1.0, 0.7), ao.GaussianKernel(1, 1.0, 0.3)
    total = ao.k_free(GAUSS, H).values
    assert np.abs(ao.k_free(g1, H).values + ao.k_free(g2, H).values - total).max() < 1e-12


def test_causality(rng):
    times = np.linspace(0, 1, 21)
    H = rng.standard_normal((21, 16))
    H2 = H.copy()
    H2[12:] += rng.standard_normal((9, 16))
    for op in (ao.k_free, ao.k_fric):
        a = op(GAUSS, ao.SpaceTimeField(times, H)).values
        b = op(GAUSS, ao.SpaceTimeField(times, H2)).values
        assert np.abs(a[:12] - b[:12]).max() < 1e-14
        assert np.abs(a[12:] - b[12:]).max() > 1e-3


def test_free_fric_difference_small_time():
    ratios = []
    for t in (0.05, 0.025, 0.0125):
        times = np.linspace(0, t, 65)
        H = mode_field(times, 16)
        diff = ao.k_free(GAUSS, H).values[-1] - ao.k_fric(GAUSS, H).values[-1]
        ratios.append(np.sqrt(np.mean(np.abs(diff) ** 2)) / t ** 3)
    assert max(ratios) / min(ratios) < 1.3


# --- gridded kernels ---------------------------------------------------------------------------

def gridded_gaussian(grid, times, power=0):
    nt = times.size
    T, S = np.meshgrid(times, times, indexing="ij")
    X, V = grid.phase_mesh()
    prof = np.broadcast_to(-2 * V[0] * np.exp(-V[0] ** 2), grid.phase_shape)
    tf = (T - S) ** power
    vals = tf[:, :, None, None, None] * prof[None, None, None]
    return ao.GriddedKernel(grid, times, vals, diagonal_vanishing=power > 0)


def test_gridded_matches_analytic_symbol():
    g = gr.PhaseGrid(1, 8, 128, 10.0)
    times = np.linspace(0, 1, 3)
    Gg = gridded_gaussian(g, times)
    xi = np.linspace(-6, 6, 41)[None]
    num = Gg.fxv(2, 0, [0], xi)
    ana = GAUSS.fv(1.0, 0.0, xi)
    assert np.abs(num - ana).max() < 1e-6


def test_gridded_operator_matches_analytic():
    g = gr.PhaseGrid(1, 8, 128, 10.0)
    times = np.linspace(0, 1, 9)
    H = mode_field(times, 8, 1, lambda t: 1 + t)
    for op in (ao.k_free, ao.k_fric):
        a = op(gridded_gaussian(g, times), H).values
        b = op(GAUSS, H).values
        assert np.abs(a - b).max() < 1e-6


def test_gridded_kernel_validation():
    g = gr.PhaseGrid(1, 8, 16, 5.0)
    times = np.linspace(0, 1, 3)
    with pytest.raises(ConfigError):
        ao.GriddedKernel(g, times, np.zeros((3, 3, 1, 8, 8)))
    vals = gridded_gaussian(g, times).values
    with pytest.raises(ConfigError):
        ao.GriddedKernel(g, times, vals, diagonal_vanishing=True)
    ao.GriddedKernel(g, times, gridded_gaussian(g, times, 1).values, diagonal_vanishing=True)
    with pytest.raises(ConfigError):
        ao.k_free(gridded_gaussian(g, times), mode_field(np.linspace(0, 1, 5), 8))


# --- operator norms -------------------------------------------------------------------------

def test_norm_estimate_trivial_operators():
    n = 40
    I = aslinearoperator(np.eye(n))
    assert ao.operator_norm_estimate(I) == pytest.approx(1.0, abs=1e-6)
    assert ao.operator_norm_estimate(aslinearoperator(2 * np.eye(n))) == pytest.approx(2.0, abs=1e-6)
    assert ao.operator_norm_estimate(aslinearoperator(np.zeros((n, n)))) == 0.0
    with pytest.raises(ConfigError):
        ao.operator_norm_estimate(I, probes=4)


@given(st.integers(0, 2 ** 31))
def test_norm_estimate_matches_svd(seed):
    A = np.random.default_rng(seed).standard_normal((30, 30))
    assert ao.operator_norm_estimate(aslinearoperator(A), seed=seed) == \
        pytest.approx(np.linalg.norm(A, 2), rel=1e-8)


def test_norm_estimate_deterministic_and_warns():
    op = ao.averaging_operator(GAUSS, np.linspace(0, 1, 33), (32,), "free")
    a = ao.operator_norm_estimate(op, 8, seed=3)
    assert a == ao.operator_norm_estimate(op, 8, seed=3)
    assert a == pytest.approx(ao.exact_norm(op), rel=1e-8)
    with pytest.warns(ConvergenceWarning):
        ao.operator_norm_estimate(op, 8, seed=3, maxiter=1)


def test_averaging_operator_blocks_match_k_free(rng):
    times = np.linspace(0, 1, 9)
    op = ao.averaging_operator(GAUSS, times, (8,), "free")
    w = ao._time_weights(times)
    H = rng.standard_normal((9, 8))
    c = ao.SpaceTimeField(times, H).coefficients()
    x = (np.sqrt(w)[:, None] * c).T.ravel()
    y = (op @ x).reshape(8, 9).T / np.where(w > 0, np.sqrt(w), 1)[:, None]
    ref = ao.k_free(GAUSS, ao.SpaceTimeField(times, H)).coefficients()
    assert np.abs(y[1:] - ref[1:]).max() < 1e-12
    with pytest.raises(ConfigError):
        ao.averaging_operator(GAUSS, times, (8,), "free", out_space="H2")


# --- suite ------------------------------------------------------------------------------

def test_suite_small_ladder():
    rows = ao.smoothing_suite(GAUSS, ladder=(16, 32), probes=8)
    tests = {r.test for r in rows}
    assert {"a_free", "a_fric", "b_free", "b_fric", "c_diff", "c_diff_tail", "c_diff_mode"} <= tests
    for r in rows:
        assert r.value >= 0 and r.verdict in ("pass", "fail", "info")
    a = [r for r in rows if r.test == "a_free"]
    assert a[0].verdict == "pass"


def test_suite_rejects_bad_family():
    with pytest.raises(ConfigError):
        ao.smoothing_suite(ao.GaussianKernel(1, 1.0, 1.0, time_power=1), ladder=(16, 32))
    with pytest.raises(ConfigError):
        ao.smoothing_suite(ao.GaussianKernel(2), ladder=(16, 32))


def test_growth_rows():
    rows = ao.growth_in_T(GAUSS, T_values=(0.5, 1.0), Nx=16, probes=8)
    assert len(rows) == 6 and all(r.verdict == "info" for r in rows)
    fric = [r.value for r in rows if r.test.startswith("growth_a_fric")]
    assert fric[0] <= fric[1]
