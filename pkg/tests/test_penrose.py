import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.optimize import minimize_scalar

from thickspray import grid as gr
from thickspray import model as md
from thickspray import penrose as pn
from thickspray.errors import BoundError, ConfigError, ResolutionError

G1 = gr.PhaseGrid(1, 8, 128, 8.0)
LAW = md.PressureLaw.power(2.0)
A = 0.1 / math.sqrt(math.pi)
SQPI = math.sqrt(math.pi)


def homog(grid, fn):
    return gr.Distribution.from_function(grid, lambda X, V: fn(*V) + 0 * X[0])


def maxwellian(grid=G1, amp=A):
    return homog(grid, lambda v: amp * np.exp(-v ** 2))


def two_bump(amp, grid=None):
    grid = grid or gr.PhaseGrid(1, 8, 256, 10.0)
    return homog(grid, lambda v: amp * (np.exp(-(v - 3) ** 2) + np.exp(-(v + 3) ** 2)))


def state_for(f, rho=1.0):
    n = f.grid.spatial_shape
    return md.FluidState.from_rho(np.full(n, rho), np.zeros((f.grid.d,) + n),
                                  gr.velocity_moment(f, 0))


def oracle_P(amp, gamma, tau, k, variant="standard"):
    """Closed-form ray of a Gaussian integrated by adaptive quadrature."""
    z = complex(gamma, tau) / abs(k)
    rho_f = amp * SQPI
    C = 2.0 / (1 - rho_f)
    W = 1 / (1 + k * k) if variant == "standard" else 1.0
    g = lambda u, part: (np.exp(-z * u) * (-u * SQPI * amp * np.exp(-u * u / 4))).__getattribute__(part)
    re = quad(lambda u: g(u, "real"), 0, 60, epsabs=1e-13, limit=200)[0]
    im = quad(lambda u: g(u, "imag"), 0, 60, epsabs=1e-13, limit=200)[0]
    return C * W * complex(re, im)


# --- types ------------------------------------------------------------------------

def test_frequency_point_validation():
    with pytest.raises(ValueError):
        pn.FrequencyPoint(0.0, 1.0, (1.0,))
    with pytest.raises(ValueError):
        pn.FrequencyPoint(1.0, 1.0, (0.0, 0.0))
    p = pn.FrequencyPoint(0.3, 0.4, (0.0, 2.0))
    assert p.knorm == 2.0 and p.z == complex(0.15, 0.2)


def test_sampling_validation():
    with pytest.raises(ConfigError):
        pn.PenroseSampling(0, 4, 4, 1)
    s = pn.PenroseSampling(5, 4, 4, 2)
    r = s.refined()
    assert set(np.round(s.phis(), 12)) <= set(np.round(r.phis(), 12))
    assert set(np.round(s.betas(), 12)) <= set(np.round(r.betas(), 12))


# --- ray transform ---------------------------------------------------------------------

def test_ray_examples():
    f = homog(G1, lambda v: np.exp(-v ** 2))
    assert ray_close(pn.ray_transform(f, [0], [1.0], 2.0), -2 * SQPI * math.exp(-1))
    assert pn.ray_transform(f, [0], [1.0], 2.0).real == pytest.approx(-1.3041, abs=1e-4)
    assert abs(pn.ray_transform(f, [3], [1.0], 0.0)) == 0.0
    assert abs(pn.ray_transform(gr.Distribution.zeros(G1), [0], [1.0], 1.5)) == 0.0
    with pytest.raises(ValueError):
        pn.ray_transform(f, [0], [2.0], 1.0)


def ray_close(a, b, tol=1e-10):
    return abs(a - b) < tol


def test_ray_2d_radial_gaussian():
    g = gr.PhaseGrid(2, 8, 64, 7.0)
    f = homog(g, lambda v1, v2: np.exp(-v1 ** 2 - v2 ** 2))
    kh = np.array([0.6, 0.8])
    s = np.array([0.5, 1.0, 3.0])
    assert np.abs(pn.ray_transform(f, [1, 2], kh, s) + s * math.pi * np.exp(-s ** 2 / 4)).max() < 1e-10


# --- Penrose function -------------------------------------------------------------------

def test_penrose_maxwellian_value():
    f = maxwellian()
    P = pn.penrose_value(f, A * SQPI, 1.0, LAW, [0], pn.FrequencyPoint(1e-6, 0.0, (1.0,)))
    assert P.real == pytest.approx(-0.2222, abs=1e-4)
    assert P.real == pytest.approx(-2 / 9, abs=1e-6)
    assert abs(1 - P) == pytest.approx(1.2222, abs=1e-4)


@pytest.mark.parametrize("gamma,tau,k", [(0.5, 0.0, 1.0), (0.1, 1.3, 2.0), (1e-6, -0.7, 0.5),
                                         (2.0, 3.0, 3.0)])
@pytest.mark.parametrize("variant", ["standard", "optimal"])
def test_penrose_against_quadrature(gamma, tau, k, variant):
    f = maxwellian()
    P = pn.penrose_value(f, A * SQPI, 1.0, LAW, [0], pn.FrequencyPoint(gamma, tau, (k,)), variant)
    assert abs(P - oracle_P(A, gamma, tau, k, variant)) < 1e-9


def test_penrose_zero_f():
    P = pn.penrose_value(gr.Distribution.zeros(G1), 0.0, 1.0, LAW, [0],
                         pn.FrequencyPoint(0.1, 0.2, (1.0,)))
    assert P == 0


def test_penrose_linear_frozen_prefactor():
    f1 = maxwellian()
    f2 = homog(G1, lambda v: 2 * A * np.exp(-v ** 2))
    pt = pn.FrequencyPoint(0.2, 0.5, (1.5,))
    P1 = pn.penrose_value(f1, 0.1, 1.0, LAW, [0], pt)
    P2 = pn.penrose_value(f2, 0.1, 1.0, LAW, [0], pt)
    assert abs(P2 - 2 * P1) < 1e-12


def test_penrose_superposition():
    fa = homog(G1, lambda v: 0.02 * np.exp(-(v - 1) ** 2))
    fb = homog(G1, lambda v: 0.03 * np.exp(-(v + 0.5) ** 2 / 2))
    fab = gr.Distribution(G1, fa.values + fb.values)
    pt = pn.FrequencyPoint(0.05, -0.4, (1.0,))
    P = lambda f: pn.penrose_value(f, 0.1, 1.0, LAW, [0], pt)
    assert abs(P(fab) - P(fa) - P(fb)) < 1e-11


@pytest.mark.parametrize("lam", [0.5, 2.0, 10.0])
def test_optimal_variant_homogeneous(lam):
    f = maxwellian()
    for g, t, k in [(0.3, 0.2, 1.0), (1e-3, 1.1, 0.7), (0.5, -2.0, 3.0)]:
        P0 = pn.penrose_value(f, 0.1, 1.0, LAW, [0], pn.FrequencyPoint(g, t, (k,)), "optimal")
        P1 = pn.penrose_value(f, 0.1, 1.0, LAW, [0],
                              pn.FrequencyPoint(lam * g, lam * t, (lam * k,)), "optimal")
        assert abs(P1 - P0) <= 1e-6 * abs(P0)


def test_small_k_limit():
    f = maxwellian()
    vals = [abs(pn.penrose_value(f, 0.1, 1.0, LAW, [0], pn.FrequencyPoint(0.5, 0.3, (k,))))
            for k in (1e-1, 1e-2, 1e-3)]
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-4


@pytest.mark.parametrize("gamma,tau,k", [(1e-6, 0.0, 1.0), (0.3, 2.0, 1.0), (0.01, -1.0, 4.0)])
def test_majorant_bounds_value(gamma, tau, k):
    f = two_bump(0.05)
    pt = pn.FrequencyPoint(gamma, tau, (k,))
    P = pn.penrose_value(f, 0.1, 1.0, LAW, [0], pt)
    M = pn.penrose_majorant(f, 0.1, 1.0, LAW, [0], pt)
    assert abs(P) <= M * (1 + 1e-6)


def test_penrose_errors():
    f = maxwellian()
    pt = pn.FrequencyPoint(0.1, 0.0, (1.0,))
    with pytest.raises(BoundError):
        pn.penrose_value(f, 1.0, 1.0, LAW, [0], pt)
    with pytest.raises(ConfigError):
        pn.penrose_value(f, 0.1, 1.0, LAW, [0], pt, "bogus")


def test_unresolved_spectrum_rejected():
    g = gr.PhaseGrid(1, 8, 32, 4.0)
    f = homog(g, lambda v: (np.abs(v) < 1).astype(float))
    with pytest.raises(ResolutionError):
        pn.penrose_value(f, 0.1, 1.0, LAW, [0], pn.FrequencyPoint(0.1, 0.0, (1.0,)))


# --- lambda minimization ------------------------------------------------------------

@pytest.mark.parametrize("z,expected", [(1, 0.0), (2, 0.0), (1j, 1.0), (0.5, 0.5), (0, 1.0),
                                        (-3 + 1j, 1.0)])
def test_min_over_lambda_examples(z, expected):
    assert pn.min_over_lambda(z) == pytest.approx(expected, abs=1e-15)


_LAMS = np.concatenate([np.logspace(-12, -4, 200), np.linspace(1e-4, 1, 1000)])


def brute_min(z):
    """Grid search over lambda, then bounded refinement around the best node."""
    vals = np.abs(1 - _LAMS * z)
    i = int(np.argmin(vals))
    lo, hi = _LAMS[max(i - 1, 0)], _LAMS[min(i + 1, len(_LAMS) - 1)]
    res = minimize_scalar(lambda l: abs(1 - l * z), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-14})
    return min(vals[i], res.fun)


@given(st.complex_numbers(max_magnitude=20, allow_nan=False, allow_infinity=False))
def test_min_over_lambda_brute_force(z):
    brute = brute_min(z)
    closed = pn.min_over_lambda(z)
    assert closed <= brute + 1e-12
    assert brute - closed < 1e-6


def test_min_over_lambda_random_batch(rng):
    z = rng.standard_normal(1000) * 3 + 1j * rng.standard_normal(1000) * 3
    brute = np.array([brute_min(c) for c in z])
    closed = pn.min_over_lambda(z)
    assert np.all(closed <= brute + 1e-12)
    assert np.abs(brute - closed).max() < 1e-6


# --- check_condition ------------------------------------------------------------------

SMALL = pn.PenroseSampling(16, 12, 4, 2)


def test_margin_zero_f():
    f = gr.Distribution.zeros(G1)
    r = pn.check_condition(f, state_for(f), LAW, SMALL, c_required=0.99)
    assert r.margin == 1.0 and r.verdict


def test_margin_maxwellian_passes():
    f = maxwellian()
    r = pn.check_condition(f, state_for(f), LAW, c_required=0.5)
    assert r.margin > 0.5 and r.verdict
    d = r.to_dict()
    assert set(d) >= {"margin", "argmin", "variant", "samples", "pass"}
    assert d["samples"]["n_phi"] == 64 and d["samples"]["n_beta"] == 48


def test_margin_monotone_under_refinement():
    f = gr.Distribution.from_function(
        gr.PhaseGrid(1, 8, 128, 8.0),
        lambda X, V: A * (1 + 0.2 * np.cos(X[0])) * np.exp(-(V[0] - 0.3) ** 2))
    s = pn.PenroseSampling(8, 6, 4, 4)
    margins = []
    for _ in range(3):
        margins.append(pn.check_condition(f, state_for(f), LAW, s).margin)
        s = s.refined()
    assert margins[0] >= margins[1] - 1e-12 and margins[1] >= margins[2] - 1e-12


def test_two_bump_fails():
    f = two_bump(0.25)
    r = pn.check_condition(f, state_for(f), LAW, pn.PenroseSampling(32, 24, 4, 4), c_required=0.05)
    assert r.margin < 0.05 and not r.verdict


def test_two_bump_prefactor_pole():
    f = two_bump(0.5)
    with pytest.raises(BoundError):
        pn.check_condition(f, state_for(f), LAW, SMALL)


def test_check_condition_bad_variant():
    f = maxwellian()
    with pytest.raises(ConfigError):
        pn.check_condition(f, state_for(f), LAW, SMALL, variant="other")


def test_check_condition_2d():
    g = gr.PhaseGrid(2, 8, 48, 6.0)
    f = homog(g, lambda v1, v2: A * np.exp(-v1 ** 2 - v2 ** 2))
    r = pn.check_condition(f, state_for(f), LAW, pn.PenroseSampling(8, 6, 8, 4))
    assert 0.5 < r.margin <= 1.0
    assert len(r.argmin["k"]) == 2


# --- sufficient conditions --------------------------------------------------------------

def test_classify_maxwellian():
    f = maxwellian()
    tags = pn.classify_sufficient(f, pn.prefactor(0.1, 1.0, LAW))
    assert {"one-bump", "radial-nonincreasing", "small-amplitude"} <= tags


def test_classify_two_bump():
    assert pn.classify_sufficient(two_bump(0.5), 2.2) == {"none"}
    assert pn.classify_sufficient(two_bump(1e-4), 2.2) == {"small-amplitude"}


def test_classify_zero():
    assert pn.classify_sufficient(gr.Distribution.zeros(G1)) == {"small-amplitude"}


def test_classify_shifted_bump_is_not_radial():
    f = homog(G1, lambda v: A * np.exp(-(v - 1) ** 2))
    tags = pn.classify_sufficient(f)
    assert "one-bump" in tags and "radial-nonincreasing" not in tags
