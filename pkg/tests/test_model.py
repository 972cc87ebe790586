import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from thickspray import grid as gr
from thickspray import model as md
from thickspray.errors import BoundError, NumericInputError, VacuumError

G1 = gr.PhaseGrid(1, 32, 128, 8.0)
X = G1.x


def _homog(grid, fn):
    return gr.Distribution.from_function(grid, lambda X, V: fn(V[0]) + 0 * X[0])


# --- pressure ---------------------------------------------------------------

@pytest.mark.parametrize("gamma", [2.0, 1.4, 5.0])
def test_power_laws_admissible(gamma):
    assert md.check_pressure_admissible(md.PressureLaw.power(gamma))


def test_rho_exp_law_rejected_at_turning_point():
    law = md.PressureLaw(lambda r: r * np.exp(-r), lambda r: (1 - r) * np.exp(-r), "rho_exp")
    v = md.check_pressure_admissible(law)
    assert not v
    assert "decreasing" in v.reason
    root = (3 - math.sqrt(5)) / 2
    step = 10 ** (9 / 511)
    assert root <= v.witness_rho <= root * step ** 2


def test_pressure_nonzero_at_origin_rejected():
    law = md.PressureLaw(lambda r: 1 + r ** 2, lambda r: 2 * r)
    assert not md.check_pressure_admissible(law)


def test_pressure_nonfinite_raises():
    law = md.PressureLaw(lambda r: r ** 2, lambda r: np.where(r > 1, np.inf, 2 * r))
    with pytest.raises(NumericInputError):
        md.check_pressure_admissible(law)


def test_pi_prime():
    law = md.PressureLaw.power(2.0)
    assert law.pi_prime(np.array([3.0]))[0] == pytest.approx(2.0)


# --- fluid state --------------------------------------------------------------

def test_fluid_state_rejects_vacuum():
    with pytest.raises(VacuumError):
        md.FluidState(np.zeros(8), np.zeros((1, 8)))


@given(st.integers(0, 2 ** 31), st.floats(0.05, 0.9))
def test_mass_roundtrip(seed, Theta):
    r = np.random.default_rng(seed)
    rho = r.uniform(0.2, 3.0, 16)
    rho_f = r.uniform(0.0, Theta, 16)
    st_ = md.FluidState.from_rho(rho, np.zeros((1, 16)), rho_f)
    assert np.abs(st_.m - (1 - rho_f) * rho).max() < 1e-12
    back = md.reconstruct_rho(st_.m, rho_f, Theta)
    assert np.abs(back - rho).max() < 1e-12 * rho.max()


def test_reconstruct_guard():
    with pytest.raises(BoundError):
        md.reconstruct_rho(np.ones(4), np.full(4, 0.8), 0.5)
    with pytest.raises(VacuumError):
        md.reconstruct_rho(np.array([1.0, -1.0]), np.zeros(2), 0.5)


# --- force -------------------------------------------------------------------

def test_force_constant_density():
    law = md.PressureLaw.power(2.0)
    s = md.FluidState(np.full(32, 1.3), np.zeros((1, 32)))
    assert np.abs(md.compute_force(s, law, 0.1)).max() < 1e-14
    s = md.FluidState(np.full(32, 1.3), np.full((1, 32), 0.4))
    assert np.abs(md.compute_force(s, law, 0.1) - 0.4).max() < 1e-14


def test_force_single_mode():
    rho = 1 + 0.1 * np.cos(X)
    s = md.FluidState(rho, np.zeros((1, 32)))
    E = md.compute_force(s, md.PressureLaw.power(2.0), 1.0)
    assert np.abs(E[0] - 0.1 * rho * np.sin(X)).max() < 1e-13
    h = 1e-5
    J = lambda y: 1 + 0.05 * np.cos(y)
    fd = -2 * rho * (J(X + h) - J(X - h)) / (2 * h)
    assert np.abs(E[0] - fd).max() < 1e-9


@given(st.integers(0, 2 ** 31), st.floats(-3, 3))
def test_force_affine_in_u(seed, a):
    r = np.random.default_rng(seed)
    rho = 1 + 0.2 * np.cos(X) + 0.05 * np.sin(3 * X)
    law = md.PressureLaw.power(2.0)
    u1, u2 = r.standard_normal((1, 32)), r.standard_normal((1, 32))
    E = lambda u: md.compute_force(md.FluidState(rho, u), law, 0.1)
    E0 = E(np.zeros((1, 32)))
    assert np.allclose(E(u1 + a * u2) - E0, (E(u1) - E0) + a * (E(u2) - E0), atol=1e-12)


def test_force_eps_limit_quadratic():
    rho = 1 + 0.2 * np.cos(X) + 0.1 * np.sin(2 * X)
    s = md.FluidState(rho, np.zeros((1, 32)))
    law = md.PressureLaw.power(2.0)
    E0 = md.compute_force(s, law, 0.0)
    d1 = np.abs(md.compute_force(s, law, 2e-3) - E0).max()
    d2 = np.abs(md.compute_force(s, law, 1e-3) - E0).max()
    assert d1 / d2 == pytest.approx(4.0, rel=1e-3)


def test_force_vacuum():
    s = md.FluidState(np.ones(8), np.zeros((1, 8)))
    object.__setattr__(s, "rho", np.zeros(8))
    with pytest.raises(VacuumError):
        md.compute_force(s, md.PressureLaw.power(2.0), 0.1)


# --- Brinkman ------------------------------------------------------------------

def test_brinkman_examples():
    u = np.zeros((1, 32))
    assert np.abs(md.brinkman_source(gr.Distribution.zeros(G1), u)).max() == 0
    f = _homog(G1, lambda v: np.exp(-v ** 2))
    assert np.abs(md.brinkman_source(f, u)).max() < 1e-12
    f = _homog(G1, lambda v: np.exp(-(v - 1) ** 2))
    assert np.abs(md.brinkman_source(f, np.ones((1, 32)))).max() < 1e-8


def test_brinkman_monokinetic_limit():
    g = gr.PhaseGrid(1, 8, 2048, 4.0)
    u0 = 0.3
    res = []
    for w in (0.2, 0.1, 0.05):
        sym = _homog(g, lambda v: np.exp(-((v - u0) / w) ** 2))
        assert np.abs(md.brinkman_source(sym, np.full((1, 8), u0))).max() < 1e-12
        skew = _homog(g, lambda v: np.maximum(1 + (v - u0), 0) * np.exp(-((v - u0) / w) ** 2))
        rho_f = gr.velocity_moment(skew, 0)
        b = md.brinkman_source(skew, np.full((1, 8), u0))
        assert np.allclose(b / rho_f, w ** 2 / 2, rtol=1e-8)
        res.append(np.abs(b).max())
    assert res[0] / res[1] == pytest.approx(8.0, rel=1e-6)


# --- bounds --------------------------------------------------------------------

def _with_rhof(level):
    return _homog(G1, lambda v: level / math.sqrt(math.pi) * np.exp(-v ** 2))


def test_bounds_dilute_pass():
    f = _with_rhof(0.1)
    s = md.FluidState.from_rho(np.ones(32), np.zeros((1, 32)), 0.1)
    assert md.check_bounds(s, f, md.BoundWitness(0.5, 0.5, 0.5, 1.5))


def test_bounds_no_particles():
    s = md.FluidState(np.ones(32), np.zeros((1, 32)))
    v = md.check_bounds(s, gr.Distribution.zeros(G1), md.BoundWitness(0.5, 1.0, 0.5, 2.0))
    assert v and v.describe() == "all bounds hold"


def test_bounds_dense_fails_first():
    f = _with_rhof(0.9)
    s = md.FluidState(np.ones(32), np.zeros((1, 32)))
    v = md.check_bounds(s, f, md.BoundWitness(0.5, 0.5, 0.05, 1.5))
    assert not v
    assert v.failures[0][0] == "rho_f <= (Theta+1)/2"
    assert len(v.failures) == 1
    assert "0.75" in v.describe()


def test_initial_hypotheses_strict():
    f = _with_rhof(0.6)
    s = md.FluidState.from_rho(np.ones(32), np.zeros((1, 32)), 0.6)
    w = md.BoundWitness(0.5, 0.5, 0.3, 1.5)
    assert md.check_bounds(s, f, w)
    v = md.check_initial_hypotheses(s, f, w)
    assert not v and v.failures[0][0] == "rho_f < Theta"


# --- initial data ----------------------------------------------------------------

def test_build_initial():
    k = md.KineticSpec((md.Bump(0.2, 0.5, 1.0),), 2, 0.1)
    fl = md.FluidSpec(1.2, 1, 0.1, 0.3)
    f, s = md.build_initial(G1, k, fl)
    rho_f = gr.velocity_moment(f, 0)
    assert np.allclose(rho_f, 0.2 * math.sqrt(math.pi) * (1 + 0.1 * np.cos(2 * X)), atol=1e-10)
    assert np.allclose(s.rho, 1.2 * (1 + 0.1 * np.cos(X)))
    assert np.allclose(s.u, 0.3)
    assert np.allclose(s.m, (1 - rho_f) * s.rho, atol=1e-14)
    with pytest.raises(ValueError):
        md.build_initial(G1, md.KineticSpec((md.Bump(0.1),) * 5), fl)
