import os
from dataclasses import replace

import numpy as np
import pytest

from conftest import FIXTURES
from stokesdarcy.coefficients import EffectiveCoefficients
from stokesdarcy.fem import P2, Field
from stokesdarcy.macro import (ConditionSet, MacroProblem, _SigmaTrace, assemble_coupled,
                               darcy_velocity, reduced_coefficients, solve_macro)
from stokesdarcy.mesh import build_rectangle

EPS = 0.05
SIGMA = ((0.0, 0.0), (1.0, 0.0))


@pytest.fixture(scope="module")
def table():
    return EffectiveCoefficients.read(os.path.join(FIXTURES, "coefficients_d0.5_m4_h0.05.txt"))


def rms(a):
    return float(np.sqrt(np.mean(np.asarray(a) ** 2)))


def test_zero_lid_gives_zero_solution(table):
    pr = MacroProblem(K=table.K, eps=EPS, h=0.1, lid_velocity=0.0)
    for cond in (ConditionSet.classical(eps=EPS), ConditionSet.higher_order(table, EPS)):
        s = solve_macro(pr, cond)
        assert np.abs(s.vff.values).max() == 0.0
        assert np.abs(s.pff.values).max() == 0.0
        assert np.abs(s.ppm.values).max() == 0.0


def test_condition_set_validation(table):
    with pytest.raises(ValueError):
        ConditionSet("robin", coeffs=table)
    with pytest.raises(ValueError):
        ConditionSet.higher_order(replace(table, N1=1e-9))
    with pytest.raises(ValueError):
        ConditionSet.generalized(None)
    with pytest.raises(ValueError):
        ConditionSet.classical(alpha=0.0)
    with pytest.raises(ValueError):
        ConditionSet.classical(eps=-1.0)


def test_condition_constants(table):
    c = table
    z = ConditionSet.classical(eps=EPS).constants(c.K)
    assert z["a_v"] == pytest.approx(1.0 / (EPS * np.sqrt(c.K[0, 0])), rel=1e-14)
    assert z["c_dv"] == z["b_dv"] == z["ns"] == 0.0
    z = ConditionSet.higher_order(c, EPS).constants(c.K)
    assert z["a_v"] == pytest.approx(-1.0 / (EPS * c.N1))
    assert z["c_dv"] == pytest.approx(-EPS * c.W / c.N1)
    assert z["b_dv"] == pytest.approx(-(c.Leta + c.Eb + c.N1) / c.N1)
    g = ConditionSet.generalized(c, EPS).constants(c.K)
    assert g["a_dv"] == g["b_dv"] == g["c_dv"] == g["b_p2"] == 0.0
    assert g["a_p1"] == z["a_p1"]


def test_higher_order_reduces_to_generalized(table):
    red = reduced_coefficients(table)
    pr = MacroProblem(K=table.K, eps=EPS, h=0.1)
    a = assemble_coupled(pr, ConditionSet.higher_order(red, EPS)).A
    b = assemble_coupled(pr, ConditionSet.generalized(red, EPS)).A
    assert abs(a - b).max() <= 1e-12 * abs(b).max()
    # and the full coefficients do change the matrix
    c = assemble_coupled(pr, ConditionSet.higher_order(table, EPS)).A
    assert abs(c - b).max() > 1e-6 * abs(b).max()


def test_non_matching_sigma_traces_rejected():
    ff = build_rectangle((0.0, 1.0, 0.0, 0.5), 0.1, True)
    pm = build_rectangle((0.0, 1.0, -0.5, 0.0), 0.07, True)
    with pytest.raises(ValueError, match="non-matching"):
        _SigmaTrace(ff, pm, 0.0)
    with pytest.raises(ValueError):
        MacroProblem(ff_bounds=(0.0, 1.0, 0.1, 0.5))


@pytest.mark.parametrize("g", [0.0, 1e-3, -2.5e-2])
def test_darcy_only_run_is_linear(g):
    kk = 2e-2
    pr = MacroProblem(K=kk * np.eye(2), eps=EPS, h=0.125, darcy_flux=g)
    s = solve_macro(pr)
    x = s.ppm.space.node_coords
    exact = -g / (EPS ** 2 * kk) * (x[:, 1] + 0.5)
    assert np.abs(s.ppm.values - exact).max() <= 1e-9 * max(1.0, np.abs(exact).max())
    v1, v2 = s.vpm.components()
    assert np.abs(v1).max() <= 1e-12 and np.abs(v2 - g).max() <= 1e-12


def test_darcy_velocity_linear_and_zero():
    mesh = build_rectangle((0.0, 1.0, -0.5, 0.0), 0.1, False)
    D = P2(mesh)
    K_eps = EPS ** 2 * 0.02 * np.eye(2)
    slope = 3.0
    v = darcy_velocity(Field(D, slope * D.node_coords[:, 1]), K_eps)
    v1, v2 = v.components()
    assert np.abs(v1).max() <= 1e-13
    assert np.abs(v2 + EPS ** 2 * 0.02 * slope).max() <= 1e-13
    z = darcy_velocity(Field(D, np.zeros(D.ndof)), K_eps)
    assert np.abs(z.values).max() == 0.0


@pytest.fixture(scope="module")
def cavity(table):
    pr = MacroProblem(K=table.K, eps=EPS, h=1.0 / 40)
    return {v: solve_macro(pr, ConditionSet(v, coeffs=None if v == "classical" else table,
                                            eps=EPS))
            for v in ("classical", "generalized", "higher_order")}


def test_cavity_flux_balance(cavity):
    for s in cavity.values():
        assert s.info["residual"] <= 1e-10
        assert s.info["flux_mismatch"] <= 1e-6
        # closed lid and walls: nothing leaves through the porous bottom
        assert abs(s.info["net_outflow"]) <= 1e-8


def test_generalized_and_higher_order_v1_agree(cavity):
    _, _, va, _ = cavity["generalized"].profile(SIGMA)
    _, _, vb, _ = cavity["higher_order"].profile(SIGMA)
    assert rms(va[:, 0] - vb[:, 0]) / rms(vb[:, 0]) <= 0.02


def test_slip_residual_decreases(table):
    res = []
    for h in (0.1, 0.05, 0.025):
        s = solve_macro(MacroProblem(K=table.K, eps=EPS, h=h), ConditionSet.higher_order(table))
        res.append(s.info["slip_residual"])
    rates = np.log2(np.array(res[:-1]) / np.array(res[1:]))
    assert np.all(rates >= 1.0), res


def test_profile_self_convergence(table):
    cond = ConditionSet.higher_order(table, EPS)
    prof = {}
    for h in (0.1, 0.05, 0.025, 0.0125):
        _, _, v, p = solve_macro(MacroProblem(K=table.K, eps=EPS, h=h, structured=True), cond) \
            .profile(((0.0, 0.25), (1.0, 0.25)), 161)
        prof[h] = v[:, 0]
    ref = prof[0.0125]
    err = [rms(prof[h] - ref) for h in (0.1, 0.05, 0.025)]
    # errors against the finest run: each halving at least halves the error
    assert err[0] / err[1] >= 2.0 and err[1] / err[2] >= 2.0, err


def test_reflection_symmetry(table):
    # Ns and M1_2 are the only terms that distinguish left from right
    sym = replace(table, Ns=0.0, M1=(table.M1[0], 0.0), Mw=(0.0, table.Mw[1]))
    s = solve_macro(MacroProblem(K=sym.K, eps=EPS, h=0.05), ConditionSet.higher_order(sym, EPS))
    for y in (0.25, 0.0, -0.25):
        _, _, v, p = s.profile(((0.0, y), (1.0, y)), 401)
        assert rms(v[:, 0] - v[::-1, 0]) <= 5e-3 * rms(v[:, 0])
        assert rms(v[:, 1] + v[::-1, 1]) <= 3e-2 * rms(v[:, 1])
        assert rms(p + p[::-1]) <= 1e-2 * rms(p)
