from __future__ import annotations

import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.constants import k as K_B

from casimir_films import lifshitz as L
from casimir_films.dielectric import DrudeLorentzModel, ModelValidationError, OscillatorTerm

# independent mpmath oracles
IDEAL_100NM = 0.006363597366573874          # 2 pi R pi^2 hbar c / (240 a^4), R = 77.9 um
FILM_TM = -0.50737340960890037              # film eps 2 on eps 10, d = 4 nm, p = 1, xi = 1e15
FILM_TE = 0.50737340960890037
LI3_NINTH_OVER_4A3 = 2.8176913149686133e19  # Li_3(1/9) / (4 a^3), a = 100 nm

R = 77.9e-6


# ---------------------------------------------------------------------------
# reflection coefficients


@pytest.mark.parametrize("p,eps,expected", [(1.0, 1.0, 1.0), (2.0, 1.0, 2.0), (1.5, 4.0, math.sqrt(5.25))])
def test_kappa_examples(p, eps, expected):
    assert L.kappa(p, eps) == pytest.approx(expected, rel=1e-15)


def test_fresnel_identical_media():
    assert L.fresnel_tm(1.7, 3.0, 3.0) == 0.0
    assert L.fresnel_te(1.7, 3.0, 3.0) == 0.0


def test_fresnel_hand_values():
    assert L.fresnel_tm(1.0, 1.0, 4.0) == pytest.approx(-1 / 3, rel=1e-15)
    assert L.fresnel_te(1.0, 1.0, 4.0) == pytest.approx(1 / 3, rel=1e-15)


def test_fresnel_perfect_conductor_limit():
    # literal formula: vacuum towards an infinite permittivity gives -1
    assert L.fresnel_tm(1.3, 1.0, math.inf) == -1.0
    assert L.fresnel_tm(1.3, math.inf, 1.0) == 1.0
    assert abs(L.fresnel_tm(1.3, 1.0, 1e12)) == pytest.approx(1.0, abs=1e-5)
    assert L.fresnel_te(1.3, 1.0, math.inf) == 1.0


@given(st.floats(1.0, 1e6), st.floats(1.0, 1e8), st.floats(1.0, 1e8))
def test_reflection_bounded(p, e1, e2):
    assert abs(L.fresnel_tm(p, e1, e2)) <= 1.0
    assert abs(L.fresnel_te(p, e1, e2)) <= 1.0


@given(st.floats(1.0, 1e3), st.floats(1.0, 1e4), st.floats(1.0, 1e4), st.floats(0.0, 1e-6), st.floats(1e11, 1e18))
def test_layered_reflection_bounded(p, ef, es, d, xi):
    tm, te = L.layered_reflection(ef, es, d, p, xi)
    assert abs(tm) <= 1.0 + 1e-12
    assert abs(te) <= 1.0 + 1e-12


def test_layered_degenerate_thicknesses():
    p, xi = 1.4, 3e15
    assert L.layered_reflection(2.0, 10.0, 0.0, p, xi) == pytest.approx(
        (L.fresnel_tm(p, 1.0, 10.0), L.fresnel_te(p, 1.0, 10.0)), rel=1e-14
    )
    assert L.layered_reflection(2.0, 10.0, math.inf, p, xi) == (L.fresnel_tm(p, 1.0, 2.0), L.fresnel_te(p, 1.0, 2.0))


def test_layered_oracle():
    tm, te = L.layered_reflection(2.0, 10.0, 4e-9, 1.0, 1e15)
    assert tm == pytest.approx(FILM_TM, rel=1e-14)
    assert te == pytest.approx(FILM_TE, rel=1e-14)


def test_layered_negative_thickness():
    with pytest.raises(ValueError):
        L.layered_reflection(2.0, 10.0, -1e-9, 1.0, 1e15)


# ---------------------------------------------------------------------------
# gradient


def test_ideal_conductor_limit():
    cfg = L.LifshitzConfig(zero_temperature=True)
    g = L.gradient_pfa(100e-9, L.MaterialAssignment("pec", "pec"), cfg)
    assert g == pytest.approx(IDEAL_100NM, rel=1e-9)
    assert L.ideal_gradient(100e-9) == pytest.approx(IDEAL_100NM, rel=1e-9)


def test_vacuum_gives_zero():
    for a in (10e-9, 100e-9, 5e-6):
        assert L.gradient_pfa(a, L.MaterialAssignment(1.0, 1.0)) == 0.0


def test_gold_baseline(au):
    g = L.gradient_pfa(100e-9, L.MaterialAssignment(au, au))
    assert abs(g / 2.754e-3 - 1) < 0.10


def test_static_term_matches_polylog_oracle():
    res = L.gradient_pfa(100e-9, L.MaterialAssignment(2.0, 2.0), full_output=True)
    expected = 2 * R * K_B * 296.0 * 0.5 * LI3_NINTH_OVER_4A3
    assert res.static_term == pytest.approx(expected, rel=1e-10)


class _NoStatic:
    """Delegates to a medium but drops its xi -> 0 reflection."""

    def __init__(self, medium):
        self.medium = L.as_medium(medium)

    def reflection(self, xi, q):
        return self.medium.reflection(xi, q)

    def static_reflection(self, q):
        return np.zeros_like(q), np.zeros_like(q)


def test_half_weight_bookkeeping(au):
    a = 150e-9
    full = L.gradient_pfa(a, L.MaterialAssignment(au, au), full_output=True)
    bare = L.gradient_pfa(a, L.MaterialAssignment(_NoStatic(au), _NoStatic(au)), full_output=True)
    assert bare.static_term == 0.0
    assert full.value - bare.value == pytest.approx(full.static_term, rel=1e-9)


def test_positive_and_decreasing(au, psi):
    a = np.geomspace(15e-9, 3e-6, 12)
    for mats in (L.MaterialAssignment(au, au), L.MaterialAssignment(psi, au)):
        g = np.array([L.gradient_pfa(x, mats) for x in a])
        assert np.all(g > 0)
        assert np.all(np.diff(g) < 0)


def test_linear_in_radius(au):
    mats = L.MaterialAssignment(au, au)
    g1 = L.gradient_pfa(90e-9, mats, L.LifshitzConfig(sphere_radius=R))
    g2 = L.gradient_pfa(90e-9, mats, L.LifshitzConfig(sphere_radius=2 * R))
    assert g2 == 2 * g1


def test_convergence_self_consistency(au):
    mats = L.MaterialAssignment(au, au)
    base = L.LifshitzConfig()
    g = L.gradient_pfa(100e-9, mats, base)
    tighter = L.gradient_pfa(100e-9, mats, replace(base, quad_tol=base.quad_tol / 2))
    more_terms = L.gradient_pfa(100e-9, mats, replace(base, matsubara_tol=base.matsubara_tol / 2, max_terms=2 * base.max_terms))
    assert abs(tighter / g - 1) < base.quad_tol
    assert abs(more_terms / g - 1) < base.quad_tol


def test_full_output_fields(au):
    res = L.gradient_pfa(100e-9, L.MaterialAssignment(au, au), full_output=True)
    assert res.n_terms > 10
    assert 0 <= res.rel_err < 1e-6
    assert res.static_term > 0


def test_convergence_error_carries_partial_sum(au):
    cfg = L.LifshitzConfig(max_terms=20)
    with pytest.raises(L.LifshitzConvergenceError) as exc:
        L.gradient_pfa(20e-9, L.MaterialAssignment(au, au), cfg)
    assert exc.value.n_terms == 20
    assert exc.value.partial_sum > 0
    assert exc.value.tail_estimate > 0


@pytest.mark.parametrize("a", [5e-9, 20e-6])
def test_separation_range(a):
    with pytest.raises(L.SeparationRangeError):
        L.gradient_pfa(a, L.MaterialAssignment("pec", "pec"))


def test_config_validation():
    with pytest.raises(ValueError):
        L.LifshitzConfig(temperature=0)
    with pytest.raises(ValueError):
        L.LifshitzConfig(quad_tol=0.5)


def test_matsubara_grid():
    grid = L.MatsubaraGrid(296.0, 3)
    assert grid.xi[1] == pytest.approx(2.436e14, rel=1e-3)
    assert list(grid.weights) == [0.5, 1, 1, 1]
    assert L.matsubara_frequency(1) == grid.spacing


def test_material_validation_rejects_bad_model():
    bad = DrudeLorentzModel(0.0, 1.0, (OscillatorTerm(1e15, -1e29, 1e14),))
    with pytest.raises(ModelValidationError):
        L.MaterialAssignment(bad, bad).validate()


def test_film_medium_limits(au):
    a = 100e-9
    bulk = L.gradient_pfa(a, L.MaterialAssignment(au, au))
    thin = L.FilmMedium(L.ModelMedium(au), L.ModelMedium(au), 5e-9)
    assert L.gradient_pfa(a, L.MaterialAssignment(thin, au)) == pytest.approx(bulk, rel=1e-6)


# ---------------------------------------------------------------------------
# reduction curves


def test_reduction_identical_is_zero(au):
    mats = L.MaterialAssignment(au, au)
    red = L.reduction_curve([80e-9, 100e-9, 120e-9], mats, mats)
    assert np.all(red.delta == 0.0)
    assert red.window_mean == 0.0


def test_reduction_clone_with_sphere_swapped(au):
    clone = DrudeLorentzModel(au.omega_p, au.tau_D, au.oscillators, name="clone")
    red = L.reduction_curve(
        [80e-9, 100e-9, 120e-9], L.MaterialAssignment(au, clone), L.MaterialAssignment(clone, au)
    )
    assert np.all(red.delta == 0.0)


def test_window_mean_uniform_grid():
    a = np.linspace(80e-9, 120e-9, 5)
    assert L.window_mean(a, [1, 2, 3, 4, 5]) == pytest.approx(3.0)
    assert L.window_mean(np.array([60e-9, 100e-9, 200e-9]), [9.0, 2.0, 9.0]) == 2.0
    with pytest.raises(ValueError):
        L.window_mean([10e-9, 20e-9], [1, 2])


def test_gradient_csv(tmp_path, au):
    res = L.gradient_curve([100e-9, 200e-9], L.MaterialAssignment(au, au))
    p = tmp_path / "g.csv"
    L.write_gradient_csv(res, p)
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["a_m", "dFda_N_per_m", "rel_err"]
    assert float(rows[1][1]) == res[0].value


def test_gradient_law_interpolates(au_law, au):
    for a in (33e-9, 97e-9, 410e-9):
        assert au_law(a) == pytest.approx(L.gradient_pfa(a, L.MaterialAssignment(au, au)), rel=1e-6)
    assert au_law.scaled(0.96)(100e-9) == pytest.approx(0.96 * au_law(100e-9), rel=1e-14)
    with pytest.raises(L.SeparationRangeError):
        au_law(5e-9)
