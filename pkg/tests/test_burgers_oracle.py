# tests/test_burgers_oracle.py
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.core.burgers_oracle import (
    BurgersProfile,
    QuadratureOptions,
    SpectralField,
    airy_ai0,
    airy_ai0_integral,
    airy_ai0_reference,
    canonical_profile,
    characteristics_solution,
    classify_divergence,
    continuum_sobolev_norm_sq,
    distinct_powers_never_sum_to_power,
    dyadic_projection_check,
    field_at,
    fourier_coefficient,
    fourier_decay_exponent,
    galerkin_energy,
    galerkin_integrate,
    galerkin_rhs_values,
    linear_core_profile,
    max_slope,
    shock_time,
    sine_profile,
    slope_rhs,
    slope_solution,
    stationary_phase_asymptote,
)
from app.core.errors import DegeneratePhaseError, DivisionDomainError, NoEstimateError
from app.core.integrator import IntegratorConfig, Termination, integrate_system
from app.core.verification import check_kp_equivalence

AI0 = 0.3550280538878172


def _shifted_pair_profile() -> BurgersProfile:
    def f(x):
        x = np.asarray(x, dtype=float)
        return -(x - 3.0) * np.exp(-(x - 3.0) ** 2) - (x + 3.0) * np.exp(-(x + 3.0) ** 2)

    return BurgersProfile.from_callable("shifted_pair", f)


def test_canonical_shock_time():
    """f(η) = -η e^{-η²} で t* = 1, η0 = 0（1e-8 以内）。"""
    result = shock_time(canonical_profile())
    assert result.has_shock
    assert result.t_star == pytest.approx(1.0, abs=1e-8)
    assert abs(result.eta0) <= 1e-8
    assert result.ties == ()


def test_linear_core_shock_time():
    """原点近傍で f(η) = -η なら t* = 1。"""
    result = shock_time(linear_core_profile(1.0))
    assert result.t_star == pytest.approx(1.0, abs=1e-6)
    assert abs(result.eta0) <= 1.01


def test_increasing_profile_has_no_shock():
    """f' >= 0 なら例外ではなく衝撃波なしの結果を返す。"""
    result = shock_time(BurgersProfile.from_callable("arctan", np.arctan))
    assert not result.has_shock
    assert result.eta0 is None
    with pytest.raises(DegeneratePhaseError):
        stationary_phase_asymptote(BurgersProfile.from_callable("arctan", np.arctan), 10.0, 1.0)


def test_competing_minima_are_reported_as_ties():
    """同じ深さの極小が 2 つあれば、選ばなかった方を ties に残す。"""
    result = shock_time(_shifted_pair_profile())
    assert result.t_star == pytest.approx(1.0, abs=1e-6)
    assert len(result.ties) == 1
    assert {round(result.eta0), round(result.ties[0])} == {-3, 3}


def test_characteristics_solution_before_shock():
    profile = canonical_profile()
    assert characteristics_solution(profile, 0.4, 0.0) == [pytest.approx(-0.4 * math.exp(-0.16))]
    values = characteristics_solution(profile, 0.3, 0.5)
    assert len(values) == 1
    u = values[0]
    # u = f(x - t u)
    assert float(profile.f(np.array(0.3 - 0.5 * u))) == pytest.approx(u, abs=1e-12)
    assert characteristics_solution(linear_core_profile(1.0), 0.0, 0.5) == [pytest.approx(0.0, abs=1e-12)]
    with pytest.raises(ValueError):
        characteristics_solution(profile, 0.0, -1.0)


def test_characteristics_solution_near_shock_time():
    """t = 0.99 でも x = 0.001 を通る特性曲線は一本で、Newton 法の解と一致する。"""
    values = characteristics_solution(canonical_profile(), 0.001, 0.99)
    assert len(values) == 1
    eta = 0.1
    for _ in range(50):
        g = eta - 0.99 * eta * math.exp(-eta * eta) - 0.001
        dg = 1.0 + 0.99 * (2.0 * eta * eta - 1.0) * math.exp(-eta * eta)
        eta -= g / dg
    assert values[0] == pytest.approx(-eta * math.exp(-eta * eta), abs=1e-12)


def test_characteristics_solution_is_multivalued_after_shock():
    """t = 2 > t* では x = 0 に 3 本の特性曲線（η = 0, ±√ln2）が届く。"""
    values = characteristics_solution(canonical_profile(), 0.0, 2.0)
    assert len(values) == 3
    eta = math.sqrt(math.log(2.0))
    expected = sorted([-eta * math.exp(-eta * eta) * s for s in (-1.0, 0.0, 1.0)], reverse=True)
    assert values == [pytest.approx(v, abs=1e-10) for v in expected]


def test_slope_blows_up_at_shock_time():
    """dζ/dt = -ζ², ζ(0) = f'(0) = -1 は t = 1 で発散する。"""
    assert slope_solution(-1.0, 0.5) == pytest.approx(-2.0)
    trajectory = integrate_system(slope_rhs, 0.0, [-1.0], IntegratorConfig(t_end=2.0, stop_norm=1e6))
    assert trajectory.termination is Termination.BLOWUP_STOP
    assert trajectory.values_at(0.5)[0] == pytest.approx(-2.0, rel=1e-6)
    assert 1.0 - 2e-6 <= trajectory.t_final <= 1.0
    assert max_slope(canonical_profile(), 0.9) == pytest.approx(10.0, rel=1e-9)


def test_airy_constant_cross_checks():
    """Ai(0) = 3^{-2/3}/Γ(2/3) を余弦積分と scipy.special.airy で確認。"""
    assert airy_ai0() == pytest.approx(AI0, rel=1e-14)
    assert airy_ai0_reference() == pytest.approx(airy_ai0(), rel=1e-12)
    assert airy_ai0_integral() == pytest.approx(airy_ai0(), rel=1e-6)


def test_fourier_coefficient_at_initial_time():
    """t = 0 では û(k,0) = i k e^{-k²/4} / (4√π)。"""
    profile = canonical_profile()
    for k in (0.5, 1.0, 3.0):
        value = fourier_coefficient(profile, k, 0.0)
        expected = 1j * k * math.exp(-k * k / 4.0) / (4.0 * math.sqrt(math.pi))
        assert value.real == pytest.approx(0.0, abs=1e-12)
        assert value.imag == pytest.approx(expected.imag, rel=1e-7)


def test_fourier_coefficient_rejects_zero_wavenumber():
    with pytest.raises(DivisionDomainError):
        fourier_coefficient(canonical_profile(), 0.0, 1.0)


@pytest.mark.parametrize("k,t", [(3.0, 0.5), (50.0, 1.0)])
def test_fourier_coefficient_reality_condition(k, t):
    """実数値の u では û(-k) = conj(û(k))、奇関数のプロファイルでは û は純虚数。"""
    profile = canonical_profile()
    value = fourier_coefficient(profile, k, t)
    mirrored = fourier_coefficient(profile, -k, t)
    assert abs(mirrored - value.conjugate()) <= 1e-12 * abs(value)
    assert abs(value.real) <= 1e-8 * abs(value)


@pytest.mark.parametrize("k,t", [(5.0, 0.5), (50.0, 1.0)])
def test_fourier_coefficient_stable_under_panel_doubling(k, t):
    """より厳しい許容誤差（パネル数の追加倍増）でも値の変化は既定の許容誤差以内。"""
    profile = canonical_profile()
    value = fourier_coefficient(profile, k, t)
    strict = replace(profile, quadrature=QuadratureOptions(rtol=1e-11, max_doublings=8))
    refined = fourier_coefficient(strict, k, t)
    assert abs(refined - value) <= profile.quadrature.rtol * abs(refined)


def test_max_gradient_grows_like_inverse_time_to_shock():
    """特性曲線解から求めた max_x |∂u/∂x| は t ∈ [0.8, 0.99] で (t* - t)^{-1} に従う。"""
    profile = canonical_profile()
    step = 1e-6
    gaps = np.geomspace(0.2, 0.01, 8)
    gradients = []
    for gap in gaps:
        t = 1.0 - gap
        slopes = [(characteristics_solution(profile, x + step, t)[0]
                   - characteristics_solution(profile, x - step, t)[0]) / (2.0 * step)
                  for x in np.linspace(-0.05, 0.05, 11)]
        gradients.append(max(abs(s) for s in slopes))
    exponent, _ = np.polyfit(np.log(gaps), np.log(gradients), 1)
    assert exponent == pytest.approx(-1.0, abs=0.05)
    assert gradients[-1] == pytest.approx(100.0, rel=1e-3)


def test_kp_chain_matches_rescaled_dyadic_burgers():
    """KP チェーンの時刻 8t と λ = 2 の汎用チェーンの時刻 t の状態が相対 1e-9 以内で一致する。"""
    result = check_kp_equivalence()
    assert result.passed, result.detail
    assert result.value is not None
    assert result.value <= 1e-9


@pytest.mark.parametrize("k", [50.0, 100.0, 200.0])
def test_fourier_coefficient_matches_stationary_phase(k):
    """|û(k,1)| と 3^{-1/3} Ai(0) k^{-4/3} の差が 10% 以内。"""
    profile = canonical_profile()
    expected = 3.0 ** (-1.0 / 3.0) * AI0 * k ** (-4.0 / 3.0)
    assert abs(fourier_coefficient(profile, k, 1.0)) == pytest.approx(expected, rel=0.1)
    asymptote = stationary_phase_asymptote(profile, k, 1.0)
    assert abs(asymptote) == pytest.approx(expected, rel=1e-10)
    assert asymptote.imag == pytest.approx(expected, rel=1e-6)


def test_fourier_decay_exponent_at_shock_time():
    """k ∈ [50, 500] の両対数フィットで減衰指数は -4/3 ± 0.05。"""
    slope = fourier_decay_exponent(canonical_profile(), np.geomspace(50.0, 500.0, 6), 1.0)
    assert slope == pytest.approx(-4.0 / 3.0, abs=0.05)
    with pytest.raises(NoEstimateError):
        fourier_decay_exponent(canonical_profile(), [50.0, 100.0], 1.0)


def test_degenerate_phase_is_rejected():
    """f'''(η0) = 0 の非一般的な初期条件では停留位相近似を作らない。"""
    def zero(x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def f(x):
        return -np.asarray(x, dtype=float)

    def df(x):
        return -np.ones_like(np.asarray(x, dtype=float))

    profile = BurgersProfile(name="linear", f=f, df=df, d2f=zero, d3f=zero)
    with pytest.raises(DegeneratePhaseError):
        stationary_phase_asymptote(profile, 10.0, 1.0, eta0=0.0)


def test_classify_divergence_thresholds():
    """p = 4/3 は α >= 5/6、p = 1 は α >= 1/2 で発散。"""
    assert classify_divergence(5.0 / 6.0, 4.0 / 3.0)
    assert not classify_divergence(0.83, 4.0 / 3.0)
    assert classify_divergence(1.0, 4.0 / 3.0)
    assert classify_divergence(0.5, 1.0)
    assert not classify_divergence(0.49, 1.0)


@given(st.floats(min_value=0.01, max_value=3.0), st.floats(min_value=0.6, max_value=3.0))
@settings(max_examples=100, deadline=None)
def test_classify_divergence_matches_inequality(alpha, p):
    if abs(2.0 * alpha - (2.0 * p - 1.0)) > 1e-9:
        assert classify_divergence(alpha, p) == (2.0 * alpha >= 2.0 * p - 1.0)


def test_continuum_norm_on_manufactured_spectrum():
    ks = np.geomspace(1.0, 1e4, 200)
    result = continuum_sobolev_norm_sq(ks, ks ** (-4.0 / 3.0), 1.0)
    assert result.decay_exponent == pytest.approx(4.0 / 3.0, rel=1e-9)
    assert result.divergent
    assert result.value > 0.0
    assert result.k_max == pytest.approx(1e4)
    assert not continuum_sobolev_norm_sq(ks, ks ** (-4.0 / 3.0), 0.5).divergent
    with pytest.raises(NoEstimateError):
        continuum_sobolev_norm_sq([1.0, 2.0, 3.0], [1.0, 0.5, 0.3], 1.0)


def test_spectral_field_projection_of_sine():
    """f = -sin x の射影は v_1 = 1/2、他はゼロ。"""
    field_ = SpectralField.from_profile(sine_profile(1.0), 4)
    assert field_.modes.tolist() == pytest.approx([0.5, 0.0, 0.0, 0.0], abs=1e-14)
    x = np.linspace(-3.0, 3.0, 7)
    assert field_.evaluate(x) == pytest.approx(-np.sin(x), abs=1e-13)
    assert galerkin_energy(field_) == pytest.approx(0.25)


def test_galerkin_rhs_examples():
    """単一モード v_1 = 1 では dv_2/dt = k_2 v_1² = 2、dv_1/dt = 0。"""
    assert galerkin_rhs_values(0, np.array([1.0, 0.0, 0.0])).tolist() == [0.0, 2.0, 0.0]
    assert galerkin_rhs_values(0, np.zeros(5)).tolist() == [0.0] * 5
    assert galerkin_rhs_values(0, np.array([1.0, 0.5, 0.0, 0.0])).tolist() == pytest.approx([-1.0, 2.0, 3.0, 1.0])
    assert galerkin_rhs_values(1, np.array([1.0, 0.0])).tolist() == pytest.approx([0.0, 4.0])


def test_galerkin_matches_characteristics_before_shock():
    """Galerkin 系の時刻 t は特性曲線解の時刻 2t に一致する（衝撃波形成前）。"""
    profile = sine_profile(0.5)
    field_ = SpectralField.from_profile(profile, 64)
    trajectory = galerkin_integrate(field_, 0.25)
    assert trajectory.termination is Termination.REACHED_T_END
    final = field_at(trajectory, trajectory.t_final)
    assert galerkin_energy(final) == pytest.approx(galerkin_energy(field_), rel=1e-8)
    for x in (-2.0, -0.7, 0.4, 1.9):
        (u,) = characteristics_solution(profile, x, 0.5)
        assert float(final.evaluate(x)) == pytest.approx(u, abs=1e-6)


def test_dyadic_projection_identity():
    """l = 2^m の全三つ組列挙で a_{j-1}² - 2 a_j a_{j+1} の係数が m = 1..10 で再現される。"""
    levels = dyadic_projection_check(10)
    assert [lv.m for lv in levels] == list(range(11))
    for level in levels[1:]:
        assert level.ok
        assert level.coefficients == {(level.m - 1, level.m - 1): 1, (level.m, level.m + 1): -2}
    assert levels[0].coefficients == {(0, 1): -2}
    assert distinct_powers_never_sum_to_power(30)


def test_from_callable_derivatives_match_analytic():
    canonical = canonical_profile()
    numeric = BurgersProfile.from_callable("numeric", canonical.f)
    x = np.array([-0.7, 0.0, 0.3, 1.1])
    assert numeric.df(x) == pytest.approx(canonical.df(x), abs=1e-8)
    assert numeric.d2f(x) == pytest.approx(canonical.d2f(x), abs=1e-4)
    assert numeric.d3f(x) == pytest.approx(canonical.d3f(x), abs=5e-4)
