# tests/test_blowup_lab.py
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.core.blowup_lab import (
    CROSSING_RTOL,
    TRUNCATION_BUFFER,
    admissible_delta_interval,
    cascade_criterion,
    cascade_events,
    estimate_blowup_time,
    fit_blowup_time,
    fp_constants,
    kp_constants,
    make_constants,
    obukhov_flux,
    obukhov_powerlaw,
    obukhov_powerlaw_state,
    obukhov_single_mode_experiment,
    pick_constants,
    powerlaw_positivity_exponent_ok,
    seed_condition_state,
    verify_lemma_cascade,
)
from app.core.errors import ContractViolationError, NoEstimateError, UnsupportedKindError
from app.core.integrator import IntegratorConfig, Termination, integrate, integrate_system
from app.core.shell_core import ModelKind, ModelParams, ShellState, Viscosity, rhs

EPSILON_GRID = (0.1, 0.3, 0.5, 0.65, 0.67, 0.7)


def test_pick_constants_reference_case():
    """λ=μ=2, α=1, δ=1 で q=1/2、ρ は ((λ²q)^{-1/2}, 1) の中点。"""
    c = pick_constants(2.0, 2.0, 1.0, 1.0)
    assert c.q == pytest.approx(0.5)
    assert c.rho == pytest.approx(0.5 * (1.0 / math.sqrt(2.0) + 1.0))
    assert c.valid_req and c.valid_bucond and c.valid


def test_pick_constants_empty_interval_is_not_an_error():
    """λ²q <= 1 なら ρ の区間は空で、例外ではなく valid_req = False。"""
    c = pick_constants(2.0, 2.0, 1.0, 0.0)
    assert c.q == pytest.approx(0.25)
    assert math.isnan(c.rho)
    assert not c.valid_req
    assert not c.valid


@given(st.floats(min_value=1.01, max_value=8.0), st.floats(min_value=1.01, max_value=8.0),
       st.floats(min_value=0.05, max_value=3.0), st.floats(min_value=0.01, max_value=0.99),
       st.floats(min_value=0.01, max_value=0.99))
@settings(max_examples=100, deadline=None)
def test_constant_flags_match_direct_inequalities(lam, mu, alpha, q, rho):
    """valid_req は λρ√q > 1、valid_bucond は μ^{2α} q > 1 と一致すること。"""
    c = make_constants(lam, mu, alpha, q, rho)
    assert c.valid_req == (lam * rho * math.sqrt(q) > 1.0)
    assert c.valid_bucond == (mu ** (2.0 * alpha) * q > 1.0)


@given(st.floats(min_value=1.01, max_value=8.0), st.floats(min_value=1.01, max_value=8.0),
       st.floats(min_value=0.05, max_value=3.0), st.floats(min_value=-2.0, max_value=8.0))
@settings(max_examples=200, deadline=None)
def test_valid_flags_imply_unit_interval_constants(lam, mu, alpha, delta):
    """どちらかの判定フラグが立つなら 0 < q < 1、valid_req なら 0 < ρ < 1 でもある。"""
    c = pick_constants(lam, mu, alpha, delta)
    if c.valid_bucond or c.valid_req:
        assert 0.0 < c.q < 1.0
    if c.valid_req:
        assert 0.0 < c.rho < 1.0


def test_bucond_is_rejected_when_q_not_below_one():
    """δ > 2α では q = μ^{-2α+δ} >= 1 となり、μ^{2α} q > 1 でも爆発条件は不成立。"""
    c = pick_constants(2.0, 2.0, 1.0, 3.0)
    assert c.q == pytest.approx(2.0)
    assert not c.valid_bucond
    assert not c.valid
    assert not make_constants(2.0, 2.0, 1.0, 1.0, 0.9).valid_bucond


@given(st.floats(min_value=1.2, max_value=6.0), st.floats(min_value=0.1, max_value=3.0))
@settings(max_examples=60, deadline=None)
def test_delta_inside_admissible_interval_gives_valid_constants(lam, alpha):
    """μ = λ で δ を許容区間の中点に取れば、選ばれた定数は両条件を満たす。"""
    lo, hi = admissible_delta_interval(lam, lam, alpha)
    assert lo == pytest.approx(max(0.0, 2.0 * alpha - 2.0))
    assert hi == pytest.approx(2.0 * alpha)
    c = pick_constants(lam, lam, alpha, 0.5 * (lo + hi))
    assert c.valid


def test_admissible_delta_interval_for_mu_two():
    """μ = 2, λ = 2^r では (max{0, 2α - 2r}, 2α)。"""
    lo, hi = admissible_delta_interval(2.0 ** 2.5, 2.0, 2.0)
    assert lo == pytest.approx(0.0)
    assert hi == pytest.approx(4.0)
    lo, hi = admissible_delta_interval(2.0 ** 0.5, 2.0, 1.0)
    assert lo == pytest.approx(1.0)
    assert hi == pytest.approx(2.0)


def test_fp_constants_table():
    """FP の (q, ρ) = (2^{-3-ε}, 2^{-ε}) は 0 < ε < 2/3 でのみ有効。"""
    flags = [fp_constants(eps).valid for eps in EPSILON_GRID]
    assert flags == [True, True, True, True, False, False]
    c = fp_constants(0.5)
    assert c.lambda_ == pytest.approx(2.0 ** 2.5)
    assert c.alpha == pytest.approx(2.0)
    assert c.q == pytest.approx(2.0 ** -3.5)
    assert c.rho == pytest.approx(2.0 ** -0.5)


def test_kp_constants_table():
    """KP の q = ρ = 2^{-ε} も 0 < ε < 2/3 でのみ有効。"""
    flags = [kp_constants(eps).valid for eps in EPSILON_GRID]
    assert flags == [True, True, True, True, False, False]


def test_seed_condition_state():
    params = ModelParams.create(ModelKind.GENERIC_CHAIN, 8)
    state = seed_condition_state(params, 3, 0.5, energy=1.0)
    assert state.amplitude(3) == pytest.approx(1.0)
    state = seed_condition_state(params, 3, 0.5, energy=0.01)
    assert state.amplitude(3) ** 2 == pytest.approx(0.125)
    assert np.count_nonzero(state.a) == 1


def test_cascade_events_cover_every_shell_below_the_buffer(demo_run):
    controller, _, _ = demo_run
    events = cascade_events(controller.params, controller.constants, 0)
    assert [e.shell for e in events] == list(range(0, 35))
    assert events[10].threshold == controller.constants.q ** 10


def test_lemma_cascade_witness(demo_run):
    """
    λ=μ=2, α=1, δ=1 の基準実行で、報告された下限 J から 10 段以上が解決し、
    各段の t_k - t_{k-1} <= ρ^{J+k-1} と累積境界を満たすこと。
    """
    controller, _, analysis = demo_run
    report = analysis.report
    assert analysis.floor is not None
    assert report.J == analysis.floor
    assert report.depth >= 10
    assert report.all_satisfied
    previous = report.seed_time
    rho, J = controller.constants.rho, report.J
    for entry in report.resolved:
        assert entry.t_k >= previous
        assert entry.t_k - previous <= rho ** (J + entry.k - 1) * (1.0 + CROSSING_RTOL)
        assert entry.t_k - report.seed_time <= report.cumulative_bound(entry.k) * (1.0 + CROSSING_RTOL)
        previous = entry.t_k


def test_norm_divergence_certificate(demo_run):
    """
    解決済みの各 t_k で ||a||^2_{H^α} >= μ^{2α(J+k)} q^{J+k}、
    t_k <= t_J + ρ^J (1 - ρ^k)/(1 - ρ)、推定 t* はその k → ∞ の極限以下。
    """
    controller, _, analysis = demo_run
    report = analysis.report
    assert len(analysis.certificate) == report.depth
    for k, t_k, bound, measured in analysis.certificate:
        assert measured >= bound * (1.0 - 1e-12)
        assert t_k <= report.seed_time + report.cumulative_bound(k) * (1.0 + CROSSING_RTOL)
    rho = controller.constants.rho
    assert analysis.fit is not None, analysis.fit_error
    upper = report.seed_time + rho ** report.J / (1.0 - rho)
    assert analysis.fit.t_star <= upper + 1e-6


def test_estimate_blowup_time_beyond_last_sample(demo_run):
    _, trajectory, _ = demo_run
    fit = estimate_blowup_time(trajectory, 1.0, 2.0)
    assert fit.t_star > fit.window[1]
    assert fit.n_points >= 4


def test_unresolved_levels_are_reported_not_invented():
    """横断前に終わった軌道では段は未解決のままで、時刻を作らない。"""
    params = ModelParams.create(ModelKind.GENERIC_CHAIN, 12, lambda_=2.0)
    trajectory = integrate(params, ShellState.single_shell(params, 0, 1.0), IntegratorConfig(t_end=0.01))
    report = verify_lemma_cascade(trajectory, pick_constants(2.0, 2.0, 1.0, 1.0), 0)
    assert report.seed_time == 0.0
    assert report.max_k == 6
    assert report.J + report.max_k == 12 - 1 - TRUNCATION_BUFFER
    assert report.depth == 0
    assert all(e.t_k is None and e.satisfied is None for e in report.entries)
    with pytest.raises(ContractViolationError):
        verify_lemma_cascade(trajectory, pick_constants(2.0, 2.0, 1.0, 1.0), 12)


def test_fit_recovers_manufactured_blowup_time():
    """‖a‖ = 3 (1 - t)^{-1/2} から t* = 1, γ = 1/2 を復元する。"""
    gaps = np.geomspace(1.0, 1e-5, 200)
    times = 1.0 - gaps
    norms = 3.0 * gaps ** -0.5
    fit = fit_blowup_time(times, norms)
    assert fit.t_star == pytest.approx(1.0, abs=1e-6)
    assert fit.gamma == pytest.approx(0.5, rel=1e-4)
    assert fit.rms_residual < 1e-6


@pytest.mark.parametrize("gamma", [0.5, 1.0, 1.5, 2.0, 3.0])
def test_fit_recovers_blowup_time_across_exponents(gamma):
    """‖a‖ = 2 (0.7 - t)^{-γ} から γ ∈ [0.5, 3] にわたって t* = 0.7 を復元する。"""
    gaps = np.geomspace(0.7, 1e-6, 300)
    fit = fit_blowup_time(0.7 - gaps, 2.0 * gaps ** -gamma)
    assert fit.t_star == pytest.approx(0.7, abs=1e-6)
    assert fit.gamma == pytest.approx(gamma, rel=1e-4)


def test_estimate_blowup_time_on_slope_equation():
    """dζ/dt = -ζ², ζ(0) = -1 の軌道から t* = 1 を 1e-3 以内で推定する。"""
    trajectory = integrate_system(lambda t, z: -z * z, 0.0, [-1.0], IntegratorConfig(t_end=2.0, stop_norm=1e6))
    assert trajectory.termination is Termination.BLOWUP_STOP
    fit = estimate_blowup_time(trajectory, 1.0, 2.0)
    assert fit.t_star == pytest.approx(1.0, abs=1e-3)
    assert fit.gamma == pytest.approx(1.0, abs=1e-2)


def test_fit_requires_enough_growth():
    times = np.linspace(0.0, 1.0, 50)
    with pytest.raises(NoEstimateError):
        fit_blowup_time(times, 1.0 + 0.01 * times)
    with pytest.raises(NoEstimateError):
        fit_blowup_time(times[:3], [1.0, 10.0, 100.0])


def test_obukhov_powerlaw_flux_is_shell_independent():
    """べき乗則状態のフラックスは内部シェルで 𝓔 に等しい。"""
    params = ModelParams.create(ModelKind.OBUKHOV, 20)
    state = obukhov_powerlaw_state(params, 2.5)
    assert state.amplitude(0) == pytest.approx(obukhov_powerlaw(2.0, 2.5, 0))
    assert obukhov_powerlaw(2.0, 1.0, 0) == pytest.approx(2.0 ** (-2.0 / 9.0))
    for j in range(1, 20):
        assert obukhov_flux(params, state, j) == pytest.approx(2.5, rel=1e-10)


def test_obukhov_flux_matches_tail_energy_balance():
    """𝓔(j) = Σ_{l>=j} a_l da_l/dt（粘性込み）。"""
    params = ModelParams.create(ModelKind.OBUKHOV, 8, viscosity=Viscosity(nu=1e-3))
    a = np.random.default_rng(11).uniform(-1.0, 1.0, 8)
    state = ShellState(0.0, a)
    du = rhs(params, state)
    for j in range(1, 8):
        assert obukhov_flux(params, state, j) == pytest.approx(float(np.dot(a[j:], du[j:])), rel=1e-9, abs=1e-10)


def test_obukhov_operations_reject_chain_kinds():
    params = ModelParams.create(ModelKind.GENERIC_CHAIN, 4)
    with pytest.raises(UnsupportedKindError):
        obukhov_flux(params, ShellState.zeros(params), 1)
    with pytest.raises(UnsupportedKindError):
        cascade_criterion(params, ShellState.zeros(params), 1)


def test_cascade_criterion_local_reynolds_number():
    """λ^{l+1} a_l > ν_{l+1} のときだけカスケードが進む。"""
    params = ModelParams.create(ModelKind.OBUKHOV, 4, viscosity=Viscosity(nu=1.0, exponent=2.0))
    assert not cascade_criterion(params, ShellState.single_shell(params, 0, 1.0), 0)
    assert cascade_criterion(params, ShellState.single_shell(params, 0, 3.0), 0)


def test_powerlaw_positivity_exponent_flips_at_minus_one_third():
    assert powerlaw_positivity_exponent_ok(-1.0 / 3.0)
    assert not powerlaw_positivity_exponent_ok(-1.0 / 3.0 + 1e-9)
    assert powerlaw_positivity_exponent_ok(-0.5)
    assert not powerlaw_positivity_exponent_ok(0.0)


def test_obukhov_single_mode_sends_energy_to_larger_scales():
    """単一シェル励起ではエネルギーは下のシェルへ移り、振幅は負になりうる。"""
    params = ModelParams.create(ModelKind.OBUKHOV, 10)
    experiment = obukhov_single_mode_experiment(params, 4, 1.0, 0.5)
    assert experiment.energy_above == 0.0
    assert experiment.energy_below > 0.0
    assert experiment.min_amplitude < 0.0
    final = experiment.trajectory.final_state.a
    assert float(np.dot(final, final)) == pytest.approx(1.0, rel=1e-8)
    assert len(experiment.signed_energy) == 10
