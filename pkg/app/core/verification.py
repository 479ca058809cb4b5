import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from app.core.blowup_lab import fp_constants, obukhov_flux, obukhov_powerlaw_state, powerlaw_positivity_exponent_ok
from app.core.burgers_oracle import canonical_profile, dyadic_projection_check, shock_time
from app.core.integrator import IntegratorConfig, integrate, tail_energy_series
from app.core.shell_core import KP_LAMBDA, ModelKind, ModelParams, ShellState, rhs

FP_EPSILON_GRID = (0.1, 0.3, 0.5, 0.65, 0.67, 0.7)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    value: Optional[float] = None


def check_dyadic_projection(m_max: int = 10) -> CheckResult:
    levels = dyadic_projection_check(m_max)
    bad = [lv.m for lv in levels if lv.m >= 1 and not lv.ok]
    return CheckResult("dyadic_projection", not bad,
                       f"m=1..{m_max}: " + ("pattern a_{j-1}^2 - 2 a_j a_{j+1} reproduced" if not bad
                                            else f"mismatch at m={bad}"))


def check_obukhov_fixed_point(n_shells: int = 24, flux: float = 1.0) -> CheckResult:
    """べき乗則状態が内部シェルで非粘性 RHS の零点となり、フラックスが j に依らないこと。"""
    params = ModelParams.create(ModelKind.OBUKHOV, n_shells)
    state = obukhov_powerlaw_state(params, flux)
    du = rhs(params, state)
    scale = params.time_factor * params.wavenumbers * state.a ** 2
    residual = float(np.max(np.abs(du[1:-1]) / scale[1:-1]))
    fluxes = np.array([obukhov_flux(params, state, int(j)) for j in params.shell_indices[1:-1]])
    spread = float(np.max(np.abs(fluxes - flux)) / flux)
    flips = powerlaw_positivity_exponent_ok(-1.0 / 3.0) and not powerlaw_positivity_exponent_ok(-1.0 / 3.0 + 1e-9)
    passed = residual <= 1e-12 and spread <= 1e-10 and flips
    return CheckResult("obukhov_fixed_point", passed,
                       f"residual={residual:.2e}, flux spread={spread:.2e}, beta flip at -1/3: {flips}")


def check_fp_constants() -> CheckResult:
    flags = [fp_constants(eps).valid for eps in FP_EPSILON_GRID]
    expected = [0.0 < eps < 2.0 / 3.0 for eps in FP_EPSILON_GRID]
    table = ", ".join(f"{eps}:{'T' if v else 'F'}" for eps, v in zip(FP_EPSILON_GRID, flags))
    return CheckResult("fp_constants_table", flags == expected, table)


def positivity_trajectory(rng: np.random.Generator, kind: ModelKind):
    """乱数の非負初期値からの軌道（λ=2 は 12 シェルで t=1 まで、λ=2^{5/2} は 8 シェルで t=0.05 まで）。"""
    if kind is ModelKind.FRIEDLANDER_PAVLOVIC:
        params, t_end = ModelParams.create(kind, 8), 0.05
    else:
        params, t_end = ModelParams.create(kind, 12), 1.0
    a = rng.uniform(0.0, 1.0, params.n_shells)
    return integrate(params, ShellState(t=0.0, a=a), IntegratorConfig(t_end=t_end))


def check_positivity_sample(seed: int = 0, count: int = 100) -> CheckResult:
    """乱数の非負初期値から、振幅の非負性とテールエネルギーの単調性を確認します。"""
    rng = np.random.default_rng(seed)
    worst_amp = math.inf
    worst_tail = 0.0
    for n in range(count):
        kind = ModelKind.GENERIC_CHAIN if n % 2 == 0 else ModelKind.FRIEDLANDER_PAVLOVIC
        trajectory = positivity_trajectory(rng, kind)
        worst_amp = min(worst_amp, float(np.min(trajectory.amplitudes)))
        tails = tail_energy_series(trajectory)
        worst_tail = max(worst_tail, float(np.max(-np.diff(tails, axis=0), initial=0.0)))
    passed = worst_amp >= -1e-11 and worst_tail <= 1e-9
    return CheckResult("positivity_sample", passed,
                       f"seed={seed}, states={count}, min amplitude={worst_amp:.2e}, "
                       f"max tail decrease={worst_tail:.2e}")


def check_kp_equivalence(n_shells: int = 20, fraction: float = 0.8) -> CheckResult:
    """
    KP チェーンの時刻 8t の状態が λ=2 の汎用チェーンの時刻 t と一致すること。
    比較は汎用チェーンが先端到達で停止した時刻の fraction 倍までです。
    """
    generic = ModelParams.create(ModelKind.GENERIC_CHAIN, n_shells, lambda_=KP_LAMBDA)
    kp = ModelParams.create(ModelKind.KATZ_PAVLOVIC_CHAIN, n_shells)
    a = np.zeros(n_shells)
    a[0] = 1.0
    tight = dict(rel_tol=1e-12, abs_tol=1e-14)
    g = integrate(generic, ShellState(t=0.0, a=a),
                  IntegratorConfig(t_end=10.0, stop_tail_fraction=1e-12, **tight))
    t_end = fraction * g.t_final
    k = integrate(kp, ShellState(t=0.0, a=a), IntegratorConfig(t_end=8.0 * t_end, **tight))
    worst = 0.0
    for t in np.linspace(0.0, min(t_end, k.t_final / 8.0), 11):
        ga, ka = g.values_at(t), k.values_at(8.0 * t)
        worst = max(worst, float(np.max(np.abs(ga - ka)) / max(np.max(np.abs(ga)), 1e-300)))
    return CheckResult("kp_equivalence", worst <= 1e-6, f"max relative difference={worst:.2e}", value=worst)


def check_canonical_shock_time() -> CheckResult:
    result = shock_time(canonical_profile())
    ok = abs(result.t_star - 1.0) <= 1e-8 and result.eta0 is not None and abs(result.eta0) <= 1e-8
    return CheckResult("canonical_shock_time", ok, f"t*={result.t_star!r}, eta0={result.eta0!r}")


def run_checks(seed: int = 0, names: Optional[List[str]] = None) -> List[CheckResult]:
    """
    組み込みの検証スイートを実行します。

    Args:
        seed (int): 乱数を使うスイートのシード。
        names (Optional[List[str]]): 実行するスイート名（None なら全部）。
    """
    suites: List[tuple] = [
        ("dyadic_projection", check_dyadic_projection),
        ("obukhov_fixed_point", check_obukhov_fixed_point),
        ("fp_constants_table", check_fp_constants),
        ("positivity_sample", lambda: check_positivity_sample(seed)),
        ("kp_equivalence", check_kp_equivalence),
        ("canonical_shock_time", check_canonical_shock_time),
    ]
    results = []
    for name, suite in suites:
        if names and name not in names:
            continue
        result = suite()
        log = logging.info if result.passed else logging.error
        log(f"check {name}: {'PASS' if result.passed else 'FAIL'} ({result.detail})")
        results.append(result)
    return results
