import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from app.core.errors import ContractViolationError, NoEstimateError, UnsupportedKindError
from app.core.integrator import (
    EventSpec,
    IntegratorConfig,
    Trajectory,
    crossing_times,
    integrate,
)
from app.core.shell_core import (
    FP_LAMBDA,
    KP_LAMBDA,
    ModelKind,
    ModelParams,
    ShellState,
    sobolev_norm_sq,
    sobolev_norm_sq_series,
)

# 打ち切り境界の影響を受けるシェル数
TRUNCATION_BUFFER = 5
CROSSING_RTOL = 1e-6
FIT_WINDOW_FRACTION = 0.6
FIT_EXCLUDE_LAST = 2
MIN_GROWTH_DECADES = 3.0


@dataclass(frozen=True)
class BlowupConstants:
    """
    補題の定数 (q, ρ) と爆発条件の判定結果です。

    Attributes:
        valid_req (bool): 0 < q, ρ < 1 かつ λ ρ √q > 1 が成り立つか。
        valid_bucond (bool): 0 < q < 1 かつ μ^{2α} q > 1 が成り立つか。
    """
    lambda_: float
    mu: float
    alpha: float
    delta: Optional[float]
    q: float
    rho: float
    valid_req: bool
    valid_bucond: bool

    @property
    def valid(self) -> bool:
        return self.valid_req and self.valid_bucond and 0.0 < self.q < 1.0 and 0.0 < self.rho < 1.0


def _req_holds(lambda_: float, q: float, rho: float) -> bool:
    if not (0.0 < q < 1.0 and 0.0 < rho < 1.0):
        return False
    return lambda_ * rho * math.sqrt(q) > 1.0


def _bucond_holds(mu: float, alpha: float, q: float) -> bool:
    if not 0.0 < q < 1.0:
        return False
    return mu ** (2.0 * alpha) * q > 1.0


def make_constants(lambda_: float, mu: float, alpha: float, q: float, rho: float,
                   delta: Optional[float] = None) -> BlowupConstants:
    """明示的に与えた (q, ρ) から定数と判定フラグを作ります。"""
    return BlowupConstants(lambda_=lambda_, mu=mu, alpha=alpha, delta=delta, q=q, rho=rho,
                           valid_req=_req_holds(lambda_, q, rho),
                           valid_bucond=_bucond_holds(mu, alpha, q))


def pick_constants(lambda_: float, mu: float, alpha: float, delta: float) -> BlowupConstants:
    """
    q = μ^{-2α+δ} とし、ρ を許容区間 ((λ^2 q)^{-1/2}, 1) の中点に取ります。
    区間が空の場合は例外ではなく valid_req = False を返します。
    """
    if not (lambda_ > 1.0 and mu > 1.0 and alpha > 0.0):
        raise ContractViolationError("pick_constants needs lambda > 1, mu > 1, alpha > 0")
    q = mu ** (-2.0 * alpha + delta)
    lower = 1.0 / math.sqrt(lambda_ * lambda_ * q)
    if lower < 1.0:
        rho = 0.5 * (lower + 1.0)
    else:
        rho = math.nan
        logging.debug(f"pick_constants: empty rho interval for q={q:.6g}")
    return make_constants(lambda_, mu, alpha, q, rho, delta=delta)


def fp_constants(epsilon: float) -> BlowupConstants:
    """FP 系の選び方 λ = 2^{5/2}, μ = 2, α = 3/2+ε, q = 2^{-3-ε}, ρ = 2^{-ε}。"""
    return make_constants(FP_LAMBDA, 2.0, 1.5 + epsilon, 2.0 ** (-3.0 - epsilon), 2.0 ** (-epsilon))


def kp_constants(epsilon: float) -> BlowupConstants:
    """KP 系の選び方 λ = 2, μ = 2, α = 3/2+ε, q = ρ = 2^{-ε}。"""
    return make_constants(KP_LAMBDA, 2.0, 1.5 + epsilon, 2.0 ** (-epsilon), 2.0 ** (-epsilon))


def admissible_delta_interval(lambda_: float, mu: float, alpha: float) -> Tuple[float, float]:
    """爆発が保証される δ の開区間 (max{0, 2α - 2 log_μ λ}, 2α)。"""
    r = math.log(lambda_) / math.log(mu)
    return max(0.0, 2.0 * alpha - 2.0 * r), 2.0 * alpha


@dataclass(frozen=True)
class CrossingEntry:
    k: int
    t_k: Optional[float]
    bound: float
    satisfied: Optional[bool]

    @property
    def resolved(self) -> bool:
        return self.t_k is not None


@dataclass(frozen=True)
class CrossingReport:
    """
    テールエネルギーしきい値の横断時刻列と、各段の ρ 境界の充足状況です。
    t_k は非減少です（先行して横断済みの段は t_k = t_{k-1}）。
    境界側の TRUNCATION_BUFFER 個のシェル j0 + N - 5 .. j0 + N - 1 は検証せず、
    最後に検証するシェルは J + max_k = j0 + N - 6 です。
    """
    J: int
    q: float
    rho: float
    seed_time: Optional[float]
    entries: Tuple[CrossingEntry, ...]
    max_k: int
    cumulative_ok: bool = True

    @property
    def resolved(self) -> List[CrossingEntry]:
        return [e for e in self.entries if e.resolved]

    @property
    def depth(self) -> int:
        return len(self.resolved)

    @property
    def all_satisfied(self) -> bool:
        return all(e.satisfied for e in self.resolved) and self.cumulative_ok

    def cumulative_bound(self, k: int) -> float:
        """ρ^J (1 - ρ^k) / (1 - ρ)。"""
        return self.rho ** self.J * (1.0 - self.rho ** k) / (1.0 - self.rho)


def cascade_thresholds(constants: BlowupConstants, J: int, last_k: int) -> List[Tuple[int, float]]:
    """(シェル, しきい値 q^{J+k}) のリスト（k = 0..last_k）。"""
    return [(J + k, constants.q ** (J + k)) for k in range(last_k + 1)]


def cascade_events(params: ModelParams, constants: BlowupConstants, J: int) -> Tuple[EventSpec, ...]:
    """verify_lemma_cascade が参照するしきい値イベント群を返します。"""
    last_k = params.last_shell - TRUNCATION_BUFFER - J
    return tuple(EventSpec(shell, theta, "up")
                 for shell, theta in cascade_thresholds(constants, J, max(last_k, 0)))


def verify_lemma_cascade(trajectory: Trajectory, constants: BlowupConstants, J: int) -> CrossingReport:
    """
    k = 1, 2, ... について t_k = E_B(J+k) >= q^{J+k} となる最初の時刻を求め、
    t_k - t_{k-1} <= ρ^{J+k-1} と累積境界を検証します。
    軌道が横断前に終了した段は未解決として残し、時刻を作りません。
    """
    j0 = trajectory.j0
    last_shell = j0 + trajectory.n_shells - 1
    if not j0 <= J <= last_shell:
        raise ContractViolationError(f"J={J} outside truncation [{j0}, {last_shell}]")
    if not constants.valid:
        logging.warning(f"verify_lemma_cascade: constants are not admissible "
                        f"(req={constants.valid_req}, bucond={constants.valid_bucond})")
    max_k = max(last_shell - TRUNCATION_BUFFER - J, 0)
    times = crossing_times(trajectory, cascade_thresholds(constants, J, max_k))
    seed_time = times[0]
    if seed_time is None:
        logging.warning(f"verify_lemma_cascade: seed condition E_B({J}) >= q^{J} never met")
    elif seed_time > trajectory.times[0]:
        logging.info(f"verify_lemma_cascade: seed condition met at t={seed_time:.12g} (not at t=0)")

    entries: List[CrossingEntry] = []
    previous = seed_time
    elapsed = 0.0
    cumulative_ok = True
    for k in range(1, max_k + 1):
        bound = constants.rho ** (J + k - 1)
        raw = times[k]
        if previous is None or raw is None:
            entries.append(CrossingEntry(k, None, bound, None))
            previous = None
            continue
        t_k = max(previous, raw)
        gap = t_k - previous
        satisfied = gap <= bound * (1.0 + CROSSING_RTOL)
        elapsed += gap
        allowed = constants.rho ** J * (1.0 - constants.rho ** k) / (1.0 - constants.rho)
        if elapsed > allowed * (1.0 + CROSSING_RTOL):
            cumulative_ok = False
        if not satisfied:
            logging.warning(f"verify_lemma_cascade: J={J}, k={k} gap {gap:.6g} exceeds bound {bound:.6g}")
        entries.append(CrossingEntry(k, t_k, bound, satisfied))
        previous = t_k

    unresolved = sum(1 for e in entries if not e.resolved)
    if unresolved:
        logging.warning(f"verify_lemma_cascade: {unresolved} of {len(entries)} levels unresolved")
    return CrossingReport(J=J, q=constants.q, rho=constants.rho, seed_time=seed_time,
                          entries=tuple(entries), max_k=max_k, cumulative_ok=cumulative_ok)


def cascade_floor(trajectory: Trajectory, constants: BlowupConstants,
                  candidates: Optional[Sequence[int]] = None) -> Tuple[Optional[int], Dict[int, CrossingReport]]:
    """
    全段の検証に合格する最小の J を返します（「十分大きな j」の実測下限）。
    下限未満の失敗は報告のみで、判定には使いません。
    """
    j0 = trajectory.j0
    last = j0 + trajectory.n_shells - 1 - TRUNCATION_BUFFER
    candidates = list(range(j0, last)) if candidates is None else list(candidates)
    reports: Dict[int, CrossingReport] = {}
    for J in candidates:
        report = verify_lemma_cascade(trajectory, constants, J)
        reports[J] = report
        if report.seed_time is not None and report.depth > 0 and report.all_satisfied:
            logging.info(f"cascade_floor: J={J} passes ({report.depth} resolved levels)")
            return J, reports
        logging.info(f"cascade_floor: J={J} below floor (depth={report.depth})")
    return None, reports


def seed_condition_state(params: ModelParams, J: int, q: float, energy: float = 1.0) -> ShellState:
    """シェル J に全エネルギーを置き、E_B(J)(0) = max(q^J, E) とした初期状態。"""
    target = max(q ** J, energy)
    return ShellState.single_shell(params, J, math.sqrt(target))


def norm_divergence_certificate(trajectory: Trajectory, constants: BlowupConstants,
                                report: CrossingReport) -> List[Tuple[int, float, float, float]]:
    """
    解決済みの各 t_k で (k, t_k, 下界 μ^{2α(J+k)} q^{J+k}, 実測 ||a||^2_{H^α}) を返します。
    """
    rows = []
    for entry in report.resolved:
        level = report.J + entry.k
        bound = (constants.mu ** (2.0 * constants.alpha) * constants.q) ** level
        measured = sobolev_norm_sq(trajectory.state_at(entry.t_k), constants.alpha, constants.mu)
        if measured < bound:
            logging.warning(f"norm certificate violated at k={entry.k}: {measured:.6g} < {bound:.6g}")
        rows.append((entry.k, entry.t_k, bound, measured))
    return rows


@dataclass(frozen=True)
class BlowupFit:
    """‖a‖ ≈ C (t* - t)^{-γ} のフィット結果。"""
    t_star: float
    gamma: float
    log_prefactor: float
    rms_residual: float
    window: Tuple[float, float]
    n_points: int
    residuals: np.ndarray = field(repr=False, compare=False)


def _fit_for(t_star: float, t: np.ndarray, y: np.ndarray) -> Tuple[float, float, float, np.ndarray]:
    x = -np.log(t_star - t)
    design = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return float(np.sum(resid ** 2)), float(coef[0]), float(coef[1]), resid


def fit_blowup_time(times: Sequence[float], norms: Sequence[float],
                    window_fraction: float = FIT_WINDOW_FRACTION,
                    exclude_last: int = FIT_EXCLUDE_LAST,
                    min_decades: float = MIN_GROWTH_DECADES) -> BlowupFit:
    """
    log‖a‖ を -γ log(t* - t) に最小二乗フィットして t* を推定します。
    成長の最後の window_fraction（対数成長量で測る）を使い、末尾 exclude_last 点は除外します。

    Raises:
        NoEstimateError: 成長が min_decades 桁（ノルム二乗で測る）に満たない場合。
    """
    t = np.asarray(times, dtype=float)
    norms = np.asarray(norms, dtype=float)
    keep = np.isfinite(norms) & (norms > 0.0)
    t, norms = t[keep], norms[keep]
    if t.size < 5:
        raise NoEstimateError("too few samples for a blow-up fit")
    # 飽和後（打ち切りで頭打ち）を除外
    peak = int(np.argmax(norms))
    t, norms = t[:peak + 1], norms[:peak + 1]
    y = np.log(norms)
    growth_decades = 2.0 * (y[-1] - y[0]) / math.log(10.0)
    if growth_decades < min_decades:
        raise NoEstimateError(f"only {growth_decades:.2f} decades of growth (need {min_decades})")
    if exclude_last > 0 and t.size > exclude_last + 5:
        t, y = t[:-exclude_last], y[:-exclude_last]
    start_level = y[-1] - window_fraction * (y[-1] - y[0])
    window = np.nonzero(y >= start_level)[0]
    first = int(window[0]) if window.size else 0
    t_win, y_win = t[first:], y[first:]
    if t_win.size < 4:
        raise NoEstimateError("fit window holds fewer than 4 samples")

    t_last = float(t_win[-1])
    span = max(t_last - float(t_win[0]), 1e-300)
    floor = max(1e-14 * max(1.0, abs(t_last)), 1e-300)
    offsets = np.geomspace(floor, 10.0 * span, 400)
    scores = [_fit_for(t_last + d, t_win, y_win)[0] for d in offsets]
    best = int(np.argmin(scores))
    lo = math.log(offsets[max(best - 1, 0)])
    hi = math.log(offsets[min(best + 1, len(offsets) - 1)])
    if hi > lo:
        result = minimize_scalar(lambda s: _fit_for(t_last + math.exp(s), t_win, y_win)[0],
                                 bounds=(lo, hi), method="bounded", options={"xatol": 1e-10})
        offset = math.exp(float(result.x))
    else:
        offset = float(offsets[best])
    sse, gamma, log_c, resid = _fit_for(t_last + offset, t_win, y_win)
    fit = BlowupFit(t_star=t_last + offset, gamma=gamma, log_prefactor=log_c,
                    rms_residual=math.sqrt(sse / t_win.size), window=(float(t_win[0]), t_last),
                    n_points=int(t_win.size), residuals=resid)
    logging.info(f"fit_blowup_time: t*={fit.t_star:.10g}, gamma={gamma:.4f}, rms={fit.rms_residual:.3e}")
    return fit


def estimate_blowup_time(trajectory: Trajectory, alpha: float, mu: float) -> BlowupFit:
    """軌道の H^α ノルム成長から爆発時刻 t* を推定します。"""
    norm_sq = sobolev_norm_sq_series(trajectory.amplitudes, trajectory.j0, alpha, mu)
    return fit_blowup_time(trajectory.times, np.sqrt(norm_sq))


def _require_obukhov(params: ModelParams) -> None:
    if params.kind is not ModelKind.OBUKHOV:
        raise UnsupportedKindError(f"operation needs the Obukhov model (got {params.kind.value})")


def obukhov_flux(params: ModelParams, state: ShellState, j: int) -> float:
    """
    𝓔 = (1/2) d/dt E_B(j) を Obukhov モデルの右辺から計算します。
    打ち切り系でも望遠鏡和により λ^{1/3}(λ^j a_{j-1} a_j^2 - Σ_{l>=j} ν_l a_l^2) に一致します。
    """
    _require_obukhov(params)
    i = params.offset(j)
    a = state.a
    a_prev = a[i - 1] if i > 0 else 0.0
    inviscid = params.wavenumbers[i] * a_prev * a[i] * a[i]
    viscous = float(np.sum(params.viscosity_coefficients[i:] * a[i:] ** 2))
    return params.time_factor * (inviscid - viscous)


def obukhov_powerlaw(lambda_: float, flux: float, j: int) -> float:
    """定常べき乗則 a_j = λ^{-2/9} 𝓔^{1/3} λ^{-j/3}。"""
    return lambda_ ** (-2.0 / 9.0) * float(np.cbrt(flux)) * lambda_ ** (-j / 3.0)


def obukhov_powerlaw_state(params: ModelParams, flux: float) -> ShellState:
    a = [obukhov_powerlaw(params.lambda_, flux, int(j)) for j in params.shell_indices]
    return ShellState(t=0.0, a=a, j0=params.j0)


def cascade_criterion(params: ModelParams, state: ShellState, l: int) -> bool:
    """局所レイノルズ数条件 λ^{l+1} a_l > ν_{l+1}。"""
    _require_obukhov(params)
    a_l = state.amplitude(l)
    nu_next = 0.0
    if params.viscosity is not None:
        nu_next = params.viscosity.nu * params.lambda_ ** (params.viscosity.exponent * (l + 1))
    return params.lambda_ ** (l + 1) * a_l > nu_next


def powerlaw_positivity_exponent_ok(beta: float, lambda_: float = 2.0,
                                    sample_shells: Sequence[int] = range(-5, 6)) -> bool:
    """
    a_j ∝ λ^{βj} が a_{j-1} a_j >= λ a_{j+1}^2 を満たすか（β <= -1/3）を返します。
    標本シェルでの直接評価も行い、閉形式と食い違えば警告します。
    """
    closed_form = beta <= -1.0 / 3.0
    sampled = True
    for j in sample_shells:
        lhs = lambda_ ** (beta * (j - 1)) * lambda_ ** (beta * j)
        rhs_value = lambda_ * lambda_ ** (2.0 * beta * (j + 1))
        if lhs < rhs_value * (1.0 - 1e-12):
            sampled = False
    if sampled != closed_form:
        logging.warning(f"powerlaw positivity: sampled check {sampled} disagrees at beta={beta}")
    return closed_form


@dataclass(frozen=True)
class SingleModeExperiment:
    """単一シェル励起からの Obukhov 実験の結果（符号付きエネルギー）。"""
    excited_shell: int
    trajectory: Trajectory
    energy_below: float
    energy_above: float
    signed_energy: Tuple[float, ...]
    min_amplitude: float


def obukhov_single_mode_experiment(params: ModelParams, l: int, amplitude: float,
                                   t_end: float, config: Optional[IntegratorConfig] = None) -> SingleModeExperiment:
    """
    a_l(0) > 0 のみ非ゼロの初期条件から Obukhov モデルを積分し、
    l より下・上のシェルに移ったエネルギーを報告します（方向や正値性は主張しない）。
    """
    _require_obukhov(params)
    config = config or IntegratorConfig(t_end=t_end)
    trajectory = integrate(params, ShellState.single_shell(params, l, amplitude), config)
    final = trajectory.final_state.a
    i = params.offset(l)
    signed = tuple(float(x * abs(x)) for x in final)
    experiment = SingleModeExperiment(
        excited_shell=l, trajectory=trajectory,
        energy_below=float(np.sum(final[:i] ** 2)), energy_above=float(np.sum(final[i + 1:] ** 2)),
        signed_energy=signed, min_amplitude=float(np.min(trajectory.amplitudes)))
    logging.info(f"obukhov experiment: below={experiment.energy_below:.4g}, "
                 f"above={experiment.energy_above:.4g}, min a={experiment.min_amplitude:.4g}")
    return experiment
