import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ContractViolationError, NumericOverflowError, ShellIndexError
from app.core.shell_core import ModelParams, ShellState, rhs_values, tail_energies

RhsFunction = Callable[[float, np.ndarray], np.ndarray]

# Dormand-Prince 5(4) の Butcher 表（7 段、FSAL）
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
# 5 次解と埋め込み 4 次解の差
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

_SAFETY = 0.9
# 単位刻みあたりの誤差制御では誤差比が h^4 に比例する
_ERROR_EXPONENT = 0.25
_PI_ALPHA = 0.7 * _ERROR_EXPONENT
_PI_BETA = 0.4 * _ERROR_EXPONENT
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0
_EVENT_TIME_RTOL = 1e-12


class Termination(Enum):
    REACHED_T_END = "ReachedTEnd"
    BLOWUP_STOP = "BlowupStop"
    OVERFLOW = "Overflow"


@dataclass(frozen=True)
class EventSpec:
    """テールエネルギー E_B(shell) がしきい値 threshold を方向 direction に横切るイベント。"""
    shell: int
    threshold: float
    direction: str = "up"

    def __post_init__(self) -> None:
        if self.direction not in ("up", "down"):
            raise ContractViolationError(f"event direction must be 'up' or 'down' (got {self.direction})")


@dataclass(frozen=True)
class IntegratorConfig:
    """
    適応刻み積分の設定です。

    Attributes:
        rel_tol (float): 相対許容誤差。
        abs_tol (float): 絶対許容誤差。
        max_step (float): 最大刻み幅。
        t_end (float): 終了時刻。
        stop_norm (float): max|a_j| がこの値を超えたら停止。
        events (Tuple[EventSpec, ...]): しきい値イベント。
        max_steps (int): 受理ステップ数の上限（超過は BlowupStop）。
        min_step (float): 相対最小刻み（h < min_step * max(1, |t|) で刻みアンダーフロー）。
        stop_tail_fraction (Optional[float]): 最終シェルのエネルギー比がこの値に達したら停止。
    """
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_step: float = math.inf
    t_end: float = 10.0
    stop_norm: float = 1e12
    events: Tuple[EventSpec, ...] = ()
    max_steps: int = 200_000
    min_step: float = 1e-15
    stop_tail_fraction: Optional[float] = None

    def __post_init__(self) -> None:
        if not (self.rel_tol > 0.0 and self.abs_tol > 0.0):
            raise ContractViolationError("rel_tol and abs_tol must be > 0")
        if not self.t_end > 0.0:
            raise ContractViolationError(f"t_end must be > 0 (got {self.t_end})")
        if not self.stop_norm > 1.0:
            raise ContractViolationError(f"stop_norm must be > 1 (got {self.stop_norm})")
        if not self.max_step > 0.0:
            raise ContractViolationError(f"max_step must be > 0 (got {self.max_step})")
        if self.max_steps < 1:
            raise ContractViolationError("max_steps must be >= 1")
        if self.stop_tail_fraction is not None and not 0.0 < self.stop_tail_fraction <= 1.0:
            raise ContractViolationError("stop_tail_fraction must lie in (0, 1]")
        object.__setattr__(self, "events", tuple(self.events))


@dataclass(frozen=True)
class EventRecord:
    t: float
    kind: str
    shell: Optional[int]
    value: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    受理ステップとイベント時刻における状態の時系列です。
    サンプル間はキュービック Hermite 補間で密出力します。
    """
    params: Optional[ModelParams]
    config: IntegratorConfig
    times: np.ndarray = field(repr=False)
    amplitudes: np.ndarray = field(repr=False)
    derivatives: np.ndarray = field(repr=False)
    events: Tuple[EventRecord, ...]
    termination: Termination
    j0: int = 0
    accepted_steps: int = 0
    rejected_steps: int = 0

    def __post_init__(self) -> None:
        for name in ("times", "amplitudes", "derivatives"):
            getattr(self, name).setflags(write=False)

    @property
    def t_final(self) -> float:
        return float(self.times[-1])

    @property
    def final_state(self) -> ShellState:
        return ShellState(t=self.t_final, a=self.amplitudes[-1], j0=self.j0)

    @property
    def samples(self) -> List[ShellState]:
        return [ShellState(t=float(t), a=a, j0=self.j0) for t, a in zip(self.times, self.amplitudes)]

    @property
    def n_shells(self) -> int:
        return int(self.amplitudes.shape[1])

    def _interval(self, t: float) -> int:
        if not self.times[0] <= t <= self.times[-1]:
            raise ContractViolationError(
                f"t={t} outside trajectory span [{self.times[0]}, {self.times[-1]}]")
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(max(i, 0), len(self.times) - 2) if len(self.times) > 1 else 0

    def values_at(self, t: float) -> np.ndarray:
        if len(self.times) == 1:
            return np.array(self.amplitudes[0])
        i = self._interval(t)
        return hermite_interpolate(self.times[i], self.amplitudes[i], self.derivatives[i],
                                   self.times[i + 1], self.amplitudes[i + 1], self.derivatives[i + 1], t)

    def state_at(self, t: float) -> ShellState:
        return ShellState(t=float(t), a=self.values_at(t), j0=self.j0)


def hermite_interpolate(t0: float, y0: np.ndarray, f0: np.ndarray,
                        t1: float, y1: np.ndarray, f1: np.ndarray, t: float) -> np.ndarray:
    h = t1 - t0
    if h == 0.0:
        return np.array(y0)
    s = (t - t0) / h
    s2 = s * s
    s3 = s2 * s
    return ((2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * h * f0
            + (-2 * s3 + 3 * s2) * y1 + (s3 - s2) * h * f1)


def _hermite_derivative(t0: float, y0: np.ndarray, f0: np.ndarray,
                        t1: float, y1: np.ndarray, f1: np.ndarray, t: float) -> np.ndarray:
    h = t1 - t0
    s = (t - t0) / h
    s2 = s * s
    return ((6 * s2 - 6 * s) * y0 / h + (3 * s2 - 4 * s + 1) * f0
            + (-6 * s2 + 6 * s) * y1 / h + (3 * s2 - 2 * s) * f1)


def _dopri_step(fun: RhsFunction, t: float, y: np.ndarray, f0: np.ndarray,
                h: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    k = np.empty((7, y.shape[0]))
    k[0] = f0
    for i in range(1, 7):
        k[i] = fun(t + _C[i] * h, y + h * (_A[i] @ k[:i]))
    y_new = y + h * (_A[6] @ k[:6])
    # FSAL: 最終段は新しい点での微分
    return y_new, k[6], h * (_E @ k)


def _error_norm(err: np.ndarray, y: np.ndarray, y_new: np.ndarray, config: IntegratorConfig) -> float:
    scale = config.abs_tol + config.rel_tol * np.maximum(np.abs(y), np.abs(y_new))
    return float(np.max(np.abs(err) / scale))


def _step_fraction(h: float, f: np.ndarray, y: np.ndarray, y_new: np.ndarray, span: float) -> float:
    """
    刻み h を解の時間スケールで測った無次元量 min(1, h |f| / |y|) です。
    誤差ノルムをこの値で割ると単位刻みあたりの誤差制御となり、大域誤差が許容誤差の 5/4 乗で縮みます。
    |f| / |y| の下限は 1 / span です。
    """
    size = max(float(np.max(np.abs(y))), float(np.max(np.abs(y_new))))
    rate = float(np.max(np.abs(f))) / size if size > 0.0 else math.inf
    if math.isfinite(span) and span > 0.0:
        rate = max(rate, 1.0 / span)
    fraction = min(1.0, h * rate)
    return fraction if fraction > 0.0 else 1.0


def _initial_step(fun: RhsFunction, t0: float, y0: np.ndarray, f0: np.ndarray,
                  config: IntegratorConfig) -> float:
    scale = config.abs_tol + config.rel_tol * np.abs(y0)
    d0 = float(np.sqrt(np.mean((y0 / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((f0 / scale) ** 2)))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, config.t_end - t0, config.max_step)
    try:
        f1 = fun(t0 + h0, y0 + h0 * f0)
    except NumericOverflowError:
        return h0 * 1e-3
    d2 = float(np.sqrt(np.mean(((f1 - f0) / scale) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1, config.max_step)


def _event_value(y: np.ndarray, offset: int, threshold: float) -> float:
    tail = y[offset:]
    return float(np.dot(tail, tail)) - threshold


def _locate_event(t0: float, y0: np.ndarray, f0: np.ndarray, t1: float, y1: np.ndarray,
                  f1: np.ndarray, offset: int, threshold: float, up: bool) -> float:
    """ステップ内の符号変化を Hermite 補間上の二分法で特定します。"""
    lo, hi = t0, t1
    tol = _EVENT_TIME_RTOL * max(abs(t0), abs(t1), t1 - t0)
    for _ in range(200):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        g = _event_value(hermite_interpolate(t0, y0, f0, t1, y1, f1, mid), offset, threshold)
        crossed = g >= 0.0 if up else g <= 0.0
        if crossed:
            hi = mid
        else:
            lo = mid
    return hi


def integrate_system(fun: RhsFunction, t0: float, y0: Sequence[float], config: IntegratorConfig,
                     params: Optional[ModelParams] = None, j0: int = 0) -> Trajectory:
    """
    埋め込み Runge-Kutta 5(4) 対と PI 刻み制御（単位刻みあたりの誤差制御）で y' = fun(t, y) を積分します。

    Args:
        fun (RhsFunction): 右辺。
        t0 (float): 初期時刻。
        y0 (Sequence[float]): 初期値。
        config (IntegratorConfig): 積分設定。
        params (Optional[ModelParams]): シェルモデルの場合のパラメータ（記録用）。
        j0 (int): イベントのシェル番号に対応する先頭の絶対番号。

    Returns:
        Trajectory: 終了理由付きの軌道。爆発やオーバーフローでは例外を送出せず終了理由として記録します。
    """
    y = np.array(y0, dtype=float)
    n = y.shape[0]
    offsets = []
    for spec in config.events:
        if not j0 <= spec.shell < j0 + n:
            raise ShellIndexError(f"event shell {spec.shell} outside truncation [{j0}, {j0 + n - 1}]")
        offsets.append(spec.shell - j0)

    t = float(t0)
    f = np.asarray(fun(t, y), dtype=float)
    times: List[float] = [t]
    states: List[np.ndarray] = [y.copy()]
    derivs: List[np.ndarray] = [f.copy()]
    events: List[EventRecord] = []

    for idx, (spec, offset) in enumerate(zip(config.events, offsets)):
        g = _event_value(y, offset, spec.threshold)
        if (spec.direction == "up" and g >= 0.0) or (spec.direction == "down" and g <= 0.0):
            events.append(EventRecord(t, f"threshold_{spec.direction}", spec.shell, spec.threshold))

    h = _initial_step(fun, t, y, f, config)
    span = config.t_end - t
    err_prev = 1.0
    accepted = 0
    rejected = 0
    overflow_failure = False
    termination = Termination.REACHED_T_END
    logging.debug(f"integrate: start t0={t}, n={n}, h0={h:.3e}, t_end={config.t_end}")

    while True:
        remaining = config.t_end - t
        min_abs = config.min_step * max(1.0, abs(t))
        if remaining <= min_abs:
            termination = Termination.REACHED_T_END
            break
        if accepted >= config.max_steps:
            termination = Termination.BLOWUP_STOP
            events.append(EventRecord(t, "max_steps", None, float(accepted)))
            break
        h = min(h, config.max_step, remaining)
        if h < min_abs:
            termination = Termination.OVERFLOW if overflow_failure else Termination.BLOWUP_STOP
            events.append(EventRecord(t, "overflow" if overflow_failure else "step_underflow", None, h))
            break

        try:
            y_new, f_new, err_vec = _dopri_step(fun, t, y, f, h)
            finite = bool(np.all(np.isfinite(y_new)) and np.all(np.isfinite(f_new)))
        except NumericOverflowError:
            finite = False
        if not finite:
            overflow_failure = True
            rejected += 1
            h *= 0.1
            continue

        err = _error_norm(err_vec, y, y_new, config) / _step_fraction(h, f, y, y_new, span)
        if err > 1.0:
            overflow_failure = False
            rejected += 1
            h *= max(0.1, _SAFETY * err ** -_ERROR_EXPONENT)
            continue

        t_new = t + h
        # イベント検出
        step_events: List[Tuple[float, int]] = []
        for idx, (spec, offset) in enumerate(zip(config.events, offsets)):
            g0 = _event_value(y, offset, spec.threshold)
            g1 = _event_value(y_new, offset, spec.threshold)
            up = spec.direction == "up"
            if (up and g0 < 0.0 <= g1) or (not up and g0 > 0.0 >= g1):
                te = _locate_event(t, y, f, t_new, y_new, f_new, offset, spec.threshold, up)
                step_events.append((te, idx))
        for te, idx in sorted(step_events):
            spec = config.events[idx]
            events.append(EventRecord(te, f"threshold_{spec.direction}", spec.shell, spec.threshold))
            if times[-1] < te < t_new:
                times.append(te)
                states.append(hermite_interpolate(t, y, f, t_new, y_new, f_new, te))
                derivs.append(_hermite_derivative(t, y, f, t_new, y_new, f_new, te))

        t, y, f = t_new, y_new, f_new
        times.append(t)
        states.append(y.copy())
        derivs.append(f.copy())
        accepted += 1
        overflow_failure = False

        peak = float(np.max(np.abs(y)))
        if peak > config.stop_norm:
            termination = Termination.BLOWUP_STOP
            events.append(EventRecord(t, "stop_norm", None, peak))
            break
        if config.stop_tail_fraction is not None:
            total = float(np.dot(y, y))
            if total > 0.0 and y[-1] * y[-1] >= config.stop_tail_fraction * total:
                termination = Termination.BLOWUP_STOP
                events.append(EventRecord(t, "tail_saturation", j0 + n - 1, float(y[-1] * y[-1] / total)))
                break

        err = max(err, 1e-10)
        factor = _SAFETY * err ** -_PI_ALPHA * err_prev ** _PI_BETA
        h *= min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
        err_prev = err

    logging.info(f"integrate: {termination.value} at t={t:.12g} "
                 f"(accepted={accepted}, rejected={rejected}, events={len(events)})")
    return Trajectory(
        params=params,
        config=config,
        times=np.array(times),
        amplitudes=np.array(states),
        derivatives=np.array(derivs),
        events=tuple(events),
        termination=termination,
        j0=j0,
        accepted_steps=accepted,
        rejected_steps=rejected,
    )


def integrate(params: ModelParams, initial: ShellState, config: IntegratorConfig) -> Trajectory:
    """
    シェルモデルを初期状態から積分します。

    Raises:
        ContractViolationError: 初期状態がパラメータに適合しない場合。
    """
    if initial.j0 != params.j0 or initial.n_shells != params.n_shells:
        raise ContractViolationError(
            f"initial state (j0={initial.j0}, N={initial.n_shells}) does not conform to "
            f"params (j0={params.j0}, N={params.n_shells})")
    logging.info(f"integrate: kind={params.kind.value}, lambda={params.lambda_:.6g}, "
                 f"j0={params.j0}, N={params.n_shells}, t_end={config.t_end}")
    return integrate_system(lambda t, y: rhs_values(params, y), initial.t, initial.a, config,
                            params=params, j0=params.j0)


def crossing_times(trajectory: Trajectory,
                   thresholds: Sequence[Tuple[int, float]]) -> List[Optional[float]]:
    """
    各 (j, θ) について inf{t : E_B(j)(t) >= θ} を返します。横切らない場合は None。
    イベント記録があればそれを使い、なければサンプル間の二分法で求めます。
    """
    j0 = trajectory.j0
    n = trajectory.n_shells
    results: List[Optional[float]] = []
    tails = None
    for j, theta in thresholds:
        if not j0 <= j < j0 + n:
            raise ShellIndexError(f"shell {j} outside truncation [{j0}, {j0 + n - 1}]")
        recorded = [e.t for e in trajectory.events
                    if e.kind == "threshold_up" and e.shell == j and e.value == theta]
        if recorded:
            results.append(min(recorded))
            continue
        if tails is None:
            sq = trajectory.amplitudes ** 2
            tails = np.cumsum(sq[:, ::-1], axis=1)[:, ::-1]
        offset = j - j0
        hit = np.nonzero(tails[:, offset] >= theta)[0]
        if hit.size == 0:
            results.append(None)
            continue
        i = int(hit[0])
        if i == 0:
            results.append(float(trajectory.times[0]))
            continue
        results.append(_locate_event(
            trajectory.times[i - 1], trajectory.amplitudes[i - 1], trajectory.derivatives[i - 1],
            trajectory.times[i], trajectory.amplitudes[i], trajectory.derivatives[i],
            offset, theta, True))
    return results


def energy_series(trajectory: Trajectory) -> np.ndarray:
    return np.sum(trajectory.amplitudes ** 2, axis=1)


def tail_energy_series(trajectory: Trajectory) -> np.ndarray:
    """各サンプルの E_B(j)（列 = シェル）。"""
    return np.array([tail_energies(a) for a in trajectory.amplitudes])


def rk4_fixed_step(fun: RhsFunction, t0: float, y0: Sequence[float], t_end: float,
                   h: float) -> np.ndarray:
    """固定刻みの古典的 RK4（参照解用）。"""
    y = np.array(y0, dtype=float)
    steps = int(round((t_end - t0) / h))
    if steps < 1:
        return y
    h = (t_end - t0) / steps
    t = t0
    for _ in range(steps):
        k1 = fun(t, y)
        k2 = fun(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = fun(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = fun(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return y
