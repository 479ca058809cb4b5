import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad, trapezoid
from scipy.optimize import brentq, minimize_scalar
from scipy.special import airy, gamma

from app.core.errors import (
    AccuracyNotMetError,
    DegeneratePhaseError,
    DivisionDomainError,
    NoEstimateError,
    RootFindingError,
)
from app.core.integrator import IntegratorConfig, Trajectory, integrate_system

ProfileFunction = Callable[[np.ndarray], np.ndarray]

DIFF_STEP = 1e-5
# 三階差分は丸め誤差が h^-3 で効くため別の刻みを使う
THIRD_DIFF_STEP = 1e-3
GAUSSIAN_HALF_WIDTH = 8.0
SCAN_POINTS = 4001
TIE_TOLERANCE = 1e-8
DIVERGENCE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class QuadratureOptions:
    """
    フーリエ係数の求積設定です。

    Attributes:
        nodes (int): パネルあたりの Gauss-Legendre 点数。
        h_max (float): パネル幅の上限。
        rtol (float): 相対許容誤差（パネル数倍増時の差で判定）。
        max_doublings (int): パネル数倍増の上限回数。
    """
    nodes: int = 10
    h_max: float = 0.25
    rtol: float = 1e-8
    max_doublings: int = 6


@dataclass(frozen=True)
class BurgersProfile:
    """
    非粘性 Burgers 方程式の初期プロファイル u(x, 0) = f(x) とその導関数です。
    period が None なら実数直線上で減衰するプロファイル、そうでなければ周期関数です。
    """
    name: str
    f: ProfileFunction = field(repr=False)
    df: ProfileFunction = field(repr=False)
    d2f: ProfileFunction = field(repr=False)
    d3f: ProfileFunction = field(repr=False)
    half_width: float = GAUSSIAN_HALF_WIDTH
    period: Optional[float] = None
    quadrature: QuadratureOptions = QuadratureOptions()

    @classmethod
    def from_callable(cls, name: str, f: ProfileFunction, half_width: float = GAUSSIAN_HALF_WIDTH,
                      period: Optional[float] = None, step: float = DIFF_STEP) -> "BurgersProfile":
        """解析的な導関数がない場合に中心差分で導関数を構成します。"""
        def df(x):
            x = np.asarray(x, dtype=float)
            return (f(x + step) - f(x - step)) / (2.0 * step)

        def d2f(x):
            x = np.asarray(x, dtype=float)
            return (f(x + step) - 2.0 * f(x) + f(x - step)) / (step * step)

        def d3f(x):
            x = np.asarray(x, dtype=float)
            h = THIRD_DIFF_STEP
            return (f(x + 2 * h) - 2.0 * f(x + h) + 2.0 * f(x - h) - f(x - 2 * h)) / (2.0 * h ** 3)

        return cls(name=name, f=f, df=df, d2f=d2f, d3f=d3f, half_width=half_width, period=period)

    @property
    def domain(self) -> Tuple[float, float]:
        if self.period is not None:
            return -0.5 * self.period, 0.5 * self.period
        return -self.half_width, self.half_width

    def scan_grid(self, points: int = SCAN_POINTS) -> np.ndarray:
        lo, hi = self.domain
        return np.linspace(lo, hi, points)

    def sup_abs(self) -> float:
        return float(np.max(np.abs(self.f(self.scan_grid()))))


def canonical_profile() -> BurgersProfile:
    """f(η) = -η e^{-η²}（解析的導関数付き、f'(0) = -1, f'''(0) = 6）。"""
    def f(x):
        x = np.asarray(x, dtype=float)
        return -x * np.exp(-x * x)

    def df(x):
        x = np.asarray(x, dtype=float)
        return (2.0 * x * x - 1.0) * np.exp(-x * x)

    def d2f(x):
        x = np.asarray(x, dtype=float)
        return (6.0 * x - 4.0 * x ** 3) * np.exp(-x * x)

    def d3f(x):
        x = np.asarray(x, dtype=float)
        return (6.0 - 24.0 * x * x + 8.0 * x ** 4) * np.exp(-x * x)

    return BurgersProfile(name="canonical", f=f, df=df, d2f=d2f, d3f=d3f)


def _smooth_step(x: np.ndarray) -> np.ndarray:
    """0 (x <= 0) から 1 (x >= 1) へ滑らかに移る C^∞ 関数。"""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(x > 0.0, np.exp(-1.0 / np.where(x > 0.0, x, 1.0)), 0.0)
        b = np.where(x < 1.0, np.exp(-1.0 / np.where(x < 1.0, 1.0 - x, 1.0)), 0.0)
    return a / (a + b)


def linear_core_profile(width: float = 1.0) -> BurgersProfile:
    """|η| <= width で f(η) = -η、2 width より外で 0 となるコンパクト台のプロファイル。"""
    def f(x):
        x = np.asarray(x, dtype=float)
        cutoff = 1.0 - _smooth_step(np.abs(x) / width - 1.0)
        return -x * cutoff

    return BurgersProfile.from_callable(f"linear_core(width={width})", f, half_width=4.0 * width)


def sine_profile(amplitude: float = 1.0, j0: int = 0) -> BurgersProfile:
    """周期 2·2^{-j0}π の奇関数 f(η) = -A sin(2^{j0} η)。"""
    k = 2.0 ** j0

    def f(x):
        return -amplitude * np.sin(k * np.asarray(x, dtype=float))

    def df(x):
        return -amplitude * k * np.cos(k * np.asarray(x, dtype=float))

    def d2f(x):
        return amplitude * k * k * np.sin(k * np.asarray(x, dtype=float))

    def d3f(x):
        return amplitude * k ** 3 * np.cos(k * np.asarray(x, dtype=float))

    return BurgersProfile(name=f"sine(A={amplitude}, j0={j0})", f=f, df=df, d2f=d2f, d3f=d3f,
                          period=2.0 * math.pi / k)


def characteristics_solution(profile: BurgersProfile, x: float, t: float) -> List[float]:
    """
    x = η + t f(η) の実根 η をすべて求め、u = f(η) のリストを返します。
    衝撃波形成前は値は一つ、形成後は多価（エントロピー解ではない）。

    Raises:
        RootFindingError: 根が見つからない、または brentq が収束しない場合。
    """
    if t < 0.0:
        raise ValueError(f"t must be >= 0 (got {t})")
    if t == 0.0:
        return [float(profile.f(np.array(x)))]
    spread = t * profile.sup_abs()
    lo, hi = x - spread - 1e-12, x + spread + 1e-12
    grid = np.linspace(lo, hi, SCAN_POINTS)
    g = grid + t * profile.f(grid) - x
    roots: List[float] = [float(e) for e in grid[g == 0.0]]
    changes = np.nonzero(np.sign(g[:-1]) * np.sign(g[1:]) < 0.0)[0]
    for i in changes:
        a, b = float(grid[i]), float(grid[i + 1])
        try:
            eta, info = brentq(lambda e: e + t * float(profile.f(np.array(e))) - x, a, b,
                               xtol=1e-15, rtol=4 * np.finfo(float).eps, full_output=True)
        except (ValueError, RuntimeError) as e:
            raise RootFindingError(f"characteristic root failed in [{a}, {b}]: {e}", bracket=(a, b)) from e
        if not info.converged:
            raise RootFindingError(f"characteristic root did not converge in [{a}, {b}]", bracket=(a, b))
        roots.append(float(eta))
    if not roots:
        raise RootFindingError(f"no characteristic through x={x} at t={t}", bracket=(lo, hi))
    return [float(profile.f(np.array(eta))) for eta in sorted(roots)]


@dataclass(frozen=True)
class ShockTime:
    """衝撃波形成時刻 t* = -1/min f' と最小点 η0。f' >= 0 なら t* = inf。"""
    t_star: float
    eta0: Optional[float]
    ties: Tuple[float, ...] = ()

    @property
    def has_shock(self) -> bool:
        return math.isfinite(self.t_star)


NO_SHOCK = ShockTime(t_star=math.inf, eta0=None)


def _minimum_clusters(values: np.ndarray, level: float) -> List[np.ndarray]:
    near = np.nonzero(values <= level)[0]
    if near.size == 0:
        return []
    splits = np.nonzero(np.diff(near) > 1)[0] + 1
    return np.split(near, splits)


def shock_time(profile: BurgersProfile) -> ShockTime:
    """
    f' の格子走査と黄金分割法による精密化で t* = -1/min f' を求めます。
    大域最小値から 1e-8 以内の別の極小点は ties として報告します（選択はしない）。
    """
    grid = profile.scan_grid()
    slopes = profile.df(grid)
    i = int(np.argmin(slopes))
    if slopes[i] >= 0.0:
        logging.info(f"shock_time: f' >= 0 for profile {profile.name}, no shock")
        return NO_SHOCK

    def slope(e: float) -> float:
        return float(profile.df(np.array(e)))

    eta0 = float(grid[i])
    if 0 < i < len(grid) - 1:
        try:
            result = minimize_scalar(slope, bracket=(grid[i - 1], grid[i], grid[i + 1]),
                                     method="golden", options={"xtol": 1e-10})
        except (ValueError, RuntimeError):
            # 平坦な最小（f' が一定の区間）では括弧条件が成り立たない
            result = None
        if result is not None:
            eta0 = float(result.x)
            # f'' の符号変化があれば根として磨く
            spacing = float(grid[1] - grid[0])
            a, b = eta0 - spacing, eta0 + spacing
            if profile.d2f(np.array(a)) * profile.d2f(np.array(b)) < 0.0:
                eta0 = float(brentq(lambda e: float(profile.d2f(np.array(e))), a, b, xtol=1e-15))
    min_slope = slope(eta0)
    if min_slope > slopes[i]:
        eta0, min_slope = float(grid[i]), float(slopes[i])

    ties = []
    for cluster in _minimum_clusters(slopes, min_slope + TIE_TOLERANCE):
        lo, hi = grid[cluster[0]] - (grid[1] - grid[0]), grid[cluster[-1]] + (grid[1] - grid[0])
        if not lo <= eta0 <= hi:
            ties.append(float(grid[cluster[np.argmin(slopes[cluster])]]))
    if ties:
        logging.warning(f"shock_time: {len(ties)} competing minima within {TIE_TOLERANCE} "
                        f"of f'({eta0:.6g}) = {min_slope:.12g}")
    return ShockTime(t_star=-1.0 / min_slope, eta0=eta0, ties=tuple(ties))


def slope_solution(zeta0: float, t: float) -> float:
    """特性曲線に沿った勾配 ζ(t) = ζ0 / (1 + ζ0 t)。"""
    return zeta0 / (1.0 + zeta0 * t)


def slope_rhs(t: float, y: np.ndarray) -> np.ndarray:
    """勾配の常微分方程式 dζ/dt = -ζ²。"""
    return -y * y


def max_slope(profile: BurgersProfile, t: float) -> float:
    """max_x |∂u/∂x| = max_η |f'/(1 + t f')|（t < t* のとき）。"""
    grid = profile.scan_grid()
    slopes = profile.df(grid)
    return float(np.max(np.abs(slopes / (1.0 + t * slopes))))


def airy_ai0() -> float:
    """Ai(0) = 3^{-2/3} / Γ(2/3)。"""
    return float(3.0 ** (-2.0 / 3.0) / gamma(2.0 / 3.0))


def airy_ai0_integral() -> float:
    """
    Ai(0) = π^{-1} ∫_0^∞ cos(y³/3) dy を u = y³/3 と置換した余弦積分で評価します。
    """
    c = 3.0 ** (-2.0 / 3.0)
    near, _ = quad(lambda u: c * math.cos(u), 0.0, 1.0, weight="alg", wvar=(-2.0 / 3.0, 0.0))
    far, _ = quad(lambda u: c * u ** (-2.0 / 3.0), 1.0, np.inf, weight="cos", wvar=1.0)
    return (near + far) / math.pi


def airy_ai0_reference() -> float:
    return float(airy(0.0)[0])


def _panel_sum(integrand: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
               panels: int, nodes: np.ndarray, weights: np.ndarray) -> complex:
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    points = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    values = integrand(points).reshape(panels, nodes.size)
    return complex(np.sum(half * (values @ weights)))


def fourier_coefficient(profile: BurgersProfile, k: float, t: float) -> complex:
    """
    部分積分形 û(k,t) = (1/(2πik)) ∫ f'(η) e^{-ik[η + t f(η)]} dη を位相分解パネル求積で評価します。
    周期プロファイルでは 1 周期上で 1/(P ik) を掛けた係数になります。

    Raises:
        DivisionDomainError: k = 0 の場合。
        AccuracyNotMetError: パネル倍増で収束しない場合。
    """
    if k == 0:
        raise DivisionDomainError("fourier_coefficient is undefined at k = 0")
    options = profile.quadrature
    lo, hi = profile.domain
    samples = profile.scan_grid()
    max_rate = float(np.max(np.abs(1.0 + t * profile.df(samples)))) * 1.1
    period = 2.0 * math.pi / (abs(k) * max(max_rate, 1e-12))
    size = min(period / 8.0, options.h_max)
    panels = max(int(math.ceil((hi - lo) / size)), 1)
    nodes, weights = np.polynomial.legendre.leggauss(options.nodes)
    norm = 2.0 * math.pi if profile.period is None else profile.period

    def integrand(eta: np.ndarray) -> np.ndarray:
        return profile.df(eta) * np.exp(-1j * k * (eta + t * profile.f(eta)))

    scale = float(np.sum(np.abs(profile.df(samples)))) * (samples[1] - samples[0])
    previous = _panel_sum(integrand, lo, hi, panels, nodes, weights)
    error = math.inf
    for _ in range(options.max_doublings):
        panels *= 2
        current = _panel_sum(integrand, lo, hi, panels, nodes, weights)
        error = abs(current - previous)
        if error <= max(options.rtol * abs(current), 1e-14 * scale):
            logging.debug(f"fourier_coefficient: k={k}, t={t}, panels={panels}, err={error:.3e}")
            return current / (norm * 1j * k)
        previous = current
    estimate = previous / (norm * 1j * k)
    raise AccuracyNotMetError(f"quadrature for k={k}, t={t} did not converge", estimate, error)


def stationary_phase_asymptote(profile: BurgersProfile, k: float, t_star: float,
                               eta0: Optional[float] = None) -> complex:
    """
    衝撃波形成時刻での停留位相近似
    (Ai(0)/(ik)) (2/(k t |f'''|))^{1/3} f'(η0) e^{-ik[η0 + t f(η0)]}。

    Raises:
        DegeneratePhaseError: f'''(η0) = 0 の場合。
    """
    if eta0 is None:
        eta0 = shock_time(profile).eta0
    if eta0 is None:
        raise DegeneratePhaseError(f"profile {profile.name} forms no shock")
    d3 = float(profile.d3f(np.array(eta0)))
    if d3 == 0.0:
        raise DegeneratePhaseError(f"f'''({eta0}) = 0: non-generic initial condition")
    d1 = float(profile.df(np.array(eta0)))
    phase = eta0 + t_star * float(profile.f(np.array(eta0)))
    amplitude = (2.0 / (k * t_star * abs(d3))) ** (1.0 / 3.0)
    return airy_ai0() / (1j * k) * amplitude * d1 * np.exp(-1j * k * phase)


def fourier_decay_exponent(profile: BurgersProfile, ks: Sequence[float], t: float) -> float:
    """log|û(k,t)| を log k に直線フィットした傾き。"""
    ks = np.asarray(ks, dtype=float)
    if ks.size < 3:
        raise NoEstimateError("need at least 3 wavenumbers to fit a decay exponent")
    mags = np.array([abs(fourier_coefficient(profile, float(k), t)) for k in ks])
    slope, _ = np.polyfit(np.log(ks), np.log(mags), 1)
    return float(slope)


def classify_divergence(alpha: float, decay_exponent: float) -> bool:
    """|û| ~ k^{-p} のとき H^α ノルムが発散するのは 2α >= 2p - 1。"""
    return 2.0 * alpha >= 2.0 * decay_exponent - 1.0 - DIVERGENCE_TOLERANCE


@dataclass(frozen=True)
class ContinuumNorm:
    value: float
    decay_exponent: float
    divergent: bool
    k_max: float


def continuum_sobolev_norm_sq(ks: Sequence[float], magnitudes: Sequence[float], alpha: float) -> ContinuumNorm:
    """
    ∫(1 + k^{2α})|û|² dk の打ち切り値と、減衰指数 p から判定した発散の有無を返します。
    p は標本の高波数側半分の両対数フィットで推定します。
    """
    ks = np.asarray(ks, dtype=float)
    mags = np.asarray(magnitudes, dtype=float)
    if ks.shape != mags.shape:
        raise ValueError("ks and magnitudes must have the same shape")
    usable = (ks > 0.0) & (mags > 0.0)
    if np.count_nonzero(usable) < 4:
        raise NoEstimateError("too few positive samples to fit the decay exponent")
    order = np.argsort(ks)
    ks, mags, usable = ks[order], mags[order], usable[order]
    integrand = (1.0 + ks ** (2.0 * alpha)) * mags ** 2
    value = float(trapezoid(integrand, ks))
    fit_k, fit_m = ks[usable], mags[usable]
    upper = slice(fit_k.size // 2, None)
    slope, _ = np.polyfit(np.log(fit_k[upper]), np.log(fit_m[upper]), 1)
    p = -float(slope)
    return ContinuumNorm(value=value, decay_exponent=p, divergent=classify_divergence(alpha, p),
                         k_max=float(ks[-1]))


@dataclass(frozen=True, eq=False)
class SpectralField:
    """
    奇関数の実周期場 u(x) = Σ_{l>=1} (i v_l e^{i k_l x} + c.c.) = -2 Σ v_l sin(k_l x)、k_l = 2^{j0} l。
    """
    j0: int
    modes: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        arr = np.array(self.modes, dtype=float)
        arr.setflags(write=False)
        object.__setattr__(self, "modes", arr)

    @property
    def l_max(self) -> int:
        return int(self.modes.shape[0])

    @property
    def wavenumbers(self) -> np.ndarray:
        return 2.0 ** self.j0 * np.arange(1, self.l_max + 1)

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return -2.0 * np.sin(np.multiply.outer(x, self.wavenumbers)) @ self.modes

    @classmethod
    def from_profile(cls, profile: BurgersProfile, l_max: int, j0: int = 0) -> "SpectralField":
        """周期奇関数プロファイルの射影 v_l = -(1/P) ∫ f(x) sin(k_l x) dx。"""
        period = 2.0 * math.pi / 2.0 ** j0
        if profile.period is not None and not math.isclose(profile.period, period):
            raise ValueError(f"profile period {profile.period} does not match j0={j0}")
        m = max(8 * l_max, 64)
        x = np.arange(m) * (period / m)
        k = 2.0 ** j0 * np.arange(1, l_max + 1)
        v = -(np.sin(np.outer(k, x)) @ profile.f(x)) / m
        return cls(j0=j0, modes=v)


def galerkin_rhs_values(j0: int, v: np.ndarray) -> np.ndarray:
    """dv_l/dt = k_l Σ_n v_n v_{l-n}（v_{-n} = -v_n、|n| > L_max はゼロ）。"""
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    extended = np.concatenate((-v[::-1], [0.0], v))
    full = np.convolve(extended, extended)
    k = 2.0 ** j0 * np.arange(1, n + 1)
    return k * full[2 * n + 1:3 * n + 1]


def galerkin_rhs(field_: SpectralField) -> np.ndarray:
    return galerkin_rhs_values(field_.j0, field_.modes)


def galerkin_energy(field_: SpectralField) -> float:
    return float(np.dot(field_.modes, field_.modes))


def galerkin_integrate(field_: SpectralField, t_end: float,
                       config: Optional[IntegratorConfig] = None) -> Trajectory:
    """
    打ち切り Galerkin 系を積分します。この系は u_t + (u²)_x = 0 に対応し、
    時刻 t の解は特性曲線解の時刻 2t に一致します。
    """
    config = config or IntegratorConfig(t_end=t_end)
    if config.t_end != t_end:
        config = replace(config, t_end=t_end)
    j0 = field_.j0
    trajectory = integrate_system(lambda t, y: galerkin_rhs_values(j0, y), 0.0, field_.modes, config)
    drift = abs(float(np.dot(trajectory.amplitudes[-1], trajectory.amplitudes[-1])) - galerkin_energy(field_))
    logging.info(f"galerkin_integrate: L_max={field_.l_max}, t={trajectory.t_final:.6g}, "
                 f"energy drift={drift:.3e}")
    return trajectory


def field_at(trajectory: Trajectory, t: float, j0: int = 0) -> SpectralField:
    return SpectralField(j0=j0, modes=trajectory.values_at(t))


def _power_of_two_exponent(n: int) -> Optional[int]:
    if n <= 0 or n & (n - 1):
        return None
    return n.bit_length() - 1


@dataclass(frozen=True)
class DyadicLevel:
    m: int
    coefficients: Dict[Tuple[int, int], int]
    expected: Dict[Tuple[int, int], int]

    @property
    def ok(self) -> bool:
        return self.coefficients == self.expected


def _expected_pattern(m: int) -> Dict[Tuple[int, int], int]:
    # a_{j-1}^2 - 2 a_j a_{j+1}（ルートでは下の項がない）
    pattern = {(m, m + 1): -2}
    if m >= 1:
        pattern[(m - 1, m - 1)] = 1
    return pattern


def dyadic_projection_check(m_max: int) -> List[DyadicLevel]:
    """
    l = 2^m ごとに |n|, |l-n| がともに 2 の冪となる整数組を全列挙し、
    v_{-n} = -v_n を使って a の二次形式の係数を整数で集計します。
    キー (p, q) は a_{j0+p} a_{j0+q}（p <= q）を表します。
    """
    if m_max < 0:
        raise ValueError("m_max must be >= 0")
    bound = 2 ** (m_max + 1)
    levels = []
    for m in range(m_max + 1):
        l = 2 ** m
        coefficients: Counter = Counter()
        for n in range(-bound, bound + 1):
            p = _power_of_two_exponent(abs(n))
            q = _power_of_two_exponent(abs(l - n))
            if p is None or q is None:
                continue
            sign = (1 if n > 0 else -1) * (1 if l - n > 0 else -1)
            coefficients[tuple(sorted((p, q)))] += sign
        found = {key: c for key, c in coefficients.items() if c != 0}
        expected = _expected_pattern(m)
        levels.append(DyadicLevel(m=m, coefficients=found, expected=expected))
    failed = [lv.m for lv in levels if not lv.ok]
    if failed:
        logging.warning(f"dyadic_projection_check: pattern mismatch at m={failed}")
    return levels


def distinct_powers_never_sum_to_power(max_exponent: int) -> bool:
    """p ≠ q のとき 2^p + 2^q が 2 の冪にならないことを全列挙で確認します。"""
    for p in range(max_exponent + 1):
        for q in range(p + 1, max_exponent + 1):
            if _power_of_two_exponent(2 ** p + 2 ** q) is not None:
                return False
    return True
