import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import (
    ContractViolationError,
    NumericOverflowError,
    ShellIndexError,
    UnsupportedKindError,
)

# 振幅がこの値を超えたら RHS 評価を打ち切る
OVERFLOW_AMPLITUDE = 1e150

KP_LAMBDA = 2.0
FP_LAMBDA = 2.0 ** 2.5


class ModelKind(Enum):
    GENERIC_CHAIN = "generic"
    KATZ_PAVLOVIC_CHAIN = "kp"
    FRIEDLANDER_PAVLOVIC = "fp"
    OBUKHOV = "obukhov"

    @property
    def is_chain(self) -> bool:
        return self is not ModelKind.OBUKHOV


@dataclass(frozen=True)
class Viscosity:
    """ν_j = nu * λ^(exponent * j) で与えられる波数依存の粘性。"""
    nu: float = 0.0
    exponent: float = 2.0


@dataclass(frozen=True)
class ModelParams:
    """
    チェーンモデル族のパラメータです。

    Attributes:
        kind (ModelKind): モデル種別。
        lambda_ (float): 波数比 λ (> 1)。
        j0 (int): ルートシェルの絶対番号。
        n_shells (int): 打ち切りシェル数 N (>= 2)。
        lhs_scale (float): 左辺 d a_j/dt に掛かる時間スケール係数。
        viscosity (Optional[Viscosity]): Obukhov モデルのみ。
    """
    kind: ModelKind
    lambda_: float
    j0: int
    n_shells: int
    lhs_scale: float
    viscosity: Optional[Viscosity] = None

    def __post_init__(self) -> None:
        if not self.lambda_ > 1.0:
            raise ContractViolationError(f"lambda must be > 1 (got {self.lambda_})")
        if self.n_shells < 2:
            raise ContractViolationError(f"n_shells must be >= 2 (got {self.n_shells})")
        if not self.lhs_scale > 0.0:
            raise ContractViolationError(f"lhs_scale must be > 0 (got {self.lhs_scale})")
        if self.kind is ModelKind.KATZ_PAVLOVIC_CHAIN and not math.isclose(self.lambda_, KP_LAMBDA):
            raise ContractViolationError(f"KP chain forces lambda = 2 (got {self.lambda_})")
        if self.kind is ModelKind.FRIEDLANDER_PAVLOVIC and not math.isclose(self.lambda_, FP_LAMBDA):
            raise ContractViolationError(f"FP model forces lambda = 2^(5/2) (got {self.lambda_})")
        if self.viscosity is not None:
            if self.kind is not ModelKind.OBUKHOV:
                raise ContractViolationError("viscosity is only defined for the Obukhov model")
            if self.viscosity.nu < 0.0:
                raise ContractViolationError(f"nu must be >= 0 (got {self.viscosity.nu})")

    @classmethod
    def create(cls, kind: ModelKind, n_shells: int, j0: int = 0,
               lambda_: Optional[float] = None, viscosity: Optional[Viscosity] = None,
               lhs_scale: Optional[float] = None) -> "ModelParams":
        """
        種別ごとに固定される λ と左辺係数を補完して ModelParams を生成します。
        """
        if kind is ModelKind.KATZ_PAVLOVIC_CHAIN:
            lam = KP_LAMBDA if lambda_ is None else lambda_
            default_scale = 8.0
        elif kind is ModelKind.FRIEDLANDER_PAVLOVIC:
            lam = FP_LAMBDA if lambda_ is None else lambda_
            default_scale = 2.0
        elif kind is ModelKind.OBUKHOV:
            lam = KP_LAMBDA if lambda_ is None else lambda_
            default_scale = lam ** (1.0 / 3.0)
        else:
            lam = KP_LAMBDA if lambda_ is None else lambda_
            default_scale = 1.0
        if lhs_scale is not None and kind is not ModelKind.GENERIC_CHAIN \
                and not math.isclose(lhs_scale, default_scale):
            raise ContractViolationError(
                f"lhs_scale is fixed to {default_scale} for kind {kind.value} (got {lhs_scale})")
        return cls(kind=kind, lambda_=lam, j0=j0, n_shells=n_shells,
                   lhs_scale=default_scale if lhs_scale is None else lhs_scale,
                   viscosity=viscosity)

    @cached_property
    def shell_indices(self) -> np.ndarray:
        return np.arange(self.j0, self.j0 + self.n_shells)

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """λ^j のテーブル（exp(j ln λ) で一度だけ計算）。"""
        table = np.exp(self.shell_indices * math.log(self.lambda_))
        table.setflags(write=False)
        return table

    @cached_property
    def viscosity_coefficients(self) -> np.ndarray:
        if self.viscosity is None or self.viscosity.nu == 0.0:
            table = np.zeros(self.n_shells)
        else:
            table = self.viscosity.nu * np.exp(
                self.viscosity.exponent * self.shell_indices * math.log(self.lambda_))
        table.setflags(write=False)
        return table

    @property
    def time_factor(self) -> float:
        # チェーン系は c da/dt = (...)、Obukhov は (1/c) da/dt = (...)
        if self.kind is ModelKind.OBUKHOV:
            return self.lhs_scale
        return 1.0 / self.lhs_scale

    @property
    def last_shell(self) -> int:
        return self.j0 + self.n_shells - 1

    def offset(self, j: int) -> int:
        """絶対シェル番号 j を配列オフセットに変換します。"""
        if not self.j0 <= j <= self.last_shell:
            raise ShellIndexError(f"shell {j} outside truncation [{self.j0}, {self.last_shell}]")
        return j - self.j0


@dataclass(frozen=True, eq=False)
class ShellState:
    """
    時刻 t とシェル振幅列 a（a[i] が a_{j0+i}）を保持する不変レコードです。
    """
    t: float
    a: np.ndarray = field(repr=False)
    j0: int = 0

    def __post_init__(self) -> None:
        arr = np.array(self.a, dtype=float)
        if arr.ndim != 1:
            raise ContractViolationError("amplitudes must be a one-dimensional sequence")
        arr.setflags(write=False)
        object.__setattr__(self, "a", arr)

    @classmethod
    def zeros(cls, params: ModelParams, t: float = 0.0) -> "ShellState":
        return cls(t=t, a=np.zeros(params.n_shells), j0=params.j0)

    @classmethod
    def single_shell(cls, params: ModelParams, j: int, amplitude: float,
                     t: float = 0.0) -> "ShellState":
        a = np.zeros(params.n_shells)
        a[params.offset(j)] = amplitude
        return cls(t=t, a=a, j0=params.j0)

    @property
    def n_shells(self) -> int:
        return int(self.a.shape[0])

    def amplitude(self, j: int) -> float:
        i = j - self.j0
        if not 0 <= i < self.n_shells:
            raise ShellIndexError(f"shell {j} outside truncation")
        return float(self.a[i])


def _check_conforms(params: ModelParams, a: np.ndarray) -> None:
    if a.shape != (params.n_shells,):
        raise ContractViolationError(
            f"state has {a.shape[0] if a.ndim else 0} shells, params expect {params.n_shells}")
    if not np.all(np.isfinite(a)):
        raise NumericOverflowError("non-finite amplitude", non_finite=True)
    peak = float(np.max(np.abs(a)))
    if peak > OVERFLOW_AMPLITUDE:
        raise NumericOverflowError(f"amplitude {peak:.3e} exceeds {OVERFLOW_AMPLITUDE:.0e}")


def rhs_values(params: ModelParams, a: np.ndarray) -> np.ndarray:
    """
    振幅配列に対する時間微分を返します（積分器のホットパス）。
    打ち切り境界では a_{j0-1} = a_{j0+N} = 0 とします。
    """
    a = np.asarray(a, dtype=float)
    _check_conforms(params, a)
    lam_j = params.wavenumbers
    a_prev = np.concatenate(([0.0], a[:-1]))
    a_next = np.concatenate((a[1:], [0.0]))
    if params.kind is ModelKind.OBUKHOV:
        bracket = (lam_j * a_prev * a - lam_j * params.lambda_ * a_next * a_next
                   - params.viscosity_coefficients * a)
    else:
        bracket = lam_j * a_prev * a_prev - lam_j * params.lambda_ * a * a_next
    return params.time_factor * bracket


def rhs(params: ModelParams, state: ShellState) -> np.ndarray:
    """
    モデルの右辺 da/dt を計算します。

    Args:
        params (ModelParams): モデルパラメータ。
        state (ShellState): 現在の状態。

    Returns:
        np.ndarray: 各シェルの da_j/dt。

    Raises:
        ContractViolationError: 状態の長さや j0 がパラメータと一致しない場合。
        NumericOverflowError: 振幅が非有限、または 1e150 を超えた場合。
    """
    if state.j0 != params.j0:
        raise ContractViolationError(f"state j0={state.j0} but params j0={params.j0}")
    return rhs_values(params, state.a)


def energy(state: ShellState) -> float:
    return float(np.dot(state.a, state.a))


def tail_energy(state: ShellState, j: int) -> float:
    """E_B(j) = Σ_{l>=j} a_l^2（打ち切り範囲内）。"""
    i = j - state.j0
    if not 0 <= i < state.n_shells:
        raise ShellIndexError(f"shell {j} outside truncation [{state.j0}, {state.j0 + state.n_shells - 1}]")
    tail = state.a[i:]
    return float(np.dot(tail, tail))


def tail_energies(a: np.ndarray) -> np.ndarray:
    """全シェルの E_B(j) を一度に計算します（逆順累積和）。"""
    sq = np.asarray(a, dtype=float) ** 2
    return np.cumsum(sq[::-1])[::-1]


def tail_flux(params: ModelParams, state: ShellState, j: int) -> float:
    """
    d/dt E_B(j) = 2 λ^j a_{j-1}^2 a_j / lhs_scale （チェーン系のみ）。
    """
    if not params.kind.is_chain:
        raise UnsupportedKindError("tail_flux is defined for chain kinds; use obukhov_flux for Obukhov")
    if not params.j0 < j <= params.last_shell:
        raise ShellIndexError(f"tail_flux needs j0 < j < j0+N (got {j})")
    i = params.offset(j)
    return 2.0 * params.wavenumbers[i] * state.a[i - 1] ** 2 * state.a[i] * params.time_factor


def sobolev_norm_sq(state: ShellState, alpha: float, mu: float) -> float:
    """||a||^2_{H^α} = Σ_j (1 + μ^{2αj}) a_j^2（j は絶対シェル番号）。"""
    j = np.arange(state.j0, state.j0 + state.n_shells)
    weights = 1.0 + np.exp(2.0 * alpha * j * math.log(mu))
    return float(np.sum(weights * state.a ** 2))


def sobolev_norm_sq_series(amplitudes: np.ndarray, j0: int, alpha: float, mu: float) -> np.ndarray:
    """時系列（行 = サンプル）に対する sobolev_norm_sq。"""
    amplitudes = np.atleast_2d(amplitudes)
    j = np.arange(j0, j0 + amplitudes.shape[1])
    weights = 1.0 + np.exp(2.0 * alpha * j * math.log(mu))
    return (amplitudes ** 2) @ weights


def kp_wavelet_norm_lower_bound_sq(state: ShellState, alpha: float, j0: int) -> float:
    """KP ウェーブレットノルムの下界 2^{-3 j0} Σ 2^{2αj} a_j^2。"""
    j = np.arange(state.j0, state.j0 + state.n_shells)
    return float(2.0 ** (-3.0 * j0) * np.sum(np.exp(2.0 * alpha * j * math.log(2.0)) * state.a ** 2))


def kp_amplitudes_to_chain(u: Sequence[float], j0: int) -> np.ndarray:
    """a_j = 2^{3j/2} u_j （u[0] が u_{j0}）。"""
    u = np.asarray(u, dtype=float)
    j = np.arange(j0, j0 + u.shape[0])
    return u * 2.0 ** (1.5 * j)


def chain_to_kp_amplitudes(a: Sequence[float], j0: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    j = np.arange(j0, j0 + a.shape[0])
    return a * 2.0 ** (-1.5 * j)


def kp_total_energy(u: Sequence[float], j0: int) -> float:
    """対称 KP 枝の全エネルギー 2^{-3 j0} Σ 2^{3j} u_j^2。"""
    u = np.asarray(u, dtype=float)
    j = np.arange(j0, j0 + u.shape[0])
    return float(2.0 ** (-3.0 * j0) * np.sum(2.0 ** (3.0 * j) * u ** 2))


def energy_spectrum(params: ModelParams, state: ShellState) -> List[Tuple[float, float]]:
    """スペクトルスナップショット用の (λ^j, a_j^2) の組。"""
    return [(float(k), float(a * a)) for k, a in zip(params.wavenumbers, state.a)]


def obukhov_viscous_dissipation(params: ModelParams, state: ShellState, j: int) -> float:
    """Obukhov のテール収支における粘性項 time_factor * Σ_{l>=j} ν_l a_l^2。"""
    if params.kind is not ModelKind.OBUKHOV:
        raise UnsupportedKindError("viscous dissipation is only defined for the Obukhov model")
    i = params.offset(j)
    nu = params.viscosity_coefficients[i:]
    return float(params.time_factor * np.sum(nu * state.a[i:] ** 2))


def check_positivity(amplitudes: np.ndarray, tolerance: float) -> bool:
    """全サンプルで最小振幅が -tolerance 以上かを返します。"""
    low = float(np.min(amplitudes))
    if low < -tolerance:
        logging.warning(f"Positivity violated: min amplitude {low:.3e} < {-tolerance:.3e}")
        return False
    return True
