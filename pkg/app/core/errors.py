from typing import List, Optional, Tuple


class LabError(Exception):
    """
    数値実験ラボ共通の例外基底クラスです。
    """


class ContractViolationError(LabError, ValueError):
    """パラメータや状態の前提条件違反（長さ不一致など）。"""


class NumericOverflowError(LabError, ArithmeticError):
    """
    振幅が非有限、または上限値を超えた場合に送出されます。
    爆発（blow-up）が近いことを示すシグナルとして積分器が捕捉します。
    """

    def __init__(self, message: str, non_finite: bool = False) -> None:
        super().__init__(message)
        self.non_finite = non_finite


class ShellIndexError(LabError, IndexError):
    """打ち切り範囲外のシェル番号が指定された場合。"""


class UnsupportedKindError(LabError, ValueError):
    """モデル種別に対して定義されていない操作。"""


class NoEstimateError(LabError):
    """フィットに必要なデータが不足している場合。"""


class AccuracyNotMetError(LabError):
    """
    求積が要求精度に到達しなかった場合。

    Attributes:
        estimate (complex): 到達した推定値。
        error (float): 誤差推定。
    """

    def __init__(self, message: str, estimate: complex, error: float) -> None:
        super().__init__(message)
        self.estimate = estimate
        self.error = error


class DivisionDomainError(LabError, ZeroDivisionError):
    """k = 0 のフーリエ係数など、式の定義域外。"""


class DegeneratePhaseError(LabError):
    """停留点で f''' = 0 となる非一般的な初期条件。"""


class RootFindingError(LabError):
    """特性曲線の根探索が収束しなかった場合。"""

    def __init__(self, message: str, bracket: Optional[Tuple[float, float]] = None) -> None:
        super().__init__(message)
        self.bracket = bracket


class ConfigError(LabError):
    """
    設定ファイルの構文エラー・範囲外・未知キーをまとめて保持します。

    Attributes:
        errors (List[Tuple[int, str]]): (行番号, メッセージ) のリスト。行番号 0 はファイル全体。
    """

    def __init__(self, errors: List[Tuple[int, str]]) -> None:
        self.errors = list(errors)
        lines = [f"line {line}: {msg}" if line else msg for line, msg in self.errors]
        super().__init__("; ".join(lines) if lines else "invalid configuration")
