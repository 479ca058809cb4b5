import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from app.core.blowup_lab import (
    BlowupConstants,
    BlowupFit,
    CrossingReport,
    cascade_events,
    cascade_floor,
    estimate_blowup_time,
    fp_constants,
    kp_constants,
    norm_divergence_certificate,
    obukhov_powerlaw_state,
    pick_constants,
    seed_condition_state,
    verify_lemma_cascade,
)
from app.core.errors import LabError
from app.core.integrator import IntegratorConfig, Trajectory, energy_series, integrate
from app.core.settings import RunConfig
from app.core.shell_core import ModelKind, ModelParams, ShellState, Viscosity, check_positivity

POSITIVITY_TOLERANCE = 1e-11


@dataclass
class AnalysisResult:
    """1 回の実行で得られた解析結果の集まりです。"""
    constants: BlowupConstants
    floor: Optional[int] = None
    report: Optional[CrossingReport] = None
    reports_checked: List[int] = field(default_factory=list)
    certificate: List[Tuple[int, float, float, float]] = field(default_factory=list)
    fit: Optional[BlowupFit] = None
    fit_error: Optional[str] = None
    energy_drift: float = 0.0
    positive: Optional[bool] = None


class CoreController:
    """
    RunConfig からモデル・初期状態・積分設定を組み立て、積分と解析を実行する窓口クラスです。
    """

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        self.params = self.build_params()
        self.constants = self.build_constants()

    def build_params(self) -> ModelParams:
        m = self.config.model
        kind = ModelKind(m.kind)
        viscosity = Viscosity(m.nu, m.viscosity_exponent) if kind is ModelKind.OBUKHOV and m.nu > 0.0 else None
        return ModelParams.create(kind, m.n_shells, j0=m.j0, lambda_=m.lambda_,
                                  viscosity=viscosity, lhs_scale=m.lhs_scale)

    @property
    def mu(self) -> float:
        return self.config.analysis.mu if self.config.analysis.mu is not None else self.params.lambda_

    def build_constants(self) -> BlowupConstants:
        a = self.config.analysis
        if a.epsilon is not None:
            if self.params.kind is ModelKind.FRIEDLANDER_PAVLOVIC:
                return fp_constants(a.epsilon)
            return kp_constants(a.epsilon)
        return pick_constants(self.params.lambda_, self.mu, a.alpha[0], a.delta)

    def default_seed_shell(self) -> int:
        """q^J <= 1 となる最小のシェル（打ち切り範囲内）。"""
        if self.config.analysis.J is not None:
            return self.config.analysis.J
        return max(self.params.j0, 0) if self.constants.q < 1.0 else self.params.j0

    def build_initial_state(self) -> ShellState:
        i = self.config.initial
        params = self.params
        if i.kind == "single_shell":
            shell = params.j0 if i.shell is None else i.shell
            return ShellState.single_shell(params, shell, i.amplitude)
        if i.kind == "seed":
            J = self.default_seed_shell() if i.J is None else i.J
            q = self.constants.q if i.q is None else i.q
            return seed_condition_state(params, J, q, i.energy)
        if i.kind == "powerlaw":
            return obukhov_powerlaw_state(params, i.flux)
        return ShellState(t=0.0, a=list(i.values), j0=params.j0)

    def build_integrator_config(self) -> IntegratorConfig:
        g = self.config.integrator
        events = ()
        if self.config.analysis.lemma_cascade and self.params.kind.is_chain:
            # しきい値 q^j はシェル j のみで決まるので、全 J の検証を一度のイベント登録で賄える
            events = cascade_events(self.params, self.constants, self.params.j0)
        return IntegratorConfig(rel_tol=g.rel_tol, abs_tol=g.abs_tol, max_step=g.max_step,
                                t_end=g.t_end, stop_norm=g.stop_norm, max_steps=g.max_steps,
                                min_step=g.min_step, stop_tail_fraction=g.stop_tail_fraction,
                                events=events)

    def simulate(self) -> Trajectory:
        initial = self.build_initial_state()
        return integrate(self.params, initial, self.build_integrator_config())

    def analyse(self, trajectory: Trajectory) -> AnalysisResult:
        """
        有効化された解析（カスケード検証・ノルム証明・t* フィット）を実行します。
        個々の解析の失敗は結果に記録し、例外として伝播させません。
        """
        a = self.config.analysis
        result = AnalysisResult(constants=self.constants)
        energies = energy_series(trajectory)
        if energies[0] > 0.0:
            result.energy_drift = float(np.max(np.abs(energies - energies[0])) / energies[0])
        if self.params.kind.is_chain:
            result.positive = check_positivity(trajectory.amplitudes, POSITIVITY_TOLERANCE)

        if (a.lemma_cascade or a.norm_certificate) and self.params.kind.is_chain:
            if a.J is not None:
                result.report = verify_lemma_cascade(trajectory, self.constants, a.J)
                result.reports_checked = [a.J]
                if result.report.all_satisfied and result.report.depth > 0:
                    result.floor = a.J
            else:
                floor, reports = cascade_floor(trajectory, self.constants)
                result.floor = floor
                result.reports_checked = sorted(reports)
                if floor is not None:
                    result.report = reports[floor]
                elif reports:
                    result.report = reports[min(reports)]
            if a.norm_certificate and result.report is not None:
                result.certificate = norm_divergence_certificate(trajectory, self.constants, result.report)

        if a.blowup_fit:
            try:
                result.fit = estimate_blowup_time(trajectory, a.alpha[0], self.mu)
            except LabError as e:
                logging.warning(f"blow-up fit skipped: {e}")
                result.fit_error = str(e)
        return result

    def summary(self, trajectory: Trajectory, result: AnalysisResult) -> Dict[str, Any]:
        """report.json 用の構造化データを作成します。"""
        c = result.constants
        report = result.report
        data: Dict[str, Any] = {
            "model": {"kind": self.params.kind.value, "lambda": self.params.lambda_,
                      "j0": self.params.j0, "n_shells": self.params.n_shells,
                      "lhs_scale": self.params.lhs_scale},
            "termination": trajectory.termination.value,
            "t_final": trajectory.t_final,
            "accepted_steps": trajectory.accepted_steps,
            "rejected_steps": trajectory.rejected_steps,
            "events": [{"t": e.t, "kind": e.kind, "shell": e.shell, "value": e.value}
                       for e in trajectory.events],
            "energy_relative_drift": result.energy_drift,
            "positivity": result.positive,
            "constants": {"lambda": c.lambda_, "mu": c.mu, "alpha": c.alpha, "delta": c.delta,
                          "q": c.q, "rho": c.rho, "valid_req": c.valid_req,
                          "valid_bucond": c.valid_bucond},
            "cascade": None,
            "certificate": [{"k": k, "t_k": t, "lower_bound": b, "measured": m}
                            for k, t, b, m in result.certificate],
            "blowup_fit": None,
        }
        if report is not None:
            depth = report.depth
            data["cascade"] = {
                "J": report.J, "floor": result.floor, "checked": result.reports_checked,
                "seed_time": report.seed_time, "max_k": report.max_k, "resolved": depth,
                "all_satisfied": report.all_satisfied,
                "cumulative_bound": report.cumulative_bound(depth) if depth else 0.0,
            }
        if result.fit is not None:
            f = result.fit
            data["blowup_fit"] = {"t_star": f.t_star, "gamma": f.gamma, "rms_residual": f.rms_residual,
                                  "window": list(f.window), "n_points": f.n_points}
        elif result.fit_error is not None:
            data["blowup_fit"] = {"error": result.fit_error}
        return _json_safe(data)


def _json_safe(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value
