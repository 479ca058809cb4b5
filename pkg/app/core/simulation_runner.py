import csv
import hashlib
import json
import logging
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime
from logging.handlers import QueueListener
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.core_controller import AnalysisResult, CoreController
from app.core.errors import LabError
from app.core.integrator import Trajectory
from app.core.logger_setup import LoggerSetup
from app.core.settings import RunConfig, describe_overrides, parse_config, render_config, with_output_directory
from app.core.shell_core import sobolev_norm_sq_series

TOOL_VERSION = "0.3.0"
SUMMARY_FILE = "sweep_summary.csv"
SUMMARY_COLUMNS = ("cell", "directory", "status", "termination", "t_star", "deepest_crossing",
                   "cascade_floor", "all_satisfied", "valid_req", "valid_bucond")


@dataclass
class RunManifest:
    """
    実行の記録です。出力したファイルはすべて inventory に sha256 付きで載ります。
    """
    config_hash: str
    tool_version: str
    started_at: str
    finished_at: str = ""
    termination: Optional[str] = None
    status: str = "running"
    error: Optional[str] = None
    inventory: Dict[str, str] = field(default_factory=dict)


def file_digest(path: str) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            sha.update(chunk)
    return sha.hexdigest()


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(render_config(config).encode("utf-8")).hexdigest()


def _num(value: Optional[float]) -> str:
    """数値を往復可能な最短表現で出力します。"""
    if value is None:
        return ""
    return repr(float(value))


def _bool(value: Optional[bool]) -> str:
    if value is None:
        return "unresolved"
    return "true" if value else "false"


def _sample_rows(trajectory: Trajectory, stride: int) -> np.ndarray:
    rows = np.arange(0, len(trajectory.times), stride)
    if rows[-1] != len(trajectory.times) - 1:
        rows = np.append(rows, len(trajectory.times) - 1)
    return rows


class SimulationRunner:
    """
    設定に従ってシミュレーションと解析を実行し、結果ファイルとマニフェストを保存するクラスです。
    """

    def __init__(self, config: RunConfig) -> None:
        """
        Args:
            config (RunConfig): 検証済みの実行設定。
        """
        self.config = config
        self.out_dir: str = config.output.directory
        self.controller = CoreController(config)
        self.manifest = RunManifest(config_hash=config_hash(config), tool_version=TOOL_VERSION,
                                    started_at=datetime.now().isoformat(timespec="seconds"))

    def run(self) -> RunManifest:
        """
        積分・解析・ファイル出力を行い、マニフェストを返します。

        Raises:
            LabError: 数値的な前提条件違反（モデル・初期状態の不整合など）。
            OSError: 書き込みに失敗した場合（部分マニフェストを残してから送出）。
        """
        logging.info(f"run: output directory {self.out_dir}")
        try:
            os.makedirs(self.out_dir, exist_ok=True)
            trajectory = self.controller.simulate()
            self.manifest.termination = trajectory.termination.value
            rows = _sample_rows(trajectory, self.config.output.stride)
            formats = self.config.output.formats
            self.write_trajectory(trajectory, rows)

            if self.config.analysis.enabled:
                result = self.controller.analyse(trajectory)
                if "csv" in formats:
                    self.write_diagnostics(trajectory, rows)
                    self.write_crossings(result)
                if "json" in formats:
                    self.write_report(self.controller.summary(trajectory, result))
                if "plot" in formats:
                    self.write_plot_script()
            self.manifest.status = "ok"
        except OSError as e:
            logging.exception(f"run: IO failure: {e}")
            self.manifest.status = "io_failure"
            self.manifest.error = str(e)
            self._finish()
            raise
        except LabError as e:
            logging.exception(f"run: numeric failure: {e}")
            self.manifest.status = "numeric_failure"
            self.manifest.error = str(e)
            self._finish()
            raise
        self._finish()
        return self.manifest

    def _path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def _record(self, name: str) -> None:
        self.manifest.inventory[name] = file_digest(self._path(name))
        logging.info(f"結果ファイルを保存しました: {self._path(name)}")

    def _write_csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
        with open(self._path(name), "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        self._record(name)

    def write_trajectory(self, trajectory: Trajectory, rows: np.ndarray) -> None:
        shells = range(trajectory.j0, trajectory.j0 + trajectory.n_shells)
        header = ["t"] + [f"a_{j}" for j in shells]
        body = [[_num(trajectory.times[i])] + [_num(x) for x in trajectory.amplitudes[i]] for i in rows]
        self._write_csv("trajectory.csv", header, body)

    def write_diagnostics(self, trajectory: Trajectory, rows: np.ndarray) -> None:
        a = self.config.analysis
        j0 = trajectory.j0
        shells = list(a.tail_shells) or list(range(j0, j0 + trajectory.n_shells))
        amplitudes = trajectory.amplitudes[rows]
        sq = amplitudes ** 2
        tails = np.cumsum(sq[:, ::-1], axis=1)[:, ::-1]
        norms = [sobolev_norm_sq_series(amplitudes, j0, alpha, self.controller.mu) for alpha in a.alpha]
        header = ["t", "energy"] + [f"tail_{j}" for j in shells] + [f"h_alpha_sq_{alpha!r}" for alpha in a.alpha]
        body = []
        for n, i in enumerate(rows):
            line = [_num(trajectory.times[i]), _num(np.sum(sq[n]))]
            line += [_num(tails[n, j - j0]) for j in shells]
            line += [_num(series[n]) for series in norms]
            body.append(line)
        self._write_csv("diagnostics.csv", header, body)

    def write_crossings(self, result: AnalysisResult) -> None:
        body = []
        if result.report is not None:
            body = [[str(e.k), _num(e.t_k), _num(e.bound), _bool(e.satisfied)] for e in result.report.entries]
        self._write_csv("crossings.csv", ["k", "t_k", "bound", "satisfied"], body)

    def write_report(self, data: Dict[str, Any]) -> None:
        with open(self._path("report.json"), "w", encoding="utf-8") as f:
            json.dump(data, f, indent=4, ensure_ascii=False)
        self._record("report.json")

    def write_plot_script(self) -> None:
        lam = self.controller.params.lambda_
        alphas = list(self.config.analysis.alpha)
        script = PLOT_TEMPLATE.format(lam=repr(lam), alphas=repr([repr(a) for a in alphas]))
        with open(self._path("plot_results.py"), "w", encoding="utf-8") as f:
            f.write(script)
        self._record("plot_results.py")

    def _finish(self) -> None:
        self.manifest.finished_at = datetime.now().isoformat(timespec="seconds")
        try:
            with open(self._path("manifest.json"), "w", encoding="utf-8") as f:
                json.dump(asdict(self.manifest), f, indent=4, ensure_ascii=False)
        except OSError as e:
            logging.error(f"マニフェストの保存に失敗しました: {e}")


def run(config: RunConfig) -> RunManifest:
    """設定 1 件を実行してマニフェストを返します。"""
    return SimulationRunner(config).run()


PLOT_TEMPLATE = '''"""trajectory.csv と diagnostics.csv からスペクトルとノルム成長を描画します。"""
import csv
import os

import matplotlib.pyplot as plt
import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))
LAMBDA = {lam}
ALPHAS = {alphas}


def load(name):
    with open(os.path.join(HERE, name), encoding="utf-8") as f:
        rows = list(csv.reader(f))
    return rows[0], np.array([[float(x) for x in row] for row in rows[1:]])


def main():
    header, traj = load("trajectory.csv")
    shells = np.array([int(h.split("_")[1]) for h in header[1:]])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4.5))
    for idx in np.linspace(0, len(traj) - 1, 6).astype(int):
        spectrum = traj[idx, 1:] ** 2
        ax1.loglog(LAMBDA ** shells, np.maximum(spectrum, 1e-300), marker="o", ms=3,
                   label=f"t={{traj[idx, 0]:.4g}}")
    ax1.set_xlabel("k = lambda^j")
    ax1.set_ylabel("a_j^2")
    ax1.legend(fontsize=8)
    if os.path.exists(os.path.join(HERE, "diagnostics.csv")):
        dh, diag = load("diagnostics.csv")
        for alpha in ALPHAS:
            col = dh.index("h_alpha_sq_" + alpha)
            ax2.semilogy(diag[:, 0], diag[:, col], label="alpha=" + alpha)
        ax2.set_xlabel("t")
        ax2.set_ylabel("||a||^2_H^alpha")
        ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(HERE, "plot_results.png"), dpi=150)


if __name__ == "__main__":
    main()
'''


@dataclass
class SweepCell:
    row: Dict[str, str]
    manifest: Optional[RunManifest] = None


def _run_cell(task: Tuple[int, str, Dict[str, str], str]) -> SweepCell:
    """スイープの 1 セルを実行し、集計行を返します（プロセスプールから呼ばれる）。"""
    index, template_text, overrides, directory = task
    row = {"cell": str(index), "directory": directory, "status": "ok", "termination": "",
           "t_star": "", "deepest_crossing": "", "cascade_floor": "", "all_satisfied": "",
           "valid_req": "", "valid_bucond": ""}
    row.update(overrides)
    manifest = None
    try:
        config = with_output_directory(parse_config(template_text, overrides), directory)
        runner = SimulationRunner(config)
        c = runner.controller.constants
        row["valid_req"] = _bool(c.valid_req)
        row["valid_bucond"] = _bool(c.valid_bucond)
        manifest = runner.run()
        row["termination"] = manifest.termination or ""
        report_path = os.path.join(directory, "report.json")
        if os.path.exists(report_path):
            with open(report_path, "r", encoding="utf-8") as f:
                report = json.load(f)
            fit = report.get("blowup_fit") or {}
            row["t_star"] = _num(fit.get("t_star"))
            cascade = report.get("cascade") or {}
            if cascade:
                row["deepest_crossing"] = str(cascade.get("resolved", ""))
                floor = cascade.get("floor")
                row["cascade_floor"] = "" if floor is None else str(floor)
                row["all_satisfied"] = _bool(cascade.get("all_satisfied"))
    except Exception as e:
        logging.exception(f"sweep cell {index} failed: {e}")
        row["status"] = f"failed: {type(e).__name__}: {e}"
    return SweepCell(row=row, manifest=manifest)


def _run_parallel(tasks: List[Tuple[int, str, Dict[str, str], str]], workers: int) -> List[SweepCell]:
    """ワーカーのログをキュー経由で親プロセスのハンドラに集めながらセルを並列実行します。"""
    root = logging.getLogger()
    with multiprocessing.Manager() as manager:
        queue = manager.Queue()
        listener = QueueListener(queue, *root.handlers, respect_handler_level=True)
        listener.start()
        try:
            with ProcessPoolExecutor(max_workers=workers, initializer=LoggerSetup.setup_worker_logging,
                                     initargs=(queue, root.level)) as pool:
                return list(pool.map(_run_cell, tasks))
        finally:
            listener.stop()


def sweep(template: RunConfig, grid: List[Dict[str, str]], out_dir: Optional[str] = None,
          workers: int = 1) -> List[SweepCell]:
    """
    グリッドの各セルを独立に実行し、sweep_summary.csv に集計します。
    セル単位の失敗は記録して続行します。

    Args:
        template (RunConfig): 雛形設定。
        grid (List[Dict[str, str]]): parse_grid の結果。
        out_dir (Optional[str]): 出力先（None なら雛形の output.directory）。
        workers (int): 並列ワーカー数（1 なら逐次実行）。

    Returns:
        List[SweepCell]: セルごとの集計行とマニフェスト（グリッド順）。失敗セルのマニフェストは None。
    """
    out_dir = out_dir or template.output.directory
    os.makedirs(out_dir, exist_ok=True)
    keys = list(grid[0]) if grid else []
    text = render_config(template)
    tasks = []
    for index, cell in enumerate(grid):
        name = f"cell_{index:03d}_{describe_overrides(cell, keys)}"
        tasks.append((index, text, cell, os.path.join(out_dir, name)))
    logging.info(f"sweep: {len(tasks)} cells, workers={workers}, output {out_dir}")

    if workers > 1 and len(tasks) > 1:
        cells = _run_parallel(tasks, workers)
    else:
        cells = [_run_cell(task) for task in tasks]
    rows = [cell.row for cell in cells]

    columns = list(SUMMARY_COLUMNS[:2]) + keys + list(SUMMARY_COLUMNS[2:])
    with open(os.path.join(out_dir, SUMMARY_FILE), "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    failed = sum(1 for r in rows if r["status"] != "ok")
    logging.info(f"sweep: finished ({len(rows) - failed} ok, {failed} failed)")
    return cells
