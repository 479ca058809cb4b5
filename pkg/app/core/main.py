# app/core/main.py
import argparse
import logging
import sys
from typing import List, Optional

from app.core.errors import ConfigError, LabError
from app.core.logger_setup import LoggerSetup
from app.core.settings import RunConfig, Settings, load_grid, with_output_directory
from app.core.simulation_runner import run, sweep
from app.core.verification import run_checks

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="シェルモデルの有限時間爆発を数値検証するバッチツールです。")
    parser.add_argument("--mode", type=str, choices=["default", "debug"], default="default",
                        help="実行モードを選択します。debug: DEBUG レベルでログ出力")
    parser.add_argument("--log-dir", type=str, default=None, help="ログの出力先ディレクトリ")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="設定ファイルに従って 1 回実行します。")
    run_p.add_argument("config", type=str, help="設定ファイル（section.key = value 形式）")
    run_p.add_argument("--out", type=str, default=None, help="出力ディレクトリ（output.directory を上書き）")

    sweep_p = sub.add_parser("sweep", help="雛形設定をパラメータグリッドで掃引します。")
    sweep_p.add_argument("template", type=str, help="雛形設定ファイル")
    sweep_p.add_argument("--grid", type=str, required=True,
                         help="グリッド指定 'key=v1,v2;key2=...'、またはその内容を書いたファイル")
    sweep_p.add_argument("--out", type=str, default=None, help="出力ディレクトリ")
    sweep_p.add_argument("--workers", type=int, default=1, help="並列ワーカー数")

    check_p = sub.add_parser("check", help="組み込みの検証スイートを実行します。")
    check_p.add_argument("--seed", type=int, default=0, help="乱数を使うスイートのシード")
    check_p.add_argument("--suite", action="append", default=None, help="実行するスイート名（複数指定可）")
    return parser


def _load_config(path: str) -> RunConfig:
    return Settings(path, create_if_missing=False).config


def main(argv: Optional[List[str]] = None) -> int:
    """
    メイン関数:
      - サブコマンド run / sweep / check の解析
      - LoggerSetup によるログ設定
      - 例外を終了コード（0: 成功, 1: 設定エラー, 2: 数値的失敗, 3: 入出力失敗）に変換
    """
    args = build_parser().parse_args(argv)
    log_level = logging.DEBUG if args.mode == "debug" else logging.INFO
    LoggerSetup.setup_logging(log_level=log_level, log_dir=args.log_dir)
    logging.info(f"プログラム開始 (コマンド: {args.command}, モード: {args.mode})")

    try:
        if args.command == "run":
            config = _load_config(args.config)
            if args.out:
                config = with_output_directory(config, args.out)
            manifest = run(config)
            logging.info(f"run 完了: {manifest.termination}, {len(manifest.inventory)} files")
        elif args.command == "sweep":
            template = _load_config(args.template)
            cells = sweep(template, load_grid(args.grid), out_dir=args.out, workers=max(args.workers, 1))
            failed = [c for c in cells if c.row["status"] != "ok"]
            logging.info(f"sweep 完了: {len(cells)} cells, {len(failed)} failed")
        else:
            results = run_checks(seed=args.seed, names=args.suite)
            if not all(r.passed for r in results):
                logging.error("検証スイートに失敗があります。")
                return EXIT_NUMERIC
    except ConfigError as e:
        logging.error(f"設定エラー: {e}")
        return EXIT_CONFIG
    except (LabError, FloatingPointError) as e:
        logging.error(f"数値的な失敗: {e}")
        return EXIT_NUMERIC
    except OSError as e:
        logging.error(f"入出力エラー: {e}")
        return EXIT_IO
    finally:
        logging.info("プログラム終了")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
