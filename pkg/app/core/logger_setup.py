import logging
import os
from logging.handlers import QueueHandler, RotatingFileHandler
from typing import Optional

DEFAULT_LOG_DIR = os.path.join(os.path.dirname(__file__), "..", "log")


class LoggerSetup:
    """
    ルートロガーの設定を行うクラスです。
    ログは log_dir 内の app.log（ローテーション付き）とコンソールに出力されます。
    """
    @staticmethod
    def setup_logging(log_level: int = logging.INFO, log_dir: Optional[str] = None,
                      console: bool = True) -> str:
        """
        Args:
            log_level (int): ログレベル。
            log_dir (Optional[str]): ログディレクトリ。None なら app/log。
            console (bool): コンソールにも出力するか。

        Returns:
            str: ログファイルのパス。
        """
        log_dir = log_dir or DEFAULT_LOG_DIR
        os.makedirs(log_dir, exist_ok=True)
        log_file = os.path.join(log_dir, "app.log")

        logger = logging.getLogger()
        logger.setLevel(log_level)
        formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

        # 再設定時に二重出力しないよう既存ハンドラを外す
        for handler in logger.handlers[:]:
            logger.removeHandler(handler)
            handler.close()

        file_handler = RotatingFileHandler(log_file, maxBytes=10 * 1024 * 1024, backupCount=5, encoding="utf-8")
        file_handler.setLevel(log_level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

        if console:
            stream_handler = logging.StreamHandler()
            stream_handler.setLevel(log_level)
            stream_handler.setFormatter(formatter)
            logger.addHandler(stream_handler)
        return log_file

    @staticmethod
    def setup_worker_logging(queue, log_level: int = logging.INFO) -> None:
        """
        ワーカープロセスのルートロガーを QueueHandler に付け替えます。
        レコードは親プロセスの QueueListener が親のハンドラ（app.log など）へ書き出します。

        Args:
            queue: 親プロセスと共有するキュー。
            log_level (int): ログレベル。
        """
        logger = logging.getLogger()
        for handler in logger.handlers[:]:
            logger.removeHandler(handler)
        logger.addHandler(QueueHandler(queue))
        logger.setLevel(log_level)
