# tests/conftest.py
import os

import pytest

from app.core.core_controller import CoreController
from app.core.settings import Settings

DATA_DIR = os.path.join(os.path.dirname(__file__), "..", "app", "data")
DEMO_CONFIG = os.path.join(DATA_DIR, "dyadic_burgers_demo.cfg")


@pytest.fixture(scope="session")
def demo_config():
    """同梱のダイアディック Burgers 設定（λ=2, N=40, a_0=1）。"""
    return Settings(DEMO_CONFIG, create_if_missing=False).config


@pytest.fixture(scope="session")
def demo_run(demo_config):
    """
    基準実行を 1 回だけ行い、(controller, trajectory, analysis) を共有します。
    """
    controller = CoreController(demo_config)
    trajectory = controller.simulate()
    analysis = controller.analyse(trajectory)
    return controller, trajectory, analysis
