"""
测试公共夹具
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# 添加项目根目录到路径
project_root = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(project_root))


@pytest.fixture
def rng():
    """每个测试独立的确定性随机源"""
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _isolated_settings(monkeypatch, tmp_path):
    """测试不读取项目 settings.json 与外部环境变量"""
    missing = tmp_path / "no_settings.json"
    monkeypatch.setenv("SGUMLP_SETTINGS", str(missing))
    monkeypatch.delenv("SGUMLP_LOG_LEVEL", raising=False)
