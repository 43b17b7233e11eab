import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from core.cell_model import HybridModel, state_at_soc  # noqa: E402
from core.params import load_params  # noqa: E402
from core.reference_cell import load_reference_cell  # noqa: E402

CONFIG_DIR = Path(__file__).parent.parent / "config"


@pytest.fixture(scope="session")
def params():
    return load_params(CONFIG_DIR / "default_params.json")


@pytest.fixture(scope="session")
def physics_model(params):
    return HybridModel.physics(params)


@pytest.fixture(scope="session")
def reference_cell():
    return load_reference_cell(CONFIG_DIR / "reference_cell.json")


@pytest.fixture
def fresh_state(params):
    return state_at_soc(params, 1.0)
