import logging
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from clipos.backbone import ToyBackbone  # noqa: E402
from clipos.config import load_config  # noqa: E402
from clipos.data import SyntheticConfig, generate_synthetic  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.yaml"

# filled by test_acceptance.py, printed at the end of the session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR, logger="clipos")


@pytest.fixture(scope="session")
def toy():
    return ToyBackbone()


SMALL = dict(train_per_class=4, test_per_class=20, ood_per_set=30)


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    """Small synthetic benchmark rendered through the default toy backbone."""
    out = tmp_path_factory.mktemp("synthetic")
    return generate_synthetic(ToyBackbone(), out, SyntheticConfig(**SMALL))


def toy_config(roots, **sections):
    cfg = load_config(TOY_CONFIG)
    data = {"id_root": str(roots["id"]),
            "ood": [{"name": k, "root": str(v)} for k, v in roots.items() if k != "id"]}
    return cfg.replace(data=data, **sections)


@pytest.fixture
def cfg(synthetic, tmp_path):
    return toy_config(synthetic, output_dir=str(tmp_path / "runs"))
