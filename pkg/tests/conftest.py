import numpy as np
import pytest
import torch

from wris.config import desk_config
from wris.data import SyntheticSceneSpec, generate_synthetic, load_dataset


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """24 train / 6 val synthetic scenes on the desk canvas."""
    root = tmp_path_factory.mktemp("tiny_data")
    generate_synthetic(SyntheticSceneSpec(seed=3), root, {"train": 24, "val": 6})
    return root


@pytest.fixture
def tiny_config():
    return desk_config(hidden_dim=16, visual_dim=16, text_dim=16, batch=4, N=3, K=2, epochs=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) != "call":
                continue
            for key, value in getattr(rep, "user_properties", []):
                if key == "acceptance":
                    lines.append((rep.nodeid.rsplit("::", 1)[-1], value))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, value in sorted(lines):
            terminalreporter.write_line(f"{name}: {value}")
