import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def tmp_out(tmp_path, monkeypatch):
    """Output directory wired through the environment override."""
    out = tmp_path / "out"
    monkeypatch.setenv("VAUE_OUTPUT_DIR", str(out))
    return out


TINY_TOML = """
[dataset]
num_classes = 3
num_domains = 4
samples_per_domain = 40
height = 4
width = 4

[model]
layers = [{ kind = "conv", out = 4, kernel = 3 }, { kind = "pool" }, { kind = "flatten" }, { kind = "linear", out = 4, act = "none" }]
insertion_points = [0]

[train]
batch_per_domain = 4
iterations = 4
eval_interval = 2

[experiment]
seeds = [0, 1]
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    return path


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Lines echoed again in the terminal summary."""
    return pytestconfig.stash.setdefault(_ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
