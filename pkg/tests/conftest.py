import numpy as np
import pytest

from lambda_repformer.dataset import SyntheticConfig, generate_synthetic, split_dataset
from lambda_repformer.decoder import DecoderConfig
from lambda_repformer.harness import profile


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    """400 natural-mode synthetic episodes with a 300/50/50 split."""
    data = generate_synthetic(SyntheticConfig(n_episodes=400, seed=3))
    split = split_dataset(data.episodes, (300, 50, 50), seed=3)
    return data, split


@pytest.fixture
def tiny_config():
    return profile("desk", epochs=3, decoder=DecoderConfig(d_model=8, mlp_hidden=(8,)))


_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.outcome != "passed":
        _CRITERIA[props["criterion"]] = (report.outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, (outcome, detail) in _CRITERIA.items():
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}" + (f"  ({detail})" if detail else ""))
