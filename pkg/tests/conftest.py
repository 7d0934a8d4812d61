import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from cerfusion.labels import COMPOUND, SINGLE  # noqa: E402
from cerfusion.synthetic import write_frames, write_pattern_dataset  # noqa: E402


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def compound_set(tmp_path_factory):
    """7 patterns x 16 images, the overfit set."""
    root = tmp_path_factory.mktemp("compound")
    return write_pattern_dataset(root, COMPOUND, per_class=16, seed=11)


@pytest.fixture(scope="session")
def compound_val(tmp_path_factory):
    root = tmp_path_factory.mktemp("compound_val")
    return write_pattern_dataset(root, COMPOUND, per_class=4, seed=12)


@pytest.fixture(scope="session")
def single_sets(tmp_path_factory):
    a = write_pattern_dataset(tmp_path_factory.mktemp("affectnet"), SINGLE, per_class=3, seed=21, source="affectnet")
    b = write_pattern_dataset(tmp_path_factory.mktemp("rafdb"), SINGLE, per_class=2, seed=22, source="rafdb")
    return a, b


@pytest.fixture(scope="session")
def frames_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("frames")
    write_frames(d, 10)
    return d


_ACCEPTANCE: list[tuple[str, str, float]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(title): acceptance criterion with a summary line")


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    title = props.get("criterion")
    if title is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        verdict = "PASS" if report.outcome == "passed" else "FAIL"
        _ACCEPTANCE.append((verdict, title, props.get("seconds", report.duration)))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for verdict, title, seconds in _ACCEPTANCE:
        terminalreporter.write_line(f"[{verdict}] {title} ({seconds:.1f}s)")
