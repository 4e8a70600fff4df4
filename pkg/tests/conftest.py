from __future__ import annotations

import numpy as np
import pytest

from lntune.containers import save_checkpoint
from lntune.model import preset
from lntune.pretrain import pretrain

# Learning rates at toy scale are the published grids times this factor.
LR_SCALE = 100.0
PRETRAIN_SEED = 0


@pytest.fixture(scope="session")
def pretrained():
    """Desk-scale pre-trained toy encoder shared by the training tests (~30 s)."""
    params, config, history = pretrain(preset("toy"), seed=PRETRAIN_SEED)
    assert history[-1] < 1e-2
    return params, config


@pytest.fixture(scope="session")
def pretrained_ckpt(pretrained, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "pre.ckpt"
    save_checkpoint(path, *pretrained)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary: one PASS/FAIL line per criterion ------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False})
    if report.failed:
        entry["ok"] = False
    if report.when == "call":
        entry["ran"] = True


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] and entry["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {entry['title']}")
