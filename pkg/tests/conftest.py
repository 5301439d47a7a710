import numpy as np
import pytest
import torch

from semadv.models import load_model

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("measured", "")
        if not rep.passed and not detail and rep.longrepr is not None:
            detail = str(getattr(rep.longrepr, "reprcrash", None) and rep.longrepr.reprcrash.message or "")
            detail = detail.splitlines()[0] if detail else ""
        _CRITERIA[number] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"criterion {number} [{status}] {title}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_classifier():
    return load_model("toy-classifier")


@pytest.fixture(scope="session")
def toy_extractor():
    return load_model("toy-extractor")


@pytest.fixture(scope="session")
def toy_colorizer():
    return load_model("toy-colorizer")


@pytest.fixture(scope="session")
def toy_captioner():
    return load_model("toy-captioner")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def smooth_image():
    yy, xx = np.mgrid[0:16, 0:16] / 15.0
    return np.stack([0.3 + 0.4 * xx, 0.4 + 0.2 * yy, 0.5 * np.ones_like(xx)], axis=-1)


@pytest.fixture
def noisy_image(rng):
    return np.clip(0.5 + 0.35 * rng.standard_normal((16, 16, 3)), 0.0, 1.0)

