import numpy as np
import pytest

from probtal import features


@pytest.fixture(scope="session")
def small_cfg():
    return features.SynthConfig(num_classes=3, dim=6, vlp_dim=5, num_train=6, num_test=3,
                                t_raw_range=(30, 40), segment_len_range=(5, 9))


@pytest.fixture(scope="session")
def small_ds(small_cfg):
    return features.synthesize_dataset(small_cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion in the terminal summary
_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = rep.longrepr.reprcrash.message.splitlines()[0] if hasattr(rep.longrepr, "reprcrash") else ""
    _CRITERIA[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {n:>2}. {title}: {detail}")
