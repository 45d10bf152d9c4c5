import numpy as np
import pytest
import torch

from avpc.data import ClipBank, DataConfig, build_dataset, split_records

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def desk_config():
    return DataConfig()


@pytest.fixture(scope="session")
def desk_records(desk_config):
    return build_dataset(desk_config)


@pytest.fixture(scope="session")
def train_bank(desk_records, desk_config):
    return ClipBank(split_records(desk_records, "train"), desk_config)


@pytest.fixture(scope="session")
def test_bank(desk_records, desk_config):
    return ClipBank(split_records(desk_records, "test"), desk_config)


@pytest.fixture(scope="session")
def val_bank(desk_records, desk_config):
    return ClipBank(split_records(desk_records, "val"), desk_config)


@pytest.fixture(scope="session")
def small_bank():
    cfg = DataConfig(per_class=4)
    return ClipBank(build_dataset(cfg), cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance reporting ---------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False, "detail": []})
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed:
        entry["ok"] = False
    for key, value in item.user_properties:
        if key == "detail":
            entry["detail"].append(value)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = "; ".join(dict.fromkeys(e["detail"]))
        terminalreporter.write_line(f"criterion {number:2d} {status}  {e['title']}" + (f"  ({detail})" if detail else ""))
