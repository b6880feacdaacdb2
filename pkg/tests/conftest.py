import os
from pathlib import Path

import numpy as np
import pytest

from gcpkge.tensor_core import build_store

DATA_ROOT = Path(os.environ.get("GCPKGE_DATA", Path(__file__).resolve().parents[1] / "data"))


def pytest_addoption(parser):
    parser.addoption("--extended", action="store_true", default=False,
                     help="run multi-hour benchmark reproductions")


def pytest_configure(config):
    config.addinivalue_line("markers", "extended: multi-hour benchmark reproductions")
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_store(rng, n_e, n_r, n_triples):
    t = np.stack([
        rng.integers(0, n_e, n_triples),
        rng.integers(0, n_r, n_triples),
        rng.integers(0, n_e, n_triples),
    ], axis=1)
    return build_store(t, n_e, n_r, warn_duplicates=False)


def dataset_dir(name):
    """Directory holding ``train.txt``/``valid.txt``/``test.txt`` for a benchmark, or None."""
    for cand in (DATA_ROOT / name, DATA_ROOT / name.lower(), DATA_ROOT / name.replace("-", "")):
        if all((cand / f).exists() for f in ("train.txt", "valid.txt", "test.txt")):
            return cand
    return None


def write_tsv(path, rows, newline="\n"):
    path.write_text("".join("\t".join(r) + newline for r in rows), encoding="utf-8")


# -- acceptance report --------------------------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "setup" and rep.skipped:
        _CRITERIA[number] = ("SKIP", title, str(rep.longrepr[2]) if isinstance(rep.longrepr, tuple) else "")
    elif rep.when == "setup" and rep.failed:
        _CRITERIA[number] = ("FAIL", title, "setup error")
    elif rep.when == "call":
        if rep.skipped:
            status = "SKIP"
            detail = detail or (str(rep.longrepr[2]) if isinstance(rep.longrepr, tuple) else "")
        else:
            status = "PASS" if rep.passed else "FAIL"
            if rep.failed and not detail:
                detail = rep.longreprtext.strip().splitlines()[-1][:200]
        _CRITERIA[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"{status} criterion {number:>2}: {title}"
        if detail:
            line += f" | {detail}"
        terminalreporter.write_line(line)
