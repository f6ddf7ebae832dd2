import warnings

import pytest
from hypothesis import HealthCheck, settings

from joinrl.catalog import ColumnStats, TableStats, build_catalog
from joinrl.workload import ColumnRef, JoinPredicate, JoinQuery

settings.register_profile("default", max_examples=60, deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pred(text: str) -> JoinPredicate:
    return JoinPredicate.parse(text)


@pytest.fixture
def shop_catalog():
    """Four tables shaped like the P-OI-O-C running example: column counts 3, 3, 3, 2."""
    tables = [
        TableStats("P", 2000, (ColumnStats("id", 2000, True), ColumnStats("name", 1500, False),
                               ColumnStats("price", 300, False))),
        TableStats("OI", 60000, (ColumnStats("id", 60000, True), ColumnStats("p_id", 1800, True),
                                 ColumnStats("o_id", 15000, True))),
        TableStats("O", 15000, (ColumnStats("id", 15000, True), ColumnStats("c_id", 900, False),
                                ColumnStats("date", 365, False))),
        TableStats("C", 1000, (ColumnStats("id", 1000, True), ColumnStats("city", 40, False))),
    ]
    return build_catalog(tables)


@pytest.fixture
def shop_query():
    return JoinQuery("running", ("P", "OI", "O", "C"),
                     (pred("OI.p_id=P.id"), pred("OI.o_id=O.id"), pred("O.c_id=C.id")))


@pytest.fixture(autouse=True)
def _quiet_presets():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="preset .*")
        yield


__all__ = ["ColumnRef", "pred"]


@pytest.fixture
def single_decision():
    """Two relations whose two join orders cost 22 (S then R, index join) and 212 (R then S, hash join)."""
    from joinrl.plancost import CostParams
    from joinrl.rl_env import JoinOrderEnv

    catalog = build_catalog([
        TableStats("R", 1000, (ColumnStats("id", 1000, True),)),
        TableStats("S", 10, (ColumnStats("r_id", 10, False),)),
    ])
    query = JoinQuery("one", ("R", "S"), (pred("R.id=S.r_id"),))
    env = JoinOrderEnv(catalog, params=CostParams(upper_bound=1000.0))
    return env, query


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
