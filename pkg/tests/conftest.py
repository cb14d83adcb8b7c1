"""Acceptance bookkeeping: one pass/fail line per numbered criterion."""
import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    entry = item.config.stash[_RESULTS].setdefault(mark.args[0], {"ok": True, "skipped": False, "notes": []})
    if rep.skipped:
        entry["skipped"] = True
    elif rep.failed:
        entry["ok"] = False
    if rep.when == "call":
        entry["notes"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(results):
        r = results[k]
        status = "FAIL" if not r["ok"] else ("SKIP" if r["skipped"] else "PASS")
        terminalreporter.write_line(f"criterion {k:>2}: {status}  {'; '.join(r['notes'])}".rstrip())
