"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""
import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_results: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    entry = _results.setdefault(int(m.group(1)), {"ok": True, "ran": False, "detail": []})
    if report.failed:
        entry["ok"] = False
    if report.when == "call":
        entry["ran"] = True
        entry["detail"] += [str(v) for k, v in report.user_properties if k == "detail"]
    if report.skipped:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_results):
        e = _results[n]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        detail = "; ".join(e["detail"])
        terminalreporter.write_line(f"criterion {n:2d}: {status}" + (f"  ({detail})" if detail else ""))
