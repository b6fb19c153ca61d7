import json
import os

import pytest

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Records one line per acceptance criterion for the terminal summary."""
    lines = request.config.stash[ACCEPTANCE]

    def record(number: int, title: str, passed: bool, detail: str, seconds: float, limit: float) -> bool:
        """Store the line; the verdict also requires the runtime limit."""
        in_time = seconds <= limit
        if not in_time:
            detail += "; over the runtime limit"
        verdict = bool(passed) and in_time
        lines.append({"criterion": number, "title": title, "pass": verdict, "detail": detail,
                      "seconds": round(seconds, 1), "limit": limit})
        return verdict
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(ACCEPTANCE, []), key=lambda r: r["criterion"])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for r in lines:
        verdict = "PASS" if r["pass"] else "FAIL"
        terminalreporter.write_line(
            f"[{r['criterion']:>2}] {verdict}  {r['title']}: {r['detail']}  "
            f"({r['seconds']:.1f}s, limit {r['limit']:g}s)")
    path = os.environ.get("CONVINT_ACCEPTANCE_JSON")
    if path:
        with open(path, "w") as fh:
            json.dump(lines, fh, indent=1)
