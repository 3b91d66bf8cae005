"""Shared record of acceptance outcomes, printed as one line per criterion at the end of the run."""
import pytest

CRITERIA = {
    1: "differentiation oracles (grad/HVP/mixed vs finite differences)",
    2: "Neumann series vs explicit inverse",
    3: "bilevel hypergradient vs FD total derivative",
    4: "ranking protocol and adjacency vs brute force",
    5: "desk-scale Recall@20: gsam vs baseline",
    6: "multi-seed stability: gsam IQR <= sam IQR",
    7: "sharpness ordering: gsam <= baseline",
    8: "reproducibility of train from a manifest",
}

RESULTS = {}  # number -> (status, detail)


@pytest.fixture
def record():
    def _record(number, passed, detail="", status=None):
        RESULTS[number] = (status or ("PASS" if passed else "FAIL"), detail)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, detail = RESULTS.get(n, ("NOT RUN", ""))
        line = f"CRITERION {n}: {status} - {CRITERIA[n]}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
