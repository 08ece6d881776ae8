"""Prints one PASS/FAIL line per acceptance test at the end of the run."""

_TITLES = {
    "01": "gradient soundness",
    "02": "exact-formula oracles",
    "03": "large magnitude filtering contract",
    "04": "geometry",
    "05": "spreadness ordering",
    "06": "peak-std ordering",
    "07": "feature-difference ordering",
    "08": "occlusion robustness",
    "09": "part retrieval",
    "10": "reproducibility",
}

_outcomes: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_" not in report.nodeid:
        return
    number = report.nodeid.split("::test_")[1][:2]
    if report.when == "call" or report.outcome != "passed":
        _outcomes[number] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance")
    for number in sorted(_outcomes):
        terminalreporter.write_line(f"{_outcomes[number]}  {number} {_TITLES.get(number, '')}")
