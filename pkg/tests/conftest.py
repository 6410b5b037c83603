import pytest

# criterion number -> (passed, one-line detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}

TITLES = {
    1: "gradient correctness",
    2: "noise-estimation calibration",
    3: "modality-fusion ordering",
    4: "sparsity trend",
    5: "weight invariants",
    6: "Kabsch oracle",
    7: "denoiser optimality",
    8: "determinism",
    9: "whitening/schedule identities",
}


@pytest.fixture
def record_criterion():
    def record(n, passed, detail):
        ACCEPTANCE[n] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(TITLES):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            status = "PASS" if ok else "FAIL"
        else:
            status, detail = "NOT RUN", ""
        terminalreporter.write_line(f"[{status}] {n}. {TITLES[n]}: {detail}")
