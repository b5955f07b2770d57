import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def micro_pairs():
    from ootdmini.synthdata import generate_pairs

    return generate_pairs(2, 500)


# acceptance criterion -> (passed, detail), printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
# informational measurements that are not criteria
NOTES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    assert ok, f"criterion {criterion}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    for line in NOTES:
        terminalreporter.write_line(f"note: {line}")
