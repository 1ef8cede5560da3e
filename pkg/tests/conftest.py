import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call":
                continue
            lines += [v for k, v in rep.user_properties if k == "acceptance"]
            if key == "failed" and "test_acceptance" in rep.nodeid and not any(
                    k == "acceptance" for k, _ in rep.user_properties):
                lines.append(f"ACCEPT ?? FAIL {rep.nodeid} (no measurement recorded)")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
