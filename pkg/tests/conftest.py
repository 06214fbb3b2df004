import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        status, title, elapsed = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}  ({elapsed:.2f}s)")
