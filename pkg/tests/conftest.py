import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criterion results after the test summary."""
    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance") and hasattr(mod, "_results"):
            lines = mod._results
            if lines:
                terminalreporter.section("acceptance criteria")
                for line in lines:
                    terminalreporter.write_line(line)
