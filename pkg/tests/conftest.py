"""Shared pytest wiring for the test suite."""

_CAPTURE_MANAGER = None


def pytest_configure(config):
    global _CAPTURE_MANAGER
    _CAPTURE_MANAGER = config.pluginmanager.getplugin("capturemanager")


def emit_uncaptured(line):
    """Print a line that survives pytest's output capture.

    Used by the acceptance tests to keep their one-line PASS/FAIL verdicts
    visible in plain ``pytest -v`` output.
    """
    if _CAPTURE_MANAGER is not None:
        with _CAPTURE_MANAGER.global_and_fixture_disabled():
            print(line, flush=True)
    else:
        print(line, flush=True)
