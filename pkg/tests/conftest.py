import pytest


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


@pytest.fixture
def criterion(request):
    """Collects a detail string and prints one pass/fail line for an acceptance criterion."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    notes = []
    yield notes
    rep = getattr(request.node, "rep_call", None)
    status = "PASS" if rep is not None and rep.passed else "FAIL"
    short = [n for n in notes if "\n" not in n]
    blocks = [n for n in notes if "\n" in n]
    line = f"[acceptance {number:>2}] {status}  {title}"
    if short:
        line += "  (" + "; ".join(short) + ")"
    terminal = request.config.pluginmanager.get_plugin("terminalreporter")
    if terminal is not None:
        terminal.write_line("")
        terminal.write_line(line)
        for block in blocks:
            for text in block.strip("\n").splitlines():
                terminal.write_line("    " + text)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
