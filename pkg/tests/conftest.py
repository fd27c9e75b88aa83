import numpy as np
import pytest

from weaksal.imagecore import BinaryMask, Image, SaliencyMap


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h, w):
    return Image(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


def random_map(rng, h, w):
    return SaliencyMap(rng.random((h, w)))


def random_mask(rng, h, w):
    m = (rng.random((h, w)) > 0.5).astype(np.uint8)
    m.flat[rng.integers(m.size)] = 1
    return BinaryMask(m)


# --- acceptance reporting -----------------------------------------------------------------

ACCEPTANCE_RESULTS: dict[int, str] = {}
CALL_FAILED = pytest.StashKey[bool]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the test body fills in the detail text."""
    number = request.node.get_closest_marker("criterion").args[0]
    state = {"detail": ""}
    yield state
    # failures are recorded by the report hook below
    if request.node.stash.get(CALL_FAILED, True):
        return
    ACCEPTANCE_RESULTS[number] = f"criterion {number} PASS  {request.node.name}  {state['detail']}".rstrip()
    print(ACCEPTANCE_RESULTS[number])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if report.when == "call":
        item.stash[CALL_FAILED] = report.failed
    if marker is not None and report.failed:
        ACCEPTANCE_RESULTS[marker.args[0]] = f"criterion {marker.args[0]} FAIL  {item.name}  ({report.when})"
        print(ACCEPTANCE_RESULTS[marker.args[0]])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
