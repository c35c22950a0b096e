import threading

import pytest

from xpi.transport import loopback_pair

# verdict lines collected by the acceptance suite; printed after the
# run so they survive output capture
acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def two_party():
    """Run (party0_fn, party1_fn) over a loopback pair, concurrently.

    Returns a callable: results = two_party(fn0, fn1); failures on
    either side re-raise in the test.
    """
    opened = []

    def run(fn0, fn1, inject_rtt_ms=0.0):
        c0, c1 = loopback_pair(inject_rtt_ms)
        opened.extend([c0, c1])
        out = {}
        errors = []

        def side(name, fn, chan):
            try:
                out[name] = fn(chan)
            except BaseException as exc:
                errors.append(exc)
                chan.close()

        t = threading.Thread(target=side, args=(1, fn1, c1), daemon=True)
        t.start()
        side(0, fn0, c0)
        t.join(timeout=60)
        if errors:
            raise errors[0]
        return out[0], out[1]

    yield run
    for chan in opened:
        chan.close()
