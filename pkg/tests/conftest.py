import numpy as np
import pytest

from fractalnet.engine import forward, init_params, update_running_stats
from fractalnet.topology import assemble_network


def toy_net(C=4, B=2, ch=3, classes=3, size=8, in_ch=2):
    return assemble_network(C, B, (ch,) * B, classes, input_channels=in_ch, input_size=size)


def warmed_store(net, seed=0, precision="f64", batch=6):
    """Xavier parameters with BN running statistics from one full-mask batch."""
    rng = np.random.default_rng(seed)
    store = init_params(net, rng, precision)
    for v in store.params.values():
        if v.ndim == 1:
            v += rng.normal(0, 0.1, v.shape).astype(v.dtype)
    x = rng.normal(size=(batch, net.input_channels, net.input_size, net.input_size)).astype(store.dtype)
    update_running_stats(store, forward(net, store, x, mode="train"), momentum=0.0)
    return store


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, printed in the summary."""
    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {title}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
