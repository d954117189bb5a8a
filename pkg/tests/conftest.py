import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def conv2d_loops(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation, the reference for conv2d."""
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for i in range(n):
        for o in range(co):
            for y in range(oh):
                for z in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for cc in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                acc += xp[i, cc, y * stride + ky, z * stride + kx] * w[o, cc, ky, kx]
                    out[i, o, y, z] = acc
    return out


def lrelu_ref(x):
    return np.where(x >= 0, x, 0.2 * x)


ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    """Register one acceptance line; printed at the end of the session."""
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
