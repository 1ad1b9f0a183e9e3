import numpy as np
import pytest


def naive_conv2d(x, k, b=None, stride=1, pad=0):
    """Seven nested loops; the reference semantics for conv2d."""
    n, c, h, w = x.shape
    d, _, kh, kw = k.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, d, ho, wo), dtype=np.float64)
    for i in range(n):
        for o in range(d):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                yy, zz = y * stride + p - pad, z * stride + q - pad
                                if 0 <= yy < h and 0 <= zz < w:
                                    acc += float(x[i, ch, yy, zz]) * float(k[o, ch, p, q])
                    out[i, o, y, z] = acc
    return out


def numeric_grad(f, arr, h=1e-4, idx=None):
    """Central differences of scalar f() w.r.t. entries of arr (mutated in place and restored)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def rel_err(a, n):
    return abs(a - n) / max(abs(a) + abs(n), 1e-8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
