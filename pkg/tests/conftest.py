import numpy as np
import pytest

from evmamba.events import EventStream

ACCEPTANCE = {}


def random_stream(rng, width=None, height=None, n=None, t_max=None, sorted_t=True):
    width = width or int(rng.integers(1, 40))
    height = height or int(rng.integers(1, 40))
    n = int(rng.integers(0, 200)) if n is None else n
    t_max = t_max or int(rng.integers(1, 10_000))
    t = rng.integers(0, t_max, n)
    if sorted_t:
        t = np.sort(t)
    return EventStream(width, height, t, rng.integers(0, width, n),
                       rng.integers(0, height, n), rng.integers(0, 2, n))


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def coordinate_check(f, arrays, grads, rng=None, h=1e-5, max_coords=None):
    """Central finite difference of scalar ``f`` in the coordinates of every
    array. Returns the worst per-array relative error
    ``|num - ana| / max(|num|, |ana|)`` with norms over the checked entries.
    With ``max_coords`` set, larger arrays are checked on that many
    entries drawn by ``rng``."""
    worst = 0.0
    for arr, g in zip(arrays, grads):
        flat, gflat = arr.reshape(-1), np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords and flat.size > max_coords:
            idx = rng.choice(flat.size, max_coords, replace=False)
        num = np.zeros(len(idx))
        for k, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            num[k] = (fp - fm) / (2 * h)
        worst = max(worst, rel_err(num, gflat[idx]))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
