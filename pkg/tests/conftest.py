import numpy as np
import pytest

from eata.network import ArchSpec, init_params


def perturbed_params(seed, input_dim=5, hidden=(4, 3), classes=3):
    """Seeded params with BN affine and running stats moved off their initial values."""
    arch = ArchSpec(input_dim, hidden, classes)
    p = init_params(arch, seed)
    rng = np.random.default_rng(seed + 7919)
    for i, h in enumerate(hidden):
        p[f"block{i}.bn.gamma"][...] = rng.uniform(0.5, 1.5, h)
        p[f"block{i}.bn.beta"][...] = rng.uniform(-0.5, 0.5, h)
        p[f"block{i}.bn.running_mean"][...] = rng.normal(0, 0.3, h)
        p[f"block{i}.bn.running_var"][...] = rng.uniform(0.5, 2.0, h)
    return p


def central_diff(f, x, i, h=1e-5):
    old = x[i]
    x[i] = old + h
    up = f()
    x[i] = old - h
    down = f()
    x[i] = old
    return (up - down) / (2 * h)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


@pytest.fixture
def small():
    return perturbed_params(0)


# acceptance summary -----------------------------------------------------------

CRITERIA = {}


def record_criterion(number, ok, detail):
    CRITERIA[number] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    ran = [r for k in ("passed", "failed", "error")
           for r in terminalreporter.stats.get(k, [])
           if "test_acceptance" in getattr(r, "nodeid", "")]
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        if n in CRITERIA:
            ok, detail = CRITERIA[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL  (not evaluated)")
