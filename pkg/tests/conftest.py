import numpy as np
import pytest

from ccgan import autodiff as ad

# criterion id -> (passed, detail), filled by test_acceptance and printed at the end of the session
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def numeric_grad(f, arrays, eps=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every element of each array (perturbed in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def check_grads(build, *arrays, eps=1e-6, rtol=1e-6, atol=1e-8):
    """Compare backward() grads of ``build(*tensors)`` against central differences."""
    ts = [ad.tensor(a, requires_grad=True) for a in arrays]
    ad.backward(build(*ts))
    num = numeric_grad(lambda: build(*[ad.tensor(t.data) for t in ts]).item(), [t.data for t in ts], eps)
    for t, n in zip(ts, num):
        # rounding in the difference quotient scales with the function's magnitude
        scale = max(1.0, float(np.abs(n).max(initial=0.0)))
        np.testing.assert_allclose(t.grad, n, rtol=rtol, atol=atol * scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {key}: {detail}")
