import numpy as np
import pytest

from prunekit import tensor as T


def finite_difference_check(build, params, h=1e-3, tol=1e-3):
    """Compare analytic gradients of build() against central differences.

    ``build`` must construct the scalar loss from scratch on every call
    (so perturbed parameters re-enter the computation). Returns the worst
    relative error over all checked parameters.
    """
    for p in params:
        p.zero_grad()
    tape = T.Tape()
    with T.tape_scope(tape):
        loss = build()
    T.backward(tape, loss)
    worst = 0.0
    for p in params:
        assert p.grad is not None, f"no gradient for {p.name or 'parameter'}"
        analytic = p.grad.copy()
        p.zero_grad()
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = build().item()
            flat[i] = orig - h
            down = build().item()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * h)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1.0)
        worst = max(worst, float((np.abs(analytic - fd) / scale).max()))
    assert worst <= tol, f"gradient mismatch: worst relative error {worst:.3e} > {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
