import numpy as np
import pytest

from pwcmoe import tensor as T


def finite_difference_check(loss_fn, params, step=1e-5, tol=1e-4):
    """Compare analytic gradients of loss_fn() against central differences.

    loss_fn builds the loss from the current parameter values; params is a
    dict name -> Tensor. Returns the worst relative error seen.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    T.backward(loss)
    worst = 0.0
    for name, p in params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with T.no_grad():
                up = loss_fn().item()
            flat[i] = orig - step
            with T.no_grad():
                down = loss_fn().item()
            flat[i] = orig
            fd = (up - down) / (2 * step)
            # floor keeps central-difference roundoff (~1e-11) from dominating
            # the comparison when the true gradient is essentially zero
            rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-6)
            worst = max(worst, rel)
            assert rel <= tol, f"{name}[{i}]: analytic {gflat[i]} vs fd {fd} (rel {rel:.2e})"
    return worst


@pytest.fixture
def fd_check():
    return finite_difference_check
