import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of a scalar-valued f at x by central differences."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def assert_grads_close(loss_fn, params, tol: float = 1e-4, h: float = 1e-6):
    """Check every element of every parameter's gradient against central differences.

    ``loss_fn`` must rebuild the graph from the current parameter data on each
    call and return a scalar Tensor.
    """
    import pointseq.autodiff as ad

    for p in params:
        p.zero_grad()
    loss = loss_fn()
    ad.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    for p, ga in zip(params, analytic):
        gn = central_diff_grad(lambda: loss_fn().item(), p.data, h=h)
        err = max_rel_err(ga, gn)
        assert err <= tol, f"gradient mismatch {err:.3e} > {tol} for param shape {p.shape}"
