"""Independent numerical oracles shared by the test suite.

The finite-difference checker runs entirely outside the tape machinery it
verifies: it re-evaluates the forward computation at nudged inputs and
compares central differences against recorded gradients, element by
element, with the guarded relative error |a-b| / max(|a|, |b|, floor).
Oracle evaluations use float64 tensors; production storage stays float32.
"""

import numpy as np

from dewarp import autograd as ag

REL_TOL = 1e-3
GUARD_FLOOR = 1e-4


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = GUARD_FLOOR) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def analytic_grads(make_loss, tensors):
    """Run make_loss under a fresh tape and return each tensor's gradient."""
    for t in tensors:
        t.zero_grad()
    with ag.Tape() as tape:
        loss = make_loss()
    ag.backward(tape, loss)
    return [t.grad.copy() for t in tensors]


def numeric_grad(make_loss, tensor, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of make_loss w.r.t. one tensor's data."""
    flat = tensor.data.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = make_loss().item()
        flat[i] = orig - eps
        lm = make_loss().item()
        flat[i] = orig
        out[i] = (lp - lm) / (2.0 * eps)
    return out.reshape(tensor.data.shape)


def fd_check(make_loss, tensors, eps: float = 1e-3, tol: float = REL_TOL) -> float:
    """Assert analytic vs numeric gradients agree for every tensor.

    Returns the worst relative error seen (useful for reporting).
    """
    grads = analytic_grads(make_loss, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        num = numeric_grad(make_loss, t, eps=eps)
        err = max_rel_error(g, num)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch: rel error {err:.2e} >= {tol:.0e}"
    return worst


def rand_tensor(rng, shape, scale=1.0, requires_grad=True, dtype=np.float64):
    return ag.Tensor(
        (rng.standard_normal(shape) * scale).astype(dtype), requires_grad=requires_grad
    )


def distinct_tensor(rng, shape, requires_grad=True, dtype=np.float64):
    """All-distinct values with gaps well above the FD step (for maxpool)."""
    n = int(np.prod(shape))
    vals = rng.permutation(n).astype(dtype) * 0.05
    return ag.Tensor(vals.reshape(shape), requires_grad=requires_grad)
