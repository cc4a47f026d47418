"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np

from pctl.autodiff import Tensor, fresh_tape


def numeric_grad(fn, tensors, h=1e-5):
    """Central finite differences of a scalar-valued fn w.r.t. each tensor.

    ``fn`` must rebuild its computation from the tensors' current .data on
    every call; it is evaluated 2x per scalar entry.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn()
            flat[i] = orig - h
            fm = fn()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_grad(build_loss, tensors):
    """Backward-pass gradients of build_loss() w.r.t. the given tensors."""
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    with fresh_tape():
        loss = build_loss()
        loss.backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
            for t in tensors]


def rel_err(a, b):
    """Max relative error with a unit floor, suited to O(1) gradients."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_grads(build_loss, tensors, tol, h=1e-5):
    """Assert analytic and numeric gradients agree; returns the worst error."""
    ana = analytic_grad(build_loss, tensors)

    def scalar():
        with fresh_tape():
            return build_loss().item()

    num = numeric_grad(scalar, tensors, h=h)
    worst = max(rel_err(a, n) for a, n in zip(ana, num))
    assert worst < tol, f"gradient mismatch: {worst} >= {tol}"
    return worst
