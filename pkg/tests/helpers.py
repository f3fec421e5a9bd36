"""Shared test oracles."""

from __future__ import annotations

import copy
from typing import Callable, Dict

import numpy as np

from strassen_spn.autodiff import Tensor
from strassen_spn.layers import Module


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat, g = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(np.asarray(a, np.float64) - np.asarray(b, np.float64)) / denom)


def module_grad_errors(model: Module, x: np.ndarray, seed: int, eps: float = 1e-5) -> Dict[str, float]:
    """Relative error between backprop and central differences for every parameter and the input.

    Runs on a float64 copy of ``model``; the scalar objective is a fixed random
    projection of the output.
    """
    m = copy.deepcopy(model).astype(np.float64)
    x64 = np.array(x, dtype=np.float64)
    proj = np.random.default_rng(seed + 1000).standard_normal(m(Tensor(x64)).shape)

    def objective() -> float:
        return float((m(Tensor(x64)).data * proj).sum())

    xt = Tensor(x64, requires_grad=True)
    m.zero_grad()
    out = m(xt)
    out.backward(proj)
    errors = {"input": rel_err(xt.grad, numeric_grad(objective, x64, eps))}
    for name, p in m.named_parameters():
        if p.grad is None:
            continue
        errors[name] = rel_err(p.grad, numeric_grad(objective, p.data, eps))
    return errors
