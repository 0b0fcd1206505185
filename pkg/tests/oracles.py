"""Independent oracles shared by the test suite.

These are deliberately written without the library's tensor ops (plain
python / raw numpy arithmetic) so they stay independent of the code paths
they check.
"""

from __future__ import annotations

import math

import numpy as np


def central_difference_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function f at x, elementwise."""
    x = x.astype(np.float64).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise relative error with an absolute floor for tiny values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def softmax_rows_oracle(logits: np.ndarray) -> np.ndarray:
    """Direct exp/sum softmax, row by row, in plain python floats."""
    logits = np.asarray(logits, dtype=np.float64)
    out = np.zeros_like(logits)
    for i, row in enumerate(logits.reshape(-1, logits.shape[-1])):
        exps = [math.exp(v) for v in row]
        s = sum(exps)
        out.reshape(-1, logits.shape[-1])[i] = [e / s for e in exps]
    return out


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            out[i, j] = sum(a[i, t] * b[t, j] for t in range(k))
    return out


def balance_loss_oracle(logits: np.ndarray) -> float:
    """Direct summation of count * total-probability per expert.

    Assignments use per-token argmax with lowest-index tie break; counts are
    plain tallies; probabilities come from the independent softmax above.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n_tokens, n_experts = logits.shape
    probs = softmax_rows_oracle(logits)
    counts = [0] * n_experts
    for t in range(n_tokens):
        best = 0
        for j in range(1, n_experts):
            if logits[t, j] > logits[t, best]:
                best = j
        counts[best] += 1
    total = 0.0
    for j in range(n_experts):
        p_j = sum(probs[t, j] for t in range(n_tokens))
        total += counts[j] * p_j
    return total
