"""Independent oracles used by the test suite.

Everything here is deliberately written as naive loops, separate from the
library implementations it checks: central finite differences for gradients,
a per-head attention loop, and double-loop pixel metrics.
"""

from __future__ import annotations

import math

import numpy as np
import torch


def analytic_gradient(f, x: torch.Tensor) -> torch.Tensor:
    """Gradient of the scalar ``f(x)`` via autograd, on a detached copy."""
    x = x.detach().clone().requires_grad_(True)
    value = f(x)
    value.backward()
    return x.grad.detach().clone()


def central_differences(f, x: torch.Tensor, step: float = 1e-4, coords=None):
    """Central finite differences of scalar ``f`` at the given flat coordinates.

    Returns (coords, estimates). The default checks every coordinate.
    """
    base = x.detach().clone()
    flat = base.reshape(-1)
    idxs = list(range(flat.numel())) if coords is None else list(coords)
    estimates = []
    with torch.no_grad():
        for i in idxs:
            original = flat[i].item()
            flat[i] = original + step
            plus = float(f(base))
            flat[i] = original - step
            minus = float(f(base))
            flat[i] = original
            estimates.append((plus - minus) / (2.0 * step))
    return idxs, torch.tensor(estimates, dtype=torch.float64)


def fraction_matching(analytic: torch.Tensor, numeric: torch.Tensor,
                      rel_tol: float = 1e-3, floor: float = 1e-4) -> float:
    """Share of coordinates where the relative gradient error is within tol.

    The denominator is floored so exact-zero gradients compare against the
    finite-difference noise floor instead of dividing by zero.
    """
    a = analytic.to(torch.float64)
    n = numeric.to(torch.float64)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    return float(((a - n).abs() / denom <= rel_tol).float().mean())


def gradient_check(f, x: torch.Tensor, step: float = 1e-4, rel_tol: float = 1e-3,
                   coords=None, min_fraction: float = 0.95) -> tuple[bool, float]:
    """Compare autograd against central differences on ``coords`` (or all)."""
    grad = analytic_gradient(f, x).reshape(-1)
    idxs, numeric = central_differences(f, x, step=step, coords=coords)
    fraction = fraction_matching(grad[idxs], numeric, rel_tol=rel_tol)
    return fraction >= min_fraction, fraction


def naive_per_head_attention(tokens: torch.Tensor, msa) -> torch.Tensor:
    """Reference loop for the per-head attention module, one head at a time."""
    b, n, k = tokens.shape
    h, d = msa.heads, msa.head_dim
    batches = []
    for bi in range(b):
        head_outputs = []
        for hi in range(h):
            s = tokens[bi, :, hi * d : (hi + 1) * d]
            q = s @ msa.query_weight[hi] + msa.query_bias[hi]
            key = s @ msa.key_weight[hi] + msa.key_bias[hi]
            v = s @ msa.value_weight[hi] + msa.value_bias[hi]
            scores = (q @ key.T) / math.sqrt(d)
            weights = torch.softmax(scores, dim=-1)
            head_outputs.append(weights @ v)
        concat = torch.cat(head_outputs, dim=-1)
        batches.append(concat @ msa.out_proj.weight.T + msa.out_proj.bias)
    return torch.stack(batches)


def brute_counts(pred: np.ndarray, gt: np.ndarray, class_id: int) -> tuple[int, int, int, int]:
    """Double-loop one-vs-rest pixel counting: (tp, fp, fn, tn)."""
    tp = fp = fn = tn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p = pred[i, j] == class_id
            g = gt[i, j] == class_id
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif not p and g:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def brute_f1_micro(pairs, class_id: int) -> float:
    tp = fp = fn = 0
    for pred, gt in pairs:
        t, f, n, _ = brute_counts(pred, gt, class_id)
        tp, fp, fn = tp + t, fp + f, fn + n
    denom = 2 * tp + fp + fn
    return 100.0 if denom == 0 else 100.0 * 2 * tp / denom


def brute_iou_micro(pairs, class_id: int) -> float:
    tp = fp = fn = 0
    for pred, gt in pairs:
        t, f, n, _ = brute_counts(pred, gt, class_id)
        tp, fp, fn = tp + t, fp + f, fn + n
    denom = tp + fp + fn
    return 100.0 if denom == 0 else 100.0 * tp / denom


def brute_dice_macro(pairs, class_id: int) -> float:
    scores = []
    for pred, gt in pairs:
        tp, fp, fn, _ = brute_counts(pred, gt, class_id)
        denom = 2 * tp + fp + fn
        scores.append(100.0 if denom == 0 else 100.0 * 2 * tp / denom)
    return sum(scores) / len(scores)


def zero_parameters(module: torch.nn.Module) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
