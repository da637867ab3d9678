"""Pure numpy implementations of the hot kernels.

Semantics must match ``_kernels.pyx`` exactly; the test suite runs both.
"""

import numpy as np


def candidate_logprobs(phi, w, offsets):
    """Log-softmax of ``phi @ w`` within each candidate group.

    ``offsets`` has one entry per group plus a trailing end index, so group
    ``g`` spans rows ``offsets[g]:offsets[g + 1]``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.int64)
    scores = phi @ w
    starts = offsets[:-1]
    counts = np.diff(offsets)
    peak = np.maximum.reduceat(scores, starts)
    shifted = scores - np.repeat(peak, counts)
    lse = np.log(np.add.reduceat(np.exp(shifted), starts))
    return shifted - np.repeat(lse, counts)


def policy_gradient(phi, offsets, logp, rows, coefs):
    """``sum_j coefs[j] * grad_w log pi(row_j)`` for a softmax-linear policy."""
    phi = np.asarray(phi, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.int64)
    coefs = np.asarray(coefs, dtype=np.float64)
    probs = np.exp(np.asarray(logp, dtype=np.float64))
    counts = np.diff(offsets)
    expected = np.add.reduceat(probs[:, None] * phi, offsets[:-1], axis=0)
    group_of = np.repeat(np.arange(len(counts)), counts)
    centred = phi[rows] - expected[group_of[rows]]
    return coefs @ centred


def adaptive_margins(r, beta, clamp_mu=False, sigma_floor=1e-8):
    """Z-normalized, mean-scaled, exponentially mapped batch margins.

    Returns ``(mu, sigma, z, raw, scaled)``.
    """
    r = np.asarray(r, dtype=np.float64)
    n = r.shape[0]
    mu = float(r.sum() / n)
    sigma = float(np.sqrt(((r - mu) ** 2).sum() / n))
    if sigma < sigma_floor:
        z = np.zeros(n)
    else:
        z = (mu - r) / sigma
    scale = max(mu, 0.0) if clamp_mu else mu
    raw = np.maximum(z * scale, 0.0)
    scaled = np.where(raw > 0.0, beta * np.exp(raw), 0.0)
    return mu, sigma, z, raw, scaled
