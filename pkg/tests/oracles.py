"""Brute-force reference implementations used as test oracles.

These are written directly from each method's closed-form loss without
going through the margin decomposition the library uses.
"""

import math


def log_sigmoid(x):
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def sigmoid(x):
    return math.exp(log_sigmoid(x))


def method_loss(name, cfg, a_w, a_l, len_w, len_l, c_w, c_l, delta_r, margin, z_ref):
    """Loss of one pair; ``margin`` is only read by the batch-adaptive methods."""
    b = cfg.beta
    if name == "dpo":
        return -log_sigmoid(b * (a_w - c_w) - b * (a_l - c_l))
    if name == "ipo":
        return ((a_w - c_w) - (a_l - c_l) - 1.0 / (2.0 * b)) ** 2
    if name == "slic":
        return max(0.0, 1.0 - cfg.tau * ((a_w - a_l) - (c_w - c_l))) - cfg.lambda_sft * a_w
    if name == "cpo":
        return -log_sigmoid(b * a_w - b * a_l) - cfg.lambda_sft * a_w
    if name == "odpo":
        return -log_sigmoid(b * (a_w - c_w) - b * (a_l - c_l) - delta_r)
    if name == "kto":
        return cfg.lambda_w * (1.0 - sigmoid(b * (a_w - c_w) - z_ref)) + cfg.lambda_l * sigmoid(b * (a_l - c_l) - z_ref)
    if name == "simpo":
        return -log_sigmoid(b * a_w / len_w - b * a_l / len_l - cfg.gamma_const)
    if name == "focalpo":
        p = sigmoid(b * (a_w - c_w) - b * (a_l - c_l))
        return -(p**cfg.focal_gamma) * math.log(p)
    if name in ("alpha_dpo", "amapo"):
        return -log_sigmoid(b * a_w / len_w - b * a_l / len_l - margin)
    raise KeyError(name)


def amapo_margins(r, beta, clamp_mu=False):
    """Adaptive margins from scratch: population moments, z-score, exponential scaling."""
    n = len(r)
    mu = sum(r) / n
    sigma = math.sqrt(sum((x - mu) ** 2 for x in r) / n)
    scale = max(mu, 0.0) if clamp_mu else mu
    out = []
    for x in r:
        z = 0.0 if sigma < 1e-8 else (mu - x) / sigma
        raw = max(z * scale, 0.0)
        out.append(beta * math.exp(raw) if raw > 0 else 0.0)
    return out


def alpha_margins(gaps, gamma_const, alpha):
    n = len(gaps)
    mu = sum(gaps) / n
    sigma = math.sqrt(sum((g - mu) ** 2 for g in gaps) / n)
    if sigma < 1e-8:
        return [gamma_const] * n
    return [gamma_const + alpha * (g - mu) / sigma for g in gaps]


def softmax_logprobs(scores):
    peak = max(scores)
    log_z = peak + math.log(sum(math.exp(s - peak) for s in scores))
    return [s - log_z for s in scores]


def pair_logprobs(weights, phi_w, phi_l):
    """Two-candidate softmax log-probabilities with explicit dot products."""
    s_w = sum(w * p for w, p in zip(weights, phi_w))
    s_l = sum(w * p for w, p in zip(weights, phi_l))
    lw, ll = softmax_logprobs([s_w, s_l])
    return lw, ll


def adam(params, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Hand-rolled Adam over a list of per-step gradients."""
    p = list(params)
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            p[i] -= lr * mh / (math.sqrt(vh) + eps)
    return p
