"""Independent reference implementations used as test oracles.

Nothing here imports the code under test except for reading parameter
layouts, so agreement is a genuine cross-check.
"""

import math

import numpy as np


def scalar_mlp_logits(model, values, registry, x):
    """Forward pass of one input row with plain Python loops."""
    def block(name):
        s, e, shape = registry[name]
        return np.asarray(values[s:e]).reshape(shape).tolist()

    h = [float(v) for v in x]
    for k, width in enumerate(model.hidden, start=1):
        W, b = block(f"layer{k}.weight"), block(f"layer{k}.bias")
        z = [sum(h[i] * W[i][j] for i in range(len(h))) + b[j] for j in range(width)]
        if model.norm[k - 1]:
            mean = sum(z) / width
            var = sum((zi - mean) ** 2 for zi in z) / width
            sd = math.sqrt(var + 1e-5)
            scale, shift = block(f"norm{k}.scale"), block(f"norm{k}.shift")
            z = [(zi - mean) / sd * scale[j] + shift[j] for j, zi in enumerate(z)]
        if model.activation == "tanh":
            h = [math.tanh(zi) for zi in z]
        else:
            h = [max(zi, 0.0) for zi in z]
    W, b = block("head.weight"), block("head.bias")
    return [sum(h[i] * W[i][c] for i in range(len(h))) + b[c] for c in range(model.classes)]


def scalar_nll(model, values, registry, X, y, weight_decay=0.0, trainable=None):
    total = 0.0
    for x, label in zip(X, y):
        z = scalar_mlp_logits(model, values, registry, x)
        m = max(z)
        lse = m + math.log(sum(math.exp(zi - m) for zi in z))
        total += lse - z[int(label)]
    loss = total / len(y)
    idx = range(len(values)) if trainable is None else trainable
    return loss + 0.5 * weight_decay * sum(values[i] ** 2 for i in idx)


def samelson_closed_form(g, grad, gamma):
    """Plugging the rank-one pseudo-inverse g g^T / |g|^4 into the Fisher-ball step.

    numerator = g (g.grad) / |g|^4, denominator = sqrt(grad^T F^+ grad) = |g.grad| / |g|^2,
    so delta = gamma * sign(g.grad) * g / |g|^2.
    """
    ip = float(np.dot(g, grad))
    if ip == 0.0:
        return np.zeros_like(g)
    return gamma * math.copysign(1.0, ip) * np.asarray(g) / float(np.dot(g, g))


def scalar_fsam(grad, fim, gamma, eta):
    pre = [gi / (fi + eta) for gi, fi in zip(grad, fim)]
    denom = math.sqrt(sum(gi * pi for gi, pi in zip(grad, pre)))
    return np.array([gamma * pi / denom for pi in pre])


def dense_gaussian_logpdf(mu, cov, w):
    """Log-density through a full Cholesky factorization."""
    C = np.linalg.cholesky(cov)
    r = np.linalg.solve(C, w - mu)
    return -0.5 * (r @ r) - np.log(np.diag(C)).sum() - 0.5 * mu.size * np.log(2 * np.pi)


def reference_ece(probs, labels, n_bins=15):
    """Bin-by-bin loop with explicit right-closed intervals (lo, hi]."""
    n = len(labels)
    conf = [max(row) for row in probs]
    pred = [int(np.argmax(row)) for row in probs]
    total = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        members = [i for i in range(n) if (lo < conf[i] <= hi) or (b == 0 and conf[i] == 0.0)]
        if members:
            acc = sum(pred[i] == labels[i] for i in members) / len(members)
            c = sum(conf[i] for i in members) / len(members)
            total += len(members) / n * abs(acc - c)
    return total
