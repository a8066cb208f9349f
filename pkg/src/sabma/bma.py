"""Monte Carlo model averaging, calibration metrics and flatness-ordered averaging."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .models import predict, softmax

ECE_BINS = 15
PROB_FLOOR = 1e-12
ORDERS = ("flat", "sharp", "random", "given")


def bma_predict(model, weight_samples, X) -> np.ndarray:
    """Average of per-sample softmax predictions."""
    if len(weight_samples) < 1:
        raise ValueError("need at least one weight sample")
    return np.mean(sample_probs(model, weight_samples, X), axis=0)


def sample_probs(model, weight_samples, X) -> np.ndarray:
    """Stack of per-sample class probabilities, shape ``(M, N, C)``."""
    return np.stack([softmax(predict(model, w, X)) for w in weight_samples])


def metrics(probs, labels, n_bins: int = ECE_BINS) -> tuple[float, float, float]:
    """``(acc in percent, ECE, NLL)`` of row-stochastic ``probs``.

    Argmax ties go to the lowest class index. ECE uses ``n_bins`` equal-width,
    right-closed confidence bins over ``(0, 1]``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    pred = np.argmax(probs, axis=1)
    correct = (pred == labels).astype(np.float64)
    conf = probs[np.arange(n), pred]
    acc = 100.0 * correct.mean()
    nll = float(-np.mean(np.log(np.maximum(probs[np.arange(n), labels], PROB_FLOOR))))

    # b / n_bins exactly, so a confidence sitting on an edge lands in the lower bin
    edges = np.arange(n_bins + 1) / n_bins
    bins = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    ece = 0.0
    for b in range(n_bins):
        in_bin = bins == b
        count = int(in_bin.sum())
        if count:
            ece += count / n * abs(correct[in_bin].mean() - conf[in_bin].mean())
    return float(acc), float(ece), nll


@dataclass
class BmaReport:
    M: int
    ordering: str
    order: list[int]
    prefix: list[dict]
    final: dict
    lambda1s: list[float] | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def sample_order(order: str, M: int, lambda1s=None, seed: int = 0) -> np.ndarray:
    if order not in ORDERS:
        raise ValueError(f"unknown ordering {order!r}")
    if order in ("flat", "sharp"):
        if lambda1s is None or len(lambda1s) != M:
            raise ValueError(f"ordering {order!r} needs one lambda1 per sample")
        lam = np.asarray(lambda1s, dtype=np.float64)
        # stable sort keeps original index order among ties
        return np.argsort(lam if order == "flat" else -lam, kind="stable")
    if order == "random":
        return np.random.default_rng(seed).permutation(M)
    return np.arange(M)


def ordered_bma_from_probs(per_sample_probs, labels, order: str = "given", lambda1s=None,
                           seed: int = 0) -> BmaReport:
    """Prefix-k averaging curve over an ordering of precomputed sample predictions.

    Each prefix average is summed in original sample-index order, so the
    k = M result is bitwise identical for every ordering.
    """
    probs = np.asarray(per_sample_probs, dtype=np.float64)
    M = probs.shape[0]
    perm = sample_order(order, M, lambda1s, seed)
    prefix = []
    for k in range(1, M + 1):
        subset = np.sort(perm[:k])
        avg = probs[subset].sum(axis=0) / k
        acc, ece, nll = metrics(avg, labels)
        prefix.append({"k": k, "acc": acc, "ece": ece, "nll": nll})
    return BmaReport(
        M=M,
        ordering=order,
        order=perm.tolist(),
        prefix=prefix,
        final=dict(prefix[-1]),
        lambda1s=None if lambda1s is None else [float(x) for x in lambda1s],
    )


def ordered_bma(model, weight_samples, lambda1s, order, X, labels, seed: int = 0) -> BmaReport:
    return ordered_bma_from_probs(sample_probs(model, weight_samples, X), labels, order, lambda1s, seed)
