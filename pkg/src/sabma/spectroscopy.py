"""Matrix-free Hessian eigenvalues, flatness metrics and Weyl-bound certificates."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .autodiff import ParamVector, hvp, value_and_grad
from .errors import NumericError
from .posterior import GaussianPosterior, sample

DENSE_GUARD = 500


@dataclass
class SpectrumReport:
    eigenvalues: list[float]
    lambda1: float
    ratio_1_5: float | None
    iterations: int
    residuals: list[float]
    converged: bool
    lambda1_history: list[float] = field(default_factory=list, repr=False)

    def to_dict(self, history: bool = False) -> dict:
        out = asdict(self)
        if not history:
            out.pop("lambda1_history")
        return out


@dataclass
class WeylCertificate:
    lambda_maxes: list[float]
    lambda_mins: list[float]
    lower: float
    upper: float
    observed: float
    slack: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def flatness_metrics(eigenvalues) -> tuple[float, float | None]:
    """``(lambda1, lambda1/lambda5)``; the ratio is None when undefined."""
    eigs = list(getattr(eigenvalues, "eigenvalues", eigenvalues))
    if not eigs:
        raise ValueError("flatness metrics need at least one eigenvalue")
    lam1 = float(eigs[0])
    if len(eigs) < 5 or eigs[4] == 0:
        return lam1, None
    ratio = lam1 / float(eigs[4])
    return lam1, ratio if math.isfinite(ratio) else None


def lanczos_topk(matvec: Callable[[np.ndarray], np.ndarray], dim: int, k: int, max_iters: int = 100,
                 tol: float = 1e-8, seed: int = 0) -> SpectrumReport:
    """Top-``k`` eigenvalues of a symmetric operator by Lanczos with full reorthogonalization.

    A Ritz pair counts as converged when ``|beta_j * s_j| < tol * max(1, |lambda1|)``.
    On breakdown (invariant subspace) iteration restarts from a fresh random
    vector orthogonal to the basis, so repeated eigenvalues are found.
    """
    max_iters = min(max_iters, dim)
    if not 1 <= k <= max_iters:
        raise ValueError(f"need 1 <= k <= min(dim, max_iters); got k={k}, dim={dim}, max_iters={max_iters}")
    rng = np.random.default_rng(seed)
    Q = np.zeros((max_iters, dim))
    alphas: list[float] = []
    betas: list[float] = []  # betas[j] couples q_j and q_{j+1}

    def fresh_vector(n_basis):
        for _ in range(10):
            v = rng.standard_normal(dim)
            for _ in range(2):
                v -= Q[:n_basis].T @ (Q[:n_basis] @ v)
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                return v / norm
        raise NumericError("could not extend the Krylov basis")

    Q[0] = fresh_vector(0)
    history: list[float] = []
    theta = np.zeros(0)
    resid = np.zeros(0)
    converged = False
    j = 0
    for j in range(max_iters):
        w = np.asarray(matvec(Q[j]), dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise NumericError("operator returned non-finite values", index=int(np.flatnonzero(~np.isfinite(w))[0]))
        alpha = float(Q[j] @ w)
        alphas.append(alpha)
        for _ in range(2):
            w -= Q[: j + 1].T @ (Q[: j + 1] @ w)
        beta = float(np.linalg.norm(w))

        T = np.diag(alphas) + np.diag(betas, 1) + np.diag(betas, -1)
        evals, evecs = np.linalg.eigh(T)
        order = np.argsort(evals)[::-1]
        theta = evals[order]
        resid = np.abs(beta * evecs[-1, order])
        history.append(float(theta[0]))

        scale = max(1.0, abs(theta[0]))
        breakdown = beta <= 1e-12 * scale
        if breakdown:
            # exact invariant subspace: current Ritz values are exact eigenvalues
            resid = np.zeros_like(resid)
        if len(theta) >= k and np.all(resid[:k] < tol * scale):
            converged = True
            break
        if j + 1 == max_iters:
            break
        if breakdown:
            Q[j + 1] = fresh_vector(j + 1)
            betas.append(0.0)
        else:
            Q[j + 1] = w / beta
            betas.append(beta)

    take = min(k, len(theta))
    eigs = [float(x) for x in theta[:take]]
    lam1, ratio = flatness_metrics(eigs)
    return SpectrumReport(
        eigenvalues=eigs,
        lambda1=lam1,
        ratio_1_5=ratio,
        iterations=j + 1,
        residuals=[float(r) for r in resid[:take]],
        converged=converged and take == k,
        lambda1_history=history,
    )


def dense_hessian(fn, params: ParamVector, guard: int = DENSE_GUARD, symmetrize: bool = True) -> np.ndarray:
    """Hessian by central differences of the analytic gradient, one column per coordinate.

    Step ``h_i = 1e-5 * (1 + |w_i|)``. Test oracle; refuses more than ``guard`` parameters.
    """
    p = params.size
    if p > guard:
        raise ValueError(f"dense_hessian refuses {p} > {guard} parameters")
    w = params.values
    H = np.empty((p, p))
    for i in range(p):
        h = 1e-5 * (1.0 + abs(w[i]))
        wp, wm = w.copy(), w.copy()
        wp[i] += h
        wm[i] -= h
        _, gp = value_and_grad(fn, params.replace(wp))
        _, gm = value_and_grad(fn, params.replace(wm))
        H[:, i] = (gp.values - gm.values) / (wp[i] - wm[i])
    return 0.5 * (H + H.T) if symmetrize else H


def weyl_certificate(lambda_maxes, lambda_mins, observed_lambda_max: float,
                     extra_slack: float = 0.0) -> WeylCertificate:
    """Check the Weyl sandwich for the top eigenvalue of an average of M symmetric matrices.

    ``lower = max_i (lmax_i + sum_{j != i} lmin_j) / M`` and ``upper = mean(lmax)``.
    ``extra_slack`` widens the ``1e-9 * (1 + |upper|)`` float tolerance when the
    inputs are themselves iterative estimates.
    """
    lmax = np.asarray(lambda_maxes, dtype=np.float64)
    lmin = np.asarray(lambda_mins, dtype=np.float64)
    if lmax.shape != lmin.shape or lmax.ndim != 1 or lmax.size < 1:
        raise ValueError("lambda_maxes and lambda_mins must be equal-length non-empty lists")
    if np.any(lmin > lmax):
        raise ValueError("lambda_min exceeds lambda_max for some matrix")
    M = lmax.size
    upper = float(lmax.sum() / M)
    # lower <= upper holds exactly since lmin <= lmax; clamp away summation-order rounding
    lower = min(float(np.max((lmax + (lmin.sum() - lmin)) / M)), upper)
    slack = 1e-9 * (1.0 + abs(upper)) + extra_slack
    observed = float(observed_lambda_max)
    return WeylCertificate(
        lambda_maxes=lmax.tolist(),
        lambda_mins=lmin.tolist(),
        lower=lower,
        upper=upper,
        observed=observed,
        slack=slack,
        passed=bool(lower - slack <= observed <= upper + slack),
    )


# -- model-level spectroscopy -------------------------------------------------------------


def hessian_operator(fn, params: ParamVector, negate: bool = False):
    sign = -1.0 if negate else 1.0
    return lambda v: sign * hvp(fn, params, v).values


@dataclass
class FlatnessReport:
    samples: list[SpectrumReport]
    mean_lambda1: float
    mean_ratio_1_5: float | None

    @property
    def lambda1s(self) -> list[float]:
        return [r.lambda1 for r in self.samples]

    def to_dict(self) -> dict:
        return {
            "mean_lambda1": self.mean_lambda1,
            "mean_ratio_1_5": self.mean_ratio_1_5,
            "samples": [r.to_dict() for r in self.samples],
        }


def summarize(reports: list[SpectrumReport]) -> FlatnessReport:
    ratios = [r.ratio_1_5 for r in reports if r.ratio_1_5 is not None]
    return FlatnessReport(
        samples=reports,
        mean_lambda1=float(np.mean([r.lambda1 for r in reports])),
        mean_ratio_1_5=float(np.mean(ratios)) if ratios else None,
    )


def model_spectrum(model, params: ParamVector, data, k: int = 5, max_iters: int = 80,
                   tol: float = 1e-6, seed: int = 0) -> SpectrumReport:
    """Top-k spectrum of the mean data-loss Hessian (no weight decay) at ``params``."""
    fn = model.loss_fn(data.X, data.y)
    return lanczos_topk(hessian_operator(fn, params), params.size, k, max_iters, tol, seed)


def posterior_flatness(model, post: GaussianPosterior, data, M: int, k: int = 5, seed=0,
                       max_iters: int = 80, tol: float = 1e-6, weights=None) -> FlatnessReport:
    """Spectra of ``M`` posterior samples and the mean lambda1 and lambda1/lambda5.

    ``seed`` is either an int (sample ``i`` uses ``SeedSequence([seed, i])``) or a
    callable ``i -> seed``. Pass ``weights`` to reuse already drawn samples.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    seed_of = seed if callable(seed) else (lambda i: np.random.SeedSequence([int(seed), i]))
    reports = []
    for i in range(M):
        w = weights[i] if weights is not None else sample(post, np.random.default_rng(seed_of(i)))
        reports.append(model_spectrum(model, w, data, k, max_iters, tol, seed=i))
    return summarize(reports)
