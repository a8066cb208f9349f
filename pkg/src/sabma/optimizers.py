"""SGD-momentum, SAM, FSAM, natural gradient and the flat-posterior step.

All perturbations share one shape: precondition the loss gradient with an
(approximate) inverse Fisher ``P``, then scale so that the step has unit
length in the Fisher metric::

    delta = gamma * P g / sqrt(g^T P g)

SAM uses ``P = I``, FSAM a diagonal predictive Fisher, and the posterior
step a per-group rank-one (Samelson) pseudo-inverse of the score outer
product. A denominator at or below ``eps`` yields a zero perturbation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .autodiff import ParamVector, Tape, value_and_grad
from .models import Model
from .posterior import GROUPS, GaussianPosterior, grad_log_density, kl_grads, reparam_grads

FIM_MODES = ("identity", "diagonal_predictive", "samelson_posterior")
SCHEDULES = ("constant", "cosine_warmup", "swag_lr")


@dataclass(frozen=True)
class PerturbationConfig:
    gamma: float = 0.1
    fim_mode: str = "samelson_posterior"
    eps: float = 1e-12
    eta_fisher: float = 1.0

    def __post_init__(self):
        # gamma == 0 is allowed and disables the ascent step
        if self.gamma < 0 or self.eps <= 0:
            raise ValueError("gamma must be >= 0 and eps > 0")
        if self.fim_mode not in FIM_MODES:
            raise ValueError(f"unknown fim_mode {self.fim_mode!r}")


# -- first-order steps ------------------------------------------------------------


def sgd_step(params, grad, lr, momentum=0.0, wd=0.0, velocity=None):
    """``v <- momentum*v + (grad + wd*params); params <- params - lr*v``.

    ``wd`` may be a scalar or a per-entry array. Returns ``(params, velocity)``.
    """
    params = np.asarray(params, dtype=np.float64)
    if velocity is None:
        velocity = np.zeros_like(params)
    if velocity.shape != params.shape:
        raise ValueError("momentum buffer does not match parameter shape")
    velocity = momentum * velocity + (np.asarray(grad) + wd * params)
    return params - lr * velocity, velocity


def ng_step(params, grad, diag_fim, lr, eps=1e-12):
    """Diagonal natural-gradient step ``params - lr * grad / F``."""
    return np.asarray(params) - lr * np.asarray(grad) / np.maximum(diag_fim, eps)


def sam_perturb(grad, gamma, eps=1e-12):
    grad = np.asarray(grad, dtype=np.float64)
    norm = float(np.linalg.norm(grad))
    if norm <= eps:
        return np.zeros_like(grad)
    return gamma * grad / norm


def fsam_perturb(grad, diag_fim, gamma, eta_fisher=1.0, eps=1e-12):
    """``gamma * F^-1 g / |F^-1/2 g|`` with ``F = diag_fim + eta_fisher``."""
    grad = np.asarray(grad, dtype=np.float64)
    fisher = np.asarray(diag_fim, dtype=np.float64) + eta_fisher
    pg = grad / fisher
    denom = math.sqrt(float(grad @ pg)) if np.all(fisher > 0) else 0.0
    if not denom > eps:
        return np.zeros_like(grad)
    return gamma * pg / denom


def natural_perturb(loss_grads: Mapping[str, np.ndarray],
                    preconditioners: Mapping[str, Callable[[np.ndarray], np.ndarray]],
                    gamma: float, eps: float = 1e-12) -> dict[str, np.ndarray]:
    """Block-diagonal preconditioned perturbation with one global denominator."""
    directions = {k: preconditioners[k](g) for k, g in loss_grads.items()}
    quad = sum(float(np.vdot(loss_grads[k], directions[k])) for k in loss_grads)
    denom = math.sqrt(quad) if quad > 0 else 0.0
    if not denom > eps:
        return {k: np.zeros_like(g) for k, g in loss_grads.items()}
    return {k: gamma * d / denom for k, d in directions.items()}


def samelson_inverse(score: np.ndarray, eps: float = 1e-12) -> Callable[[np.ndarray], np.ndarray]:
    """``v -> s (s.v) / |s|^4``: pseudo-inverse of the rank-one Fisher ``s s^T``."""
    norm2 = float(np.vdot(score, score))
    if math.sqrt(norm2) < eps:
        return np.zeros_like
    return lambda v: score * (float(np.vdot(score, v)) / (norm2 * norm2))


def sabma_perturb(loss_grads: Mapping[str, np.ndarray], scores: Mapping[str, np.ndarray],
                  gamma: float, eps: float = 1e-12) -> dict[str, np.ndarray]:
    """Posterior perturbation with per-group Samelson inverse Fishers.

    For a single group this is ``gamma * sign(s.g) * s / |s|^2``.
    """
    if set(loss_grads) != set(scores):
        raise ValueError("loss gradients and scores must cover the same groups")
    for k in loss_grads:
        if np.shape(loss_grads[k]) != np.shape(scores[k]):
            raise ValueError(f"group {k!r}: gradient and score shapes differ")
    return natural_perturb(loss_grads, {k: samelson_inverse(scores[k], eps) for k in scores}, gamma, eps)


# -- Fisher ------------------------------------------------------------------------


def diag_predictive_fim(model: Model, params: ParamVector, batch) -> np.ndarray:
    """Mean squared per-example gradient of ``log p(y|x, w)`` (empirical diagonal Fisher)."""
    X, y = np.asarray(batch.X), np.asarray(batch.y)
    if len(y) == 0:
        raise ValueError("diag_predictive_fim needs a nonempty batch")
    tape = Tape(params)
    root = tape.nll(tape.log_softmax(model.logits(tape, X)), y)
    per_example = tape.backward(root, per_sample=True)
    return np.mean(per_example * per_example, axis=0)


# -- point-model steps ------------------------------------------------------------


def _index(trainable):
    return slice(None) if trainable is None else trainable


def sam_step(model, params: ParamVector, batch, gamma, lr, momentum=0.0, wd=0.0, velocity=None,
             trainable=None):
    """Two-pass SAM update; returns ``(params, velocity)``."""
    loss = model.loss_fn(batch.X, batch.y)
    idx = _index(trainable)
    _, g = value_and_grad(loss, params)
    delta = sam_perturb(g.values[idx], gamma)
    return _ascent_descent(loss, params, delta, idx, lr, momentum, wd, velocity)


def fsam_step(model, params: ParamVector, batch, gamma, lr, momentum=0.0, wd=0.0, velocity=None,
              eta_fisher=1.0, trainable=None):
    loss = model.loss_fn(batch.X, batch.y)
    idx = _index(trainable)
    _, g = value_and_grad(loss, params)
    fim = diag_predictive_fim(model, params, batch)
    delta = fsam_perturb(g.values[idx], fim[idx], gamma, eta_fisher)
    return _ascent_descent(loss, params, delta, idx, lr, momentum, wd, velocity)


def _ascent_descent(loss, params, delta, idx, lr, momentum, wd, velocity):
    w = params.values
    if np.any(delta):
        perturbed = w.copy()
        perturbed[idx] = perturbed[idx] + delta
        _, g = value_and_grad(loss, params.replace(perturbed))
    else:
        _, g = value_and_grad(loss, params)
    new_w = w.copy()
    new_w[idx], velocity = sgd_step(w[idx], g.values[idx], lr, momentum, wd, velocity)
    return params.replace(new_w), velocity


def sgd_point_step(model, params: ParamVector, batch, lr, momentum=0.0, wd=0.0, velocity=None,
                   trainable=None):
    idx = _index(trainable)
    _, g = value_and_grad(model.loss_fn(batch.X, batch.y), params)
    new_w = params.values.copy()
    new_w[idx], velocity = sgd_step(params.values[idx], g.values[idx], lr, momentum, wd, velocity)
    return params.replace(new_w), velocity


# -- posterior step ------------------------------------------------------------------


def _theta_grads(model, post: GaussianPosterior, batch, z1, z2, beta):
    w_s = post.trainable_sample(z1, z2)
    w = post.assemble(w_s)
    _, g = value_and_grad(model.loss_fn(batch.X, batch.y), w)
    grads = reparam_grads(post, g.values[post.partition.trainable], z1, z2)
    if beta:
        kl = kl_grads(post)
        grads = {k: grads[k] + beta * kl[k] for k in grads}
    return grads, w_s, w


def sabma_perturbation(model, post: GaussianPosterior, batch, cfg: PerturbationConfig,
                       loss_grads: dict, w_s: np.ndarray, w: ParamVector,
                       train_groups=GROUPS) -> dict[str, np.ndarray]:
    """Perturbation of theta for the configured Fisher mode."""
    active = {k: loss_grads[k] for k in train_groups}
    if cfg.gamma == 0:
        return {k: np.zeros_like(v) for k, v in active.items()}
    if cfg.fim_mode == "identity":
        flat = np.concatenate([active[k].ravel() for k in active])
        delta = sam_perturb(flat, cfg.gamma, cfg.eps)
        out, cursor = {}, 0
        for k, v in active.items():
            out[k] = delta[cursor:cursor + v.size].reshape(v.shape)
            cursor += v.size
        return out
    if cfg.fim_mode == "diagonal_predictive":
        fisher = diag_predictive_fim(model, w, batch)[post.partition.trainable] + cfg.eta_fisher
        pre = {k: (lambda v, f=fisher: v / f) if k == "mu" else (lambda v: v) for k in active}
        if np.any(fisher <= 0):
            return {k: np.zeros_like(v) for k, v in active.items()}
        return natural_perturb(active, pre, cfg.gamma, cfg.eps)
    scores = grad_log_density(post, w_s)
    return sabma_perturb(active, {k: scores[k] for k in active}, cfg.gamma, cfg.eps)


def sabma_step(model, post: GaussianPosterior, batch, cfg: PerturbationConfig, lr, momentum=0.0,
               wd=0.0, rng=None, velocity=None, beta=0.0, train_groups=GROUPS):
    """One flat-posterior update of theta; returns ``(posterior, velocity)``.

    Samples ``(z1, z2)`` once, perturbs theta along the Fisher-preconditioned
    loss gradient, re-evaluates the reparameterized gradient at the perturbed
    theta with the same noise, and applies SGD-momentum at the original theta.
    Weight decay applies to ``mu`` only. Groups outside ``train_groups`` are
    neither perturbed nor updated.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    train_groups = tuple(g for g in GROUPS if g in train_groups)
    z1, z2 = post.draw_noise(rng)
    grads, w_s, w = _theta_grads(model, post, batch, z1, z2, beta)
    delta = sabma_perturbation(model, post, batch, cfg, grads, w_s, w, train_groups)

    if any(np.any(d) for d in delta.values()):
        theta = post.theta()
        slices = post.group_slices()
        for k, d in delta.items():
            theta[slices[k]] += d.ravel()
        perturbed = post.with_theta(theta)
        grads, _, _ = _theta_grads(model, perturbed, batch, z1, z2, beta)

    return _apply_theta_update(post, grads, lr, momentum, wd, velocity, train_groups)


def vi_sgd_step(model, post: GaussianPosterior, batch, lr, momentum=0.0, wd=0.0, rng=None,
                velocity=None, beta=0.0, train_groups=GROUPS):
    """Plain reparameterized SGD on theta, no perturbation."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    train_groups = tuple(g for g in GROUPS if g in train_groups)
    z1, z2 = post.draw_noise(rng)
    grads, _, _ = _theta_grads(model, post, batch, z1, z2, beta)
    return _apply_theta_update(post, grads, lr, momentum, wd, velocity, train_groups)


def _apply_theta_update(post, grads, lr, momentum, wd, velocity, train_groups):
    slices = post.group_slices()
    theta = post.theta()
    flat_grad = np.zeros_like(theta)
    decay = np.zeros_like(theta)
    active = np.zeros(theta.size, dtype=bool)
    for k in train_groups:
        flat_grad[slices[k]] = grads[k].ravel()
        active[slices[k]] = True
    decay[slices["mu"]] = wd
    if velocity is None:
        velocity = np.zeros_like(theta)
    new_theta, new_velocity = sgd_step(theta[active], flat_grad[active], lr, momentum, decay[active],
                                       velocity[active])
    theta[active] = new_theta
    velocity = velocity.copy()
    velocity[active] = new_velocity
    return post.with_theta(theta), velocity


# -- schedules -----------------------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "constant"
    base_lr: float = 0.05
    total_steps: int = 100
    warmup_steps: int = 0
    swag_floor_fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.base_lr <= 0 or self.total_steps < 1 or not 0 <= self.warmup_steps < max(self.total_steps, 1):
            raise ValueError("invalid schedule parameters")
        if not 0 < self.swag_floor_fraction <= 1:
            raise ValueError("swag_floor_fraction must lie in (0, 1]")


def lr_at(schedule: LrSchedule, t: int) -> float:
    """Learning rate at step ``t``; ``t == total_steps`` gives the end-point limit."""
    T = schedule.total_steps
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    base = schedule.base_lr
    if schedule.kind == "constant":
        return base
    if schedule.kind == "cosine_warmup":
        w = schedule.warmup_steps
        if t < w:
            return base * (t + 1) / w
        progress = (t - w) / (T - w)
        return 0.5 * base * (1.0 + math.cos(math.pi * progress))
    frac = t / T
    floor = schedule.swag_floor_fraction * base
    if frac < 0.5:
        return base
    if frac < 0.9:
        return base + (floor - base) * (frac - 0.5) / 0.4
    return floor
