import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sabma.autodiff import ParamVector
from sabma.data import Dataset
from sabma.errors import NumericError
from sabma.models import ParamPartition, build_mlp, nll_loss, partition_params
from sabma.posterior import (GaussianPosterior, SwagCollector, elbo_loss, grad_log_density, kl_to_prior,
                             load_posterior, log_density, moped_from_dnn, sample, save_posterior, swag_fit)
from oracles import dense_gaussian_logpdf


def flat_post(mu, log_sigma, L, **kw):
    """Posterior over a bare vector with every coordinate trainable."""
    mu = np.asarray(mu, dtype=float)
    p1 = mu.size
    part = ParamPartition(np.arange(p1), np.zeros(0, dtype=np.int64), "all")
    return GaussianPosterior(mu, np.asarray(log_sigma, dtype=float), np.asarray(L, dtype=float).reshape(p1, -1),
                             part, np.zeros(0), {"w": (0, p1, (p1,))}, **kw)


def random_post(seed, p1, K, sigma_scale=1.0):
    rng = np.random.default_rng(seed)
    return flat_post(rng.standard_normal(p1), np.log(sigma_scale * rng.uniform(0.3, 1.5, p1)),
                     0.5 * rng.standard_normal((p1, K)))


# -- sampling ------------------------------------------------------------------------


def test_degenerate_posterior_samples_mean():
    post = flat_post([0.3, -1.2, 5.0], [-40.0] * 3, np.zeros((3, 0)))
    w = sample(post, 0).values
    assert np.max(np.abs(w - post.mu)) <= 1e-15


def test_unit_variance_sampling():
    post = flat_post([0.0], [math.log(math.sqrt(2))], np.zeros((1, 0)))
    rng = np.random.default_rng(11)
    draws = np.array([post.trainable_sample(*post.draw_noise(rng))[0] for _ in range(100_000)])
    assert abs(draws.var() - 1.0) < 0.02


def test_rank_one_support_lies_on_diagonal():
    post = flat_post([0.0, 0.0], [-40.0, -40.0], [[1.0], [1.0]])
    for seed in range(20):
        w = sample(post, seed).values
        assert abs(w[0] - w[1]) < 1e-12


def test_frozen_slots_keep_point_values():
    model = build_mlp(2, [3], 2)
    w = model.init_params(0)
    part = partition_params(model, "head")
    post = moped_from_dnn(w, part, 0.05, 1e-4, K=2)
    s = sample(post, 3).values
    assert np.array_equal(s[part.frozen], w.values[part.frozen])
    assert not np.array_equal(s[part.trainable], post.mu)


def test_sample_is_seed_deterministic():
    post = random_post(0, 6, 2)
    assert np.array_equal(sample(post, 42).values, sample(post, 42).values)


def test_sample_covariance_within_standard_errors():
    post = random_post(4, 5, 3)
    rng = np.random.default_rng(0)
    n = 100_000
    Z1 = rng.standard_normal((n, post.p1))
    Z2 = rng.standard_normal((n, post.K))
    W = post.mu + (post.sigma * Z1 + Z2 @ post.L.T) / np.sqrt(2)
    C = np.cov(W, rowvar=False, bias=True)
    S = post.covariance()
    # Var of a sample covariance entry for Gaussians: (S_ij^2 + S_ii S_jj) / n
    se = np.sqrt((S**2 + np.outer(np.diag(S), np.diag(S))) / n)
    assert np.all(np.abs(C - S) < 5 * se)


# -- log density ---------------------------------------------------------------------


def test_log_density_unit_variance_at_mean():
    post = flat_post([0.0], [math.log(math.sqrt(2))], np.zeros((1, 0)))
    assert log_density(post, np.array([0.0])) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)


def test_log_density_unit_variance_one_sd():
    post = flat_post([0.0], [math.log(math.sqrt(2))], np.zeros((1, 0)))
    assert log_density(post, np.array([1.0])) == pytest.approx(-0.5 * math.log(2 * math.pi) - 0.5, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20), st.integers(0, 5))
def test_log_density_matches_dense_cholesky(seed, p1, K):
    post = random_post(seed, p1, K)
    w = sample(post, seed + 1).values
    assert abs(log_density(post, w) - dense_gaussian_logpdf(post.mu, post.covariance(), w)) < 1e-8


def test_log_density_singular_core_raises():
    # two identical columns make the K x K core rank-deficient up to the identity
    post = flat_post([0.0, 0.0], [-20.0, -20.0], [[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(NumericError):
        log_density(post, np.array([0.1, 0.2]))


def test_density_integrates_to_one_on_grid():
    post = random_post(7, 2, 1, sigma_scale=0.5)
    sd = np.sqrt(np.diag(post.covariance()))
    a = np.linspace(post.mu[0] - 8 * sd[0], post.mu[0] + 8 * sd[0], 241)
    b = np.linspace(post.mu[1] - 8 * sd[1], post.mu[1] + 8 * sd[1], 241)
    dens = np.array([[math.exp(log_density(post, np.array([x, y]))) for y in b] for x in a])
    mass = dens.sum() * (a[1] - a[0]) * (b[1] - b[0])
    assert abs(mass - 1.0) < 0.02


# -- scores --------------------------------------------------------------------------


def test_score_mu_vanishes_at_mean():
    post = random_post(1, 7, 3)
    g = grad_log_density(post, post.mu.copy())
    assert np.all(g["mu"] == 0.0)


def test_score_unit_variance():
    post = flat_post([0.0], [math.log(math.sqrt(2))], np.zeros((1, 0)))
    g = grad_log_density(post, np.array([1.0]))
    assert g["mu"][0] == pytest.approx(1.0, abs=1e-15)


def _fd_theta(post, w, h=1e-6):
    theta = post.theta()
    out = np.empty_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        step = h * (1 + abs(theta[i]))
        tp[i] += step
        tm[i] -= step
        out[i] = (log_density(post.with_theta(tp), w) - log_density(post.with_theta(tm), w)) / (2 * step)
    return out


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(0, 4))
def test_score_matches_finite_differences(seed, p1, K):
    post = random_post(seed, p1, K)
    w = sample(post, seed + 5).values
    g = grad_log_density(post, w)
    analytic = np.concatenate([g["mu"], g["log_sigma"], g["L"].ravel()])
    fd = _fd_theta(post, w)
    assert np.linalg.norm(analytic - fd) <= 1e-6 * max(np.linalg.norm(fd), 1.0)


# -- SWAG ----------------------------------------------------------------------------


def _collector(K, p1=1):
    part = ParamPartition(np.arange(p1), np.zeros(0, dtype=np.int64), "all")
    return SwagCollector(K, part, {"w": (0, p1, (p1,))})


def _pv(values):
    values = np.atleast_1d(np.asarray(values, dtype=float))
    return ParamVector(values, {"w": (0, values.size, (values.size,))})


def test_swag_two_snapshot_moments():
    col = _collector(0)
    col.collect(_pv(0.0))
    col.collect(_pv(2.0))
    post = swag_fit(col)
    assert post.mu[0] == 1.0
    assert post.sigma[0] ** 2 == pytest.approx(1.0, rel=1e-12)
    assert post.K == 0


def test_swag_identical_snapshots_hit_floor():
    col = _collector(2, p1=3)
    for _ in range(4):
        col.collect(_pv([1.0, -2.0, 0.5]))
    post = swag_fit(col)
    assert np.allclose(post.sigma**2, 1e-12)
    assert np.allclose(post.L, 0.0)


def test_swag_needs_enough_snapshots():
    col = _collector(3)
    for v in (0.0, 1.0, 2.0):
        col.collect(_pv(v))
    with pytest.raises(ValueError):
        swag_fit(col)


def test_swag_deviation_columns_and_scaling():
    col = _collector(2, p1=2)
    snaps = [np.array([0.0, 1.0]), np.array([2.0, 0.0]), np.array([1.0, 4.0])]
    means = np.cumsum(snaps, axis=0) / np.arange(1, 4)[:, None]
    for s in snaps:
        col.collect(_pv(s))
    post = swag_fit(col)
    want = np.stack([snaps[1] - means[1], snaps[2] - means[2]], axis=1) / math.sqrt(1)
    np.testing.assert_allclose(post.L, want, atol=1e-15)


def test_swag_posterior_sampling_covariance():
    rng = np.random.default_rng(9)
    col = _collector(5, p1=4)
    for _ in range(50):
        col.collect(_pv(rng.standard_normal(4) * [1.0, 0.5, 2.0, 0.1]))
    post = swag_fit(col)
    n = 100_000
    W = np.array([post.trainable_sample(*post.draw_noise(rng)) for _ in range(n)])
    C = np.cov(W, rowvar=False, bias=True)
    S = post.covariance()
    se = np.sqrt((S**2 + np.outer(np.diag(S), np.diag(S))) / n)
    assert np.all(np.abs(C - S) < 5 * se)


# -- MOPED ---------------------------------------------------------------------------


def _moped_fixture():
    model = build_mlp(2, [3], 2)
    w = model.init_params(0)
    values = w.values.copy()
    s, _, _ = model.registry["norm1.scale"]
    values[s] = 0.4
    values[s + 1] = 0.0
    return model, w.replace(values)


def test_moped_sigma_proportional_to_weight():
    model, w = _moped_fixture()
    part = partition_params(model, "norm+head")
    post = moped_from_dnn(w, part, delta=0.05, alpha=1e-4)
    s, _, _ = model.registry["norm1.scale"]
    pos = int(np.flatnonzero(part.trainable == s)[0])
    assert post.sigma[pos] == pytest.approx(0.02, rel=1e-12)
    assert post.sigma[pos + 1] == pytest.approx(1e-6, rel=1e-12)
    assert post.mu[pos] == 0.4


def test_moped_resets_head():
    model, w = _moped_fixture()
    part = partition_params(model, "norm+head")
    post = moped_from_dnn(w, part, delta=0.05, alpha=1e-4)
    s, e, _ = model.registry["head.weight"]
    head = np.isin(part.trainable, np.arange(s, e))
    assert np.all(post.mu[head] == 0.0)
    assert np.allclose(post.sigma[head], 0.01, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1.0), st.floats(1e-8, 1e-2))
def test_moped_sigma_always_positive(seed, delta, alpha):
    model = build_mlp(2, [4], 3)
    w = model.init_params(seed)
    values = w.values.copy()
    values[::3] = 0.0
    post = moped_from_dnn(w.replace(values), partition_params(model, "norm+head"), delta, alpha, K=1)
    assert np.all(post.sigma > 0)


def test_trainable_parameter_count():
    model = build_mlp(2, [8], 2)
    part = partition_params(model, "norm+head")
    post = moped_from_dnn(model.init_params(0), part, K=5)
    assert post.num_trainable == (5 + 2) * part.p1 == post.theta().size


# -- ELBO and KL ---------------------------------------------------------------------


def test_elbo_beta_zero_is_plain_nll():
    model = build_mlp(2, [4], 2)
    part = partition_params(model, "norm+head")
    post = moped_from_dnn(model.init_params(0), part)
    rng = np.random.default_rng(0)
    data = Dataset(rng.standard_normal((6, 2)), rng.integers(0, 2, 6), 2)
    w = sample(post, 1)
    assert elbo_loss(model, post, data, w, 0.0) == nll_loss(model, w, data, 0.0)


def test_kl_zero_at_own_prior():
    post = random_post(3, 5, 2)
    assert kl_to_prior(post) == 0.0


def test_kl_unit_gaussian_shifted_mean():
    post = flat_post([0.0], [math.log(math.sqrt(2))], np.zeros((1, 0)))
    shifted = post.with_theta(np.array([1.0, post.log_sigma[0]]))
    assert kl_to_prior(shifted) == pytest.approx(0.5, abs=1e-15)
    model = build_mlp(1, [], 2, norm=False)
    assert model.num_params == 4


def test_elbo_adds_beta_times_kl():
    model = build_mlp(2, [], 2, norm=False)
    part = partition_params(model, "all")
    post = moped_from_dnn(model.init_params(0), part)
    moved = post.with_theta(post.theta() + 0.1)
    data = Dataset(np.ones((2, 2)), np.array([0, 1]), 2)
    w = sample(moved, 0)
    base = elbo_loss(model, moved, data, w, 0.0)
    assert elbo_loss(model, moved, data, w, 0.3) == pytest.approx(base + 0.3 * kl_to_prior(moved), rel=1e-14)


# -- checkpoints ---------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    model = build_mlp(2, [3], 2)
    post = moped_from_dnn(model.init_params(0), partition_params(model, "norm+head"), K=2)
    post = post.with_theta(post.theta() + np.random.default_rng(0).standard_normal(post.num_trainable) * 0.01)
    path = tmp_path / "post.json"
    save_posterior(post, path)
    back = load_posterior(path)
    assert np.array_equal(back.theta(), post.theta())
    assert np.array_equal(back.frozen_values, post.frozen_values)
    assert np.array_equal(back.partition.trainable, post.partition.trainable)
    assert np.array_equal(sample(back, 5).values, sample(post, 5).values)


def test_checkpoint_rejects_unknown_schema(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"schema": "other/9"}')
    with pytest.raises(ValueError):
        load_posterior(path)
