import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sabma.bma import bma_predict, metrics, ordered_bma, ordered_bma_from_probs, sample_order
from sabma.models import build_mlp, predict, softmax
from oracles import reference_ece


def random_probs(rng, n, c):
    return softmax(3 * rng.standard_normal((n, c)))


def head_only(model, bias):
    values = model.zero_params().values.copy()
    s, e, _ = model.registry["head.bias"]
    values[s:e] = bias
    return model.zero_params().replace(values)


# -- averaging -----------------------------------------------------------------------


def test_single_sample_is_softmax():
    model = build_mlp(2, [4], 3)
    w = model.init_params(0)
    X = np.random.default_rng(0).standard_normal((5, 2))
    np.testing.assert_array_equal(bma_predict(model, [w], X), softmax(predict(model, w, X)))


def test_symmetric_pair_averages_to_half():
    model = build_mlp(2, [], 2, norm=False)
    pair = [head_only(model, [2.5, -2.5]), head_only(model, [-2.5, 2.5])]
    np.testing.assert_allclose(bma_predict(model, pair, np.ones((3, 2))), 0.5, atol=1e-15)


def test_rows_sum_to_one_for_thirty_samples():
    rng = np.random.default_rng(1)
    model = build_mlp(2, [6], 4)
    samples = [model.init_params(0).replace(rng.standard_normal(model.num_params)) for _ in range(30)]
    probs = bma_predict(model, samples, rng.standard_normal((50, 2)))
    assert np.all(np.abs(probs.sum(axis=1) - 1) < 1e-9)


def test_empty_sample_list():
    model = build_mlp(2, [], 2, norm=False)
    with pytest.raises(ValueError):
        bma_predict(model, [], np.ones((1, 2)))


# -- metrics ---------------------------------------------------------------------------


def test_metrics_confident_and_correct():
    acc, ece, nll = metrics(np.eye(3), [0, 1, 2])
    assert acc == 100.0 and ece == 0.0 and nll == pytest.approx(0.0, abs=1e-15)


def test_metrics_uniform_two_class():
    acc, ece, nll = metrics(np.full((4, 2), 0.5), [0, 1, 0, 1])
    assert acc == 50.0
    assert ece == pytest.approx(0.0, abs=1e-15)
    assert nll == pytest.approx(math.log(2), abs=1e-15)


def test_metrics_hand_built_four_samples():
    probs = [[0.9, 0.1], [0.6, 0.4], [0.3, 0.7], [0.55, 0.45]]
    labels = [0, 1, 1, 0]
    # confidences 0.9, 0.6, 0.7, 0.55 in 15 bins:
    #   bin 13 (0.867, 0.933]: {0.9 right}       -> 1/4 * |1 - 0.9|      = 0.025
    #   bin 10 (0.667, 0.733]: {0.7 right}       -> 1/4 * |1 - 0.7|      = 0.075
    #   bin  8 (0.533, 0.600]: {0.6 wrong, 0.55 right}, 0.6 on the right edge
    #                                            -> 2/4 * |0.5 - 0.575|  = 0.0375
    acc, ece, nll = metrics(probs, labels)
    assert acc == 75.0
    assert ece == pytest.approx(0.1375, abs=1e-12)
    assert nll == pytest.approx(-(math.log(0.9) + math.log(0.4) + math.log(0.7) + math.log(0.55)) / 4, abs=1e-15)


def test_metrics_argmax_tie_goes_to_lowest_class():
    acc, _, _ = metrics([[0.5, 0.5]], [0])
    assert acc == 100.0
    acc, _, _ = metrics([[0.5, 0.5]], [1])
    assert acc == 0.0


def test_metrics_floor_keeps_nll_finite():
    _, _, nll = metrics([[1.0, 0.0]], [1])
    assert nll == pytest.approx(-math.log(1e-12))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 60), st.integers(2, 6))
def test_metric_ranges_and_ece_oracle(seed, n, c):
    rng = np.random.default_rng(seed)
    probs = random_probs(rng, n, c)
    labels = rng.integers(0, c, n)
    acc, ece, nll = metrics(probs, labels)
    assert 0 <= acc <= 100
    assert 0 <= ece <= 1
    assert 0 <= nll < math.inf
    assert ece == pytest.approx(reference_ece(probs.tolist(), labels.tolist()), abs=1e-12)


# -- ordering ------------------------------------------------------------------------


def test_flat_order_sorts_ascending():
    assert sample_order("flat", 3, [3.0, 1.0, 2.0]).tolist() == [1, 2, 0]


def test_sharp_order_reverses_flat_on_distinct_values():
    lam = [0.4, 2.0, 1.1, 0.9]
    assert sample_order("sharp", 4, lam).tolist() == sample_order("flat", 4, lam).tolist()[::-1]


def test_ties_broken_by_index():
    assert sample_order("flat", 4, [1.0, 0.5, 1.0, 0.5]).tolist() == [1, 3, 0, 2]
    assert sample_order("sharp", 4, [1.0, 0.5, 1.0, 0.5]).tolist() == [0, 2, 1, 3]


def test_random_order_is_seeded():
    assert sample_order("random", 10, seed=3).tolist() == sample_order("random", 10, seed=3).tolist()
    assert sorted(sample_order("random", 10, seed=3).tolist()) == list(range(10))


def test_flat_order_needs_lambdas():
    with pytest.raises(ValueError):
        sample_order("flat", 3)
    with pytest.raises(ValueError):
        sample_order("flat", 3, [1.0, 2.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_final_prefix_identical_across_orderings(seed, M):
    rng = np.random.default_rng(seed)
    probs = np.stack([random_probs(rng, 25, 3) for _ in range(M)])
    labels = rng.integers(0, 3, 25)
    lam = rng.uniform(0, 10, M)
    finals = [ordered_bma_from_probs(probs, labels, o, lam, seed).final for o in ("flat", "sharp", "random", "given")]
    assert all(f == finals[0] for f in finals)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["flat", "sharp", "random"]))
def test_prefix_uses_first_k_of_ordering(seed, order):
    rng = np.random.default_rng(seed)
    M = 6
    probs = np.stack([random_probs(rng, 30, 3) for _ in range(M)])
    labels = rng.integers(0, 3, 30)
    lam = rng.uniform(0, 10, M)
    rep = ordered_bma_from_probs(probs, labels, order, lam, seed)
    for k, row in enumerate(rep.prefix, start=1):
        want = metrics(probs[rep.order[:k]].mean(axis=0), labels)
        assert row["k"] == k
        assert row["acc"] == want[0]
        assert row["ece"] == pytest.approx(want[1], abs=1e-12)
        assert row["nll"] == pytest.approx(want[2], abs=1e-12)


def test_injected_one_hot_predictions():
    # sample i predicts class i for everything; labels all class 0
    probs = np.stack([np.tile(np.eye(3)[i], (4, 1)) for i in range(3)])
    rep = ordered_bma_from_probs(probs, np.zeros(4, dtype=int), "flat", [5.0, 1.0, 3.0])
    assert rep.order == [1, 2, 0]
    assert [r["acc"] for r in rep.prefix] == [0.0, 0.0, 100.0]
    assert rep.prefix[0]["nll"] == pytest.approx(-math.log(1e-12))
    assert rep.prefix[2]["nll"] == pytest.approx(math.log(3))


def test_ordered_bma_with_model():
    model = build_mlp(2, [], 2, norm=False)
    samples = [head_only(model, [b, -b]) for b in (1.0, -1.0, 3.0)]
    X, y = np.ones((5, 2)), np.zeros(5, dtype=int)
    rep = ordered_bma(model, samples, [2.0, 0.5, 1.0], "flat", X, y)
    assert rep.order == [1, 2, 0]
    assert rep.prefix[0]["acc"] == 0.0
    assert rep.prefix[1]["acc"] == 100.0
    assert rep.to_dict()["lambda1s"] == [2.0, 0.5, 1.0]
