import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedpmt.aggregation import aggregate, compute_weights
from fedpmt.exceptions import LayoutMismatchError
from fedpmt.masking import BpMask, build_width_menu
from fedpmt.model import LayerGrads, LayerParams


def two_layer(w1, w2):
    return LayerParams([(np.array(w1, dtype=float),), (np.array(w2, dtype=float),)])


def test_two_device_weights():
    weights = compute_weights([BpMask([1, 1]), BpMask([0, 1])])
    np.testing.assert_array_equal(weights[0], [1., 0.5])
    np.testing.assert_array_equal(weights[1], [0., 0.5])
    assert weights.zero_updater_layers == ()


def test_full_width_weights_are_uniform():
    weights = compute_weights([BpMask.full(3)] * 4)
    np.testing.assert_array_equal(weights.weights, np.full((4, 3), 0.25))


def test_fcnn_menu_two_devices_per_width():
    menu = build_width_menu(5, 4)
    masks = [m for m in menu.masks for _ in range(2)]
    weights = compute_weights(masks)
    np.testing.assert_array_equal(weights.weights[:, 0], [0] * 6 + [0.5, 0.5])
    np.testing.assert_array_equal(weights.weights[:, -1], [1. / 8] * 8)


def test_zero_updater_layer_is_flagged():
    weights = compute_weights([BpMask([0, 1]), BpMask([0, 1])])
    assert weights.zero_updater_layers == (0,)
    assert not weights.weights[:, 0].any()


def test_size_weighting():
    weights = compute_weights([BpMask([1, 1]), BpMask([0, 1])], sizes=[100, 300])
    np.testing.assert_allclose(weights[0], [1., 0.25])
    np.testing.assert_allclose(weights[1], [0., 0.75])


@given(st.lists(st.integers(1, 4), min_size=1, max_size=12))
def test_updated_layer_weights_sum_to_one(counts):
    masks = [BpMask.suffix(4, c) for c in counts]
    weights = compute_weights(masks).weights
    sums = weights.sum(axis=0)
    for l in range(4):
        if any(m[l] for m in masks):
            assert abs(sums[l] - 1.) < 1e-12
        else:
            assert sums[l] == 0


def test_hand_computed_two_layer_aggregation():
    old = two_layer([1., 1.], [2., 2.])
    first = LayerGrads([(np.array([0.2, 0.4]),), (np.array([1., 0.]),)], [1, 1])
    second = LayerGrads([(np.zeros(2),), (np.array([0., 1.]),)], [0, 1])
    new = aggregate(old, [first, second])
    np.testing.assert_allclose(new[0][0], [0.8, 0.6])
    np.testing.assert_allclose(new[1][0], [1.5, 1.5])


def test_untouched_layer_is_preserved():
    old = two_layer([0.1, 0.3], [2., 2.])
    update = LayerGrads([(np.zeros(2),), (np.ones(2),)], [0, 1])
    new = aggregate(old, [update, update])
    np.testing.assert_array_equal(new[0][0], old[0][0])
    assert new[0][0] is not old[0][0]


def test_single_full_device_takes_its_local_model():
    old = two_layer([1., 2.], [3., 4.])
    update = LayerGrads([(np.array([0.5, 0.25]),), (np.array([1., -1.]),)], [1, 1])
    new = aggregate(old, [update])
    np.testing.assert_array_equal(new[0][0], [0.5, 1.75])
    np.testing.assert_array_equal(new[1][0], [2., 5.])


def test_full_width_matches_mean_of_local_models():
    rng = np.random.RandomState(0)
    old = two_layer(rng.normal(size=3), rng.normal(size=(3, 2)))
    deltas = [LayerGrads([(rng.normal(size=3),), (rng.normal(size=(3, 2)),)], [1, 1])
              for _ in range(5)]
    new = aggregate(old, deltas)
    for l in range(2):
        local = [old[l][0] - d[l][0] for d in deltas]
        np.testing.assert_allclose(new[l][0], np.mean(local, axis=0), rtol=1e-12,
                                   atol=1e-14)


def test_aggregation_is_order_deterministic():
    rng = np.random.RandomState(1)
    old = two_layer(rng.normal(size=4), rng.normal(size=4))
    deltas = [LayerGrads([(rng.normal(size=4),), (rng.normal(size=4),)], [k % 2, 1])
              for k in range(6)]
    a, b = aggregate(old, deltas), aggregate(old, deltas)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u[0], v[0])


def test_layout_mismatch():
    old = two_layer([1., 2.], [3., 4.])
    bad = LayerGrads([(np.zeros(3),), (np.zeros(2),)], [1, 1])
    with pytest.raises(LayoutMismatchError):
        aggregate(old, [bad])
