import numpy as np
import pytest

from fedpmt.cost_model import DeviceProfile, model_cost
from fedpmt.data import Dataset
from fedpmt.exceptions import (InvalidKeepRateError, PlanMismatchError,
                               TargetOutOfRangeError)
from fedpmt.masking import BpMask, build_width_menu, local_update
from fedpmt.model import LayerGrads, build_cnn_cifar10, build_fcnn_mnist
from fedpmt.strategies import (DEVICE_CHOSEN, SERVER_ASSIGNED, DeviceCapability,
                               choose_width, feddrop_aggregate, feddrop_expand,
                               feddrop_generate, feddrop_match_rate, feddrop_round,
                               feddrop_submodel_spec, feddrop_time, fedavg_round,
                               fedpmt_assign_option1, fedpmt_assign_option2,
                               fedpmt_round, kept_count, submodel_flops)

CIFAR_TIERS = [0.2, 0.25, 1. / 3, 0.5, 1.]
CIFAR_RATIOS = [0.46, 0.58, 0.88, 0.94, 1.]


def device_data(num_devices, n=12, seed=0):
    rng = np.random.RandomState(seed)
    return dict((k, Dataset(rng.normal(size=(n, 6)), rng.randint(0, 3, size=n), 3))
                for k in range(num_devices))


def assert_params_equal(a, b):
    for u, v in zip(a, b):
        for x, y in zip(u, v):
            np.testing.assert_array_equal(x, y)


def assert_params_close(a, b):
    # global - (global - final) may differ from final in the last bit
    for u, v in zip(a, b):
        for x, y in zip(u, v):
            np.testing.assert_allclose(x, y, rtol=0, atol=1e-15)


def test_five_tiers_get_five_widths_in_order():
    widths = [choose_width(k, CIFAR_TIERS, CIFAR_RATIOS)[0] for k in CIFAR_TIERS]
    assert widths == [1, 2, 3, 4, 5]


def test_more_tiers_than_widths_floor_at_one():
    tiers = [0.1, 0.2, 0.5, 1.]
    assert [choose_width(k, tiers, [0.5, 1.])[0] for k in tiers] == [1, 1, 1, 2]


def test_fewer_tiers_than_widths_take_the_widest():
    tiers = [0.5, 1.]
    assert [choose_width(k, tiers, [0.4, 0.5, 0.6, 1.])[0] for k in tiers] == [3, 4]


def test_max_ratio_demotes_and_flags():
    assert choose_width(1., CIFAR_TIERS, CIFAR_RATIOS, max_ratio=0.9) == (3, False)
    assert choose_width(1., CIFAR_TIERS, CIFAR_RATIOS, max_ratio=0.1) == (1, True)


def test_unknown_tier():
    with pytest.raises(ValueError):
        choose_width(0.3, CIFAR_TIERS, CIFAR_RATIOS)


def test_option1_assigns_by_tier():
    menu = build_width_menu(5, 5)
    profiles = [DeviceProfile(k, kappa) for k, kappa in enumerate(CIFAR_TIERS)]
    assignment = fedpmt_assign_option1(profiles, menu, CIFAR_RATIOS, CIFAR_TIERS)
    assert assignment.widths == {0: 1, 1: 2, 2: 3, 3: 4, 4: 5}
    assert assignment.provenance == SERVER_ASSIGNED
    assert assignment.masks(menu)[0] == BpMask([0, 0, 0, 0, 1])


def test_option1_time_budget_warns_for_infeasible_devices():
    menu = build_width_menu(5, 5)
    profiles = [DeviceProfile(0, 0.2), DeviceProfile(1, 1.)]
    with pytest.warns(UserWarning):
        assignment = fedpmt_assign_option1(profiles, menu, CIFAR_RATIOS, CIFAR_TIERS,
                                           time_budget=20., base_full_time=10.)
    assert assignment.flagged == frozenset([0])
    assert assignment.widths == {0: 1, 1: 5}


def test_option2_matches_option1():
    menu = build_width_menu(5, 5)
    profiles = [DeviceProfile(k, kappa) for k, kappa in enumerate(CIFAR_TIERS)]
    caps = dict((p.device_id, DeviceCapability(p.kappa)) for p in profiles)
    server = fedpmt_assign_option1(profiles, menu, CIFAR_RATIOS, CIFAR_TIERS)
    devices = fedpmt_assign_option2(caps, menu, CIFAR_RATIOS, CIFAR_TIERS)
    assert devices == server
    assert devices.provenance == DEVICE_CHOSEN


def test_fedavg_single_device_takes_local_model(fcnn_spec, fcnn_params):
    data = device_data(1)
    new, _ = fedavg_round(fcnn_spec, fcnn_params, data, [0], 0.1, 1, 4, {0: 5})
    _, local = local_update(fcnn_spec, fcnn_params, data[0], [1, 1, 1], 0.1, 1, 4, 5)
    assert_params_close(new, local)


@pytest.mark.parametrize('strategy', ['fedavg', 'fedpmt'])
def test_single_device_many_steps_takes_local_model(fcnn_spec, fcnn_params, strategy):
    data = device_data(1, n=20)
    if strategy == 'fedavg':
        new, _ = fedavg_round(fcnn_spec, fcnn_params, data, [0], 0.1, 5, 4, {0: 9})
    else:
        new, _ = fedpmt_round(fcnn_spec, fcnn_params, data, {0: BpMask.full(3)}, 0.1, 5, 4,
                              {0: 9})
    _, local = local_update(fcnn_spec, fcnn_params, data[0], [1, 1, 1], 0.1, 5, 4, 9)
    assert_params_close(new, local)


def test_full_menu_fedpmt_equals_fedavg(fcnn_spec, fcnn_params):
    data = device_data(4)
    seeds = dict((k, [0, 1, k]) for k in data)
    menu = build_width_menu(3, 1)
    masks = dict((k, menu.mask(1)) for k in data)
    a, _ = fedpmt_round(fcnn_spec, fcnn_params, data, masks, 0.1, 3, 4, seeds)
    b, _ = fedavg_round(fcnn_spec, fcnn_params, data, sorted(data), 0.1, 3, 4, seeds)
    assert_params_equal(a, b)


def test_round_is_thread_count_independent(fcnn_spec, fcnn_params):
    data = device_data(4)
    seeds = dict((k, k) for k in data)
    menu = build_width_menu(3, 3)
    masks = dict((k, menu.mask(1 + k % 3)) for k in data)
    a, updates = fedpmt_round(fcnn_spec, fcnn_params, data, masks, 0.1, 2, 4, seeds, n_jobs=1)
    b, _ = fedpmt_round(fcnn_spec, fcnn_params, data, masks, 0.1, 2, 4, seeds, n_jobs=2)
    assert_params_equal(a, b)
    assert updates[0].updated_flags == (False, False, True)


def test_first_layer_only_moves_with_a_full_device(fcnn_spec, fcnn_params):
    data = device_data(2)
    masks = {0: BpMask([0, 1, 1]), 1: BpMask([0, 0, 1])}
    new, _ = fedpmt_round(fcnn_spec, fcnn_params, data, masks, 0.1, 2, 4, {0: 0, 1: 1})
    for a, b in zip(new[0], fcnn_params[0]):
        np.testing.assert_array_equal(a, b)
    assert not np.array_equal(new[1][0], fcnn_params[1][0])


def test_kept_count():
    assert kept_count(400, 0.54) == 216
    assert kept_count(10, 0.01) == 1
    assert kept_count(100, 1.) == 100


def test_submodel_spec_shapes(fcnn_spec):
    sub = feddrop_submodel_spec(fcnn_spec, 0.5)
    assert [l.param_shapes()[0] for l in sub.trainable_layers] == [(6, 3), (3, 2), (2, 3)]


def test_submodel_spec_after_convolutions(cnn_spec):
    sub = feddrop_submodel_spec(cnn_spec, 0.5)
    conv, hidden, out = sub.trainable_layers
    assert (conv.in_channels, conv.out_channels) == (1, 1)
    assert (hidden.in_features, hidden.out_features) == (9, 2)
    assert (out.in_features, out.out_features) == (2, 3)


@pytest.mark.parametrize('rate', [0., -0.1, 1.5])
def test_invalid_keep_rate(fcnn_spec, fcnn_params, rate):
    with pytest.raises(InvalidKeepRateError):
        feddrop_generate(fcnn_params, fcnn_spec, rate, 0)


def test_generate_extracts_and_rescales(fcnn_spec, fcnn_params):
    sub, sub_spec, plan = feddrop_generate(fcnn_params, fcnn_spec, 0.5, 3)
    assert sub.shapes() == [tuple(s) for s in sub_spec.block_shapes()]
    first, second = plan.kept_outputs[0], plan.kept_outputs[1]
    np.testing.assert_array_equal(sub[0][0], fcnn_params[0][0][:, first])
    np.testing.assert_array_equal(sub[1][0],
                                  fcnn_params[1][0][np.ix_(first, second)] * 2.)
    np.testing.assert_array_equal(plan.kept_outputs[2], np.arange(3))


def test_full_keep_rate_submodel_is_the_model(fcnn_spec, fcnn_params):
    sub, sub_spec, _ = feddrop_generate(fcnn_params, fcnn_spec, 1., 0)
    assert sub_spec == fcnn_spec
    assert_params_equal(sub, fcnn_params)


def test_expand_places_delta_in_global_coordinates(fcnn_spec, fcnn_params):
    sub, sub_spec, plan = feddrop_generate(fcnn_params, fcnn_spec, 0.5, 1)
    delta = LayerGrads([tuple(np.ones_like(a) for a in block) for block in sub],
                       [1, 1, 1])
    blocks, members = feddrop_expand(delta, plan, fcnn_spec)
    assert members[0][0].sum() == 6 * 3
    assert blocks[0][0].sum() == 6 * 3
    np.testing.assert_allclose(blocks[1][0].sum(), 3 * 2 * 0.5)
    assert not blocks[0][0][:, np.setdiff1d(np.arange(5), plan.kept_outputs[0])].any()
    with pytest.raises(PlanMismatchError):
        feddrop_expand(LayerGrads([b for b in fcnn_params], [1, 1, 1]), plan, fcnn_spec)


def test_feddrop_aggregate_keeps_unowned_parameters(fcnn_spec, fcnn_params):
    sub, _, plan = feddrop_generate(fcnn_params, fcnn_spec, 0.5, 2)
    delta = LayerGrads([tuple(np.ones_like(a) for a in block) for block in sub],
                       [1, 1, 1])
    new = feddrop_aggregate(fcnn_params, fcnn_spec, [(delta, plan)])
    dropped = np.setdiff1d(np.arange(5), plan.kept_outputs[0])
    np.testing.assert_array_equal(new[0][0][:, dropped], fcnn_params[0][0][:, dropped])
    np.testing.assert_allclose(new[0][0][:, plan.kept_outputs[0]],
                               fcnn_params[0][0][:, plan.kept_outputs[0]] - 1.)


@pytest.mark.parametrize('rate', [0.3, 0.5, 0.8, 1.])
def test_reinserting_zero_deltas_reproduces_the_model(fcnn_spec, fcnn_params, rate):
    updates = []
    for seed in range(3):
        sub, _, plan = feddrop_generate(fcnn_params, fcnn_spec, rate, seed)
        zero = LayerGrads([tuple(np.zeros_like(a) for a in block) for block in sub],
                          [1, 1, 1])
        updates.append((zero, plan))
    assert_params_equal(feddrop_aggregate(fcnn_params, fcnn_spec, updates), fcnn_params)


def test_expanded_submodel_weights_land_on_their_origin(fcnn_spec, fcnn_params):
    # rescale 2 is a power of two, so undoing it is exact
    sub, _, plan = feddrop_generate(fcnn_params, fcnn_spec, 0.5, 4)
    blocks, members = feddrop_expand(LayerGrads(list(sub), [1, 1, 1]), plan, fcnn_spec)
    for l, old in enumerate(fcnn_params):
        for i, array in enumerate(old):
            np.testing.assert_array_equal(blocks[l][i][members[l][i]],
                                          array[members[l][i]])


def test_match_rate_is_monotone_in_the_target():
    spec = build_fcnn_mnist()
    full = model_cost(spec, 12).full_total
    targets = np.linspace(0.3, 1., 15) * full
    rates = [feddrop_match_rate(t, spec, 12) for t in targets]
    assert all(a <= b for a, b in zip(rates, rates[1:]))
    assert rates[-1] == 1.


def test_cnn_cifar10_match_rate():
    # cost 16,077,200 needs about 0.72 of every layer; 0.54 falls well short
    spec = build_cnn_cifar10()
    matched = feddrop_match_rate(16077200, spec, 20)
    assert 0.68 <= matched <= 0.76
    assert submodel_flops(spec, matched, 20) >= 16077200
    assert submodel_flops(spec, 0.54, 20) < 16077200


def test_full_keep_rate_feddrop_equals_fedavg(fcnn_spec, fcnn_params):
    data = device_data(3)
    seeds = dict((k, [7, k]) for k in data)
    a, _ = feddrop_round(fcnn_spec, fcnn_params, data, dict((k, 1.) for k in data),
                         0.1, 2, 4, seeds)
    b, _ = fedavg_round(fcnn_spec, fcnn_params, data, sorted(data), 0.1, 2, 4, seeds)
    assert_params_equal(a, b)


def test_feddrop_round_runs_partial_submodels(fcnn_spec, fcnn_params):
    data = device_data(3)
    new, plans = feddrop_round(fcnn_spec, fcnn_params, data, {0: 0.5, 1: 0.8, 2: 0.5},
                               0.1, 2, 4, {0: 0, 1: 1, 2: 2})
    assert sorted(plans) == [0, 1, 2]
    assert new.shapes() == fcnn_params.shapes()


@pytest.mark.parametrize('flops, rate', [(6473760, 0.54), (7496160, 0.61),
                                         (9779760, 0.73)])
def test_fcnn_mnist_feddrop_rates(flops, rate):
    spec = build_fcnn_mnist()
    matched = feddrop_match_rate(flops, spec, 12)
    assert abs(matched - rate) <= 0.02
    assert submodel_flops(spec, matched, 12) >= flops


def test_full_cost_target_matches_rate_one():
    spec = build_fcnn_mnist()
    assert feddrop_match_rate(model_cost(spec, 12).full_total, spec, 12) == 1.


def test_unreachable_target():
    spec = build_fcnn_mnist()
    with pytest.raises(TargetOutOfRangeError):
        feddrop_match_rate(10 ** 9, spec, 12)
    with pytest.raises(TargetOutOfRangeError):
        feddrop_match_rate(10, spec, 12)


def test_feddrop_generate_is_seeded(fcnn_spec, fcnn_params):
    a = feddrop_generate(fcnn_params, fcnn_spec, 0.6, [1, 2, 3])[2]
    b = feddrop_generate(fcnn_params, fcnn_spec, 0.6, [1, 2, 3])[2]
    for x, y in zip(a.kept_outputs, b.kept_outputs):
        np.testing.assert_array_equal(x, y)


def test_feddrop_time_scales_with_submodel_cost():
    spec = build_fcnn_mnist()
    assert feddrop_time(spec, 1., 0.5, 10., 12) == pytest.approx(20.)
    assert feddrop_time(spec, 0.54, 1., 10., 12) < 10.
