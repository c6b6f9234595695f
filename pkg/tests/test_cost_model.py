import numpy as np
import pytest

from fedpmt.cost_model import (REFERENCE_FULL_FLOPS, DeviceProfile, apply_deadline,
                               complexity_ratios, complexity_report, flops_conv,
                               flops_fcnn, flops_masked, model_cost, round_time)
from fedpmt.exceptions import MaskLengthError
from fedpmt.masking import BpMask, build_width_menu
from fedpmt.model import build_fcnn, build_model

FCNN_MNIST = [784, 400, 300, 200, 100, 10]
CIFAR_TIERS = [0.2, 0.25, 1. / 3, 0.5, 1.]
CIFAR_RATIOS = [0.46, 0.58, 0.88, 0.94, 1.]


def profiles(tiers):
    return dict((k, DeviceProfile(k, kappa)) for k, kappa in enumerate(tiers))


def test_fcnn_mnist_partial_widths_exact():
    cost = flops_fcnn(FCNN_MNIST, 12)
    menu = build_width_menu(5, 4)
    totals = [cost.total(m) for m in menu.masks]
    assert totals[:3] == [6473760, 7496160, 9779760]
    assert totals[3] == 15301360
    assert abs(totals[3] / REFERENCE_FULL_FLOPS['fcnn_mnist'] - 1) < 5e-4


def test_flops_fcnn_agrees_with_model_cost():
    assert flops_fcnn(FCNN_MNIST, 12).bp_per_layer == \
        model_cost(build_fcnn(FCNN_MNIST), 12).bp_per_layer


def test_output_layer_only_mask():
    cost = flops_fcnn([4, 3, 2], 5)
    fp = 3 * 4 * 5 + 3 * 5 + 2 * 3 * 5 + 2 * 5
    bp_out = 2 * 5 + 2 * 5 + 2 * 5 * 3 + 2 * 3
    assert cost.total([0, 1]) == fp + bp_out


def test_cnn_mnist_widths_exact():
    spec = build_model('cnn_mnist')
    cost = model_cost(spec, 12, dense_activation=False)
    totals = [cost.total(m) for m in build_width_menu(4, 4).masks]
    assert totals == [745456, 1188336, 1597936, 1828336]


def test_cnn_cifar10_widths():
    spec = build_model('cnn_cifar10')
    cost = model_cost(spec, 20, dense_activation=False)
    totals = [cost.total(m) for m in build_width_menu(5, 5).masks]
    assert totals == [13344200, 16560200, 27970200, 30530200, 32411800]
    ratios = complexity_ratios(spec, build_width_menu(5, 5), 20)
    np.testing.assert_allclose(ratios, [0.4120, 0.5112, 0.8630, 0.9420, 1.], atol=5e-4)


def test_conv_flops():
    fp, bp = flops_conv(3, 16, 5, 28, 1)
    assert fp == 3 * 25 * 16 * 784
    assert bp == 2 * fp
    assert flops_conv(3, 16, 5, (28, 28), 4)[0] == 4 * fp


def test_per_batch_conv_scaling_costs_more():
    spec = build_model('cnn_mnist')
    assert model_cost(spec, 12, conv_scaling='per_batch').full_total > \
        model_cost(spec, 12).full_total
    with pytest.raises(ValueError):
        model_cost(spec, 12, conv_scaling='per_pixel')


def test_flops_masked_scales_with_epochs_and_data():
    spec = build_fcnn([4, 3, 2])
    one = model_cost(spec, 5).total([0, 1])
    assert flops_masked(spec, 5, [0, 1], epochs=3) == 3 * one
    assert flops_masked(spec, 5, [0, 1], dataset_size=10) == 2 * one
    tail = model_cost(spec, 2).total([0, 1])
    assert flops_masked(spec, 5, [0, 1], epochs=2, dataset_size=12) == 2 * (2 * one + tail)


def test_mask_length_mismatch():
    with pytest.raises(MaskLengthError):
        flops_fcnn([4, 3, 2], 5).total([1, 1, 1])


def test_cifar_round_times():
    assignments = dict((k, k + 1) for k in range(5))
    times, duration = round_time(assignments, CIFAR_RATIOS, profiles(CIFAR_TIERS), 10.)
    np.testing.assert_allclose([times[k] for k in range(5)], [23., 23.2, 26.4, 18.8, 10.])
    assert duration == pytest.approx(26.4)

    full = dict((k, 5) for k in range(5))
    times, duration = round_time(full, CIFAR_RATIOS, profiles(CIFAR_TIERS), 10.)
    assert duration == pytest.approx(50.)


def test_deadline_keeps_every_fedpmt_tier_and_two_fedavg_tiers():
    fedpmt_times, _ = round_time(dict((k, k + 1) for k in range(5)), CIFAR_RATIOS,
                                 profiles(CIFAR_TIERS), 10.)
    fedavg_times, _ = round_time(dict((k, 5) for k in range(5)), CIFAR_RATIOS,
                                 profiles(CIFAR_TIERS), 10.)
    assert apply_deadline(fedpmt_times, 26.5).included == [0, 1, 2, 3, 4]
    kept = apply_deadline(fedavg_times, 26.5)
    assert kept.included == [3, 4]
    assert kept.duration == pytest.approx(20.)


def test_empty_deadline_round_is_flagged():
    result = apply_deadline({0: 30., 1: 40.}, 10.)
    assert result.flagged and result.included == []
    assert result.duration == 10.
    assert apply_deadline({}, None).flagged


def test_no_deadline_keeps_everyone():
    result = apply_deadline({0: 30., 1: 40.})
    assert result.included == [0, 1] and result.duration == 40.


def test_device_profile_rejects_nonpositive_kappa():
    with pytest.raises(ValueError):
        DeviceProfile(0, 0.)


def test_complexity_report_fcnn():
    report = complexity_report('fcnn_mnist', num_widths=4)
    assert list(report['flops']) == [6473760, 7496160, 9779760, 15301360]
    assert list(report['bp_layers']) == [2, 3, 4, 5]
    assert report['ratio'].iloc[-1] == 1.
    assert report['feddrop_keep_rate'].iloc[-1] == 1.
    assert (report['feddrop_flops'] >= report['flops']).all()


def test_complexity_report_without_feddrop():
    report = complexity_report('fcnn', layer_sizes=[6, 5, 3], batch=4,
                               match_feddrop=False)
    assert len(report) == 2
    assert report['feddrop_keep_rate'].isnull().all()
    assert report['ratio_reference'].isnull().all()


def test_ratios_never_exceed_one():
    spec = build_model('cnn_cifar10')
    ratios = complexity_ratios(spec, build_width_menu(5, 5), 20)
    assert all(0 < r <= 1 for r in ratios)
    assert ratios == sorted(ratios)
    assert model_cost(spec, 20).ratio_to_full(BpMask.full(5)) == 1.
