"""
转换器测试
"""

import unittest
import sys
import os
import math
import tempfile
from pathlib import Path

import numpy as np

# 添加src目录到路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from spikeforge.converter import (
    SlotProfile, calibrate, convert, dump_distributions, dump_spike_levels, load_converted, load_profile,
    load_tune_result, make_sfn, make_softmax_sfn, maximize_lambda, nearest_rank, save_converted, save_profile,
    save_tune_result, snn_accuracy, snn_forward, tune_lambda,
)
from spikeforge.energy import energy_aware_metric, evaluate_snn, energy_ratio
from spikeforge.errors import CalibrationError, ConversionError, SchemaError, TuningError
from spikeforge.neurons import sfn_fire_array
from spikeforge.tensor_net import (
    AttentionHead, Dataset, LayerSpec, Linear, NetworkSpec, NeuronSlot, forward, load_dataset, load_network,
)
from utils.io import read_yaml, write_yaml

FIXTURES = Path(__file__).resolve().parent.parent / 'fixtures'


def _entry(theta_pos, theta_neg=None, slot_id='s'):
    return SlotProfile(slot_id, theta_pos, theta_neg, None, theta_neg is not None, 1, [0.0, 1.0], [1])


def _identity_net(dim=2):
    return NetworkSpec((LayerSpec('s', NeuronSlot('s')),
                        LayerSpec('fc', Linear(np.eye(dim), np.zeros(dim)))), input_dim=dim)


def _dataset(features, labels=None):
    features = np.asarray(features, dtype=np.float64)
    return Dataset(features, None if labels is None else np.asarray(labels), np.arange(len(features)))


class TestCalibration(unittest.TestCase):
    """阈值校准测试类"""

    def test_nearest_rank(self):
        values = np.arange(1.0, 101.0)
        self.assertEqual(nearest_rank(values, 1), 99.0)
        self.assertEqual(nearest_rank(values, 50), 50.0)
        self.assertEqual(nearest_rank(np.array([3.0]), 1), 3.0)

    def test_percentile_threshold(self):
        """正激活 1..100，p=1 → θ⁺ = 99"""
        data = _dataset(np.arange(1.0, 101.0).reshape(-1, 1))
        net = NetworkSpec((LayerSpec('s', NeuronSlot('s')),), input_dim=1)
        profile = calibrate(net, data, p=1)
        self.assertEqual(profile.slots['s'].theta_pos, 99.0)
        self.assertIsNone(profile.slots['s'].theta_neg)
        self.assertFalse(profile.slots['s'].has_negative)
        self.assertEqual(profile.n_samples, 100)

    def test_constant_activations(self):
        data = _dataset(np.full((10, 2), 0.75))
        for p in (0.5, 1, 25):
            profile = calibrate(_identity_net(), data, p=p)
            self.assertEqual(profile.slots['s'].theta_pos, 0.75)

    def test_negative_branch_threshold(self):
        data = _dataset(-np.arange(1.0, 101.0).reshape(-1, 1))
        net = NetworkSpec((LayerSpec('s', NeuronSlot('s')),), input_dim=1)
        profile = calibrate(net, data, p=1)
        self.assertIsNone(profile.slots['s'].theta_pos)
        self.assertEqual(profile.slots['s'].theta_neg, 99.0)

    def test_workers_give_same_profile(self):
        data = _dataset(np.random.default_rng(0).standard_normal((64, 2)))
        single = calibrate(_identity_net(), data, p=2)
        pooled = calibrate(_identity_net(), data, p=2, workers=4)
        self.assertEqual(single.digest(), pooled.digest())

    def test_softmax_max_single_token(self):
        rng = np.random.default_rng(2)
        head = AttentionHead(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)),
                             rng.standard_normal((2, 3)), rng.standard_normal((3, 2)), 1.0, softmax_slot='probs')
        net = NetworkSpec((LayerSpec('attn', head),), input_dim=3)
        profile = calibrate(net, _dataset(rng.standard_normal((5, 3))), p=1)
        self.assertEqual(profile.slots['probs'].softmax_max, 1.0)

    def test_threshold_non_increasing_in_p(self):
        data = _dataset(np.random.default_rng(4).standard_normal((200, 2)) * [1.0, 3.0])
        percentiles = (0.5, 1, 2, 5, 10, 25, 50)
        profiles = [calibrate(_identity_net(), data, p=p).slots['s'] for p in percentiles]
        for before, after in zip(profiles, profiles[1:]):
            self.assertGreaterEqual(before.theta_pos, after.theta_pos)
            self.assertGreaterEqual(before.theta_neg, after.theta_neg)

    def test_invalid_inputs(self):
        with self.assertRaises(CalibrationError):
            calibrate(_identity_net(), _dataset(np.empty((0, 2))), p=1)
        with self.assertRaises(CalibrationError):
            calibrate(_identity_net(), _dataset(np.ones((2, 2))), p=0)
        with self.assertRaises(CalibrationError):
            calibrate(_identity_net(), _dataset(np.ones((2, 2))), p=51)


class TestSFNConstruction(unittest.TestCase):
    """SFN 构造测试类"""

    def test_make_sfn_small(self):
        params = make_sfn(_entry(1.0), 1.0, 1)
        np.testing.assert_array_equal(params.fire_pos.boundaries, [0.5, 1.5])
        self.assertEqual(params.fire_pos.levels, (1, 2))
        self.assertFalse(params.signed)

    def test_make_sfn_signed_thresholds(self):
        params = make_sfn(_entry(2.0, 3.0), 0.5, 8)
        self.assertEqual(len(params.fire_pos.thresholds) + len(params.fire_neg.thresholds), 32)
        self.assertEqual(params.fire_neg.unit, 1.5)

    def test_make_sfn_missing_threshold(self):
        with self.assertRaises(ConversionError) as ctx:
            make_sfn(_entry(None), 1.0, 8)
        self.assertEqual(ctx.exception.slots, ['s'])
        entry = SlotProfile('s', 1.0, None, None, True, 1, [0.0, 1.0], [1])
        with self.assertRaises(ConversionError):
            make_sfn(entry, 1.0, 8)

    def test_softmax_thresholds(self):
        self.assertAlmostEqual(make_softmax_sfn(1.0, 8).theta_pos, 1 / 263)
        self.assertEqual(make_softmax_sfn(1.0, 1).theta_pos, 0.5)
        with self.assertRaises(ConversionError):
            make_softmax_sfn(0.0, 8)

    def test_softmax_max_fires_top_level(self):
        """最大概率落在最高等级，不被截断"""
        for fire in ('sformer', 'linear', 'exponential'):
            for M in (1, 4, 8):
                for softmax_max in (1.0, 0.8, 0.37, 1 / 3):
                    params = make_softmax_sfn(softmax_max, M, fire)
                    out, fired = sfn_fire_array(params, np.array([softmax_max]))
                    self.assertEqual(fired[0], params.fire_pos.levels[-1])
                    self.assertLessEqual(abs(out[0] - softmax_max), params.theta_pos / 2)

    def test_converted_softmax_slot_keeps_max(self):
        rng = np.random.default_rng(2)
        head = AttentionHead(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)),
                             rng.standard_normal((2, 3)), rng.standard_normal((3, 2)), 1.0, softmax_slot='probs')
        net = NetworkSpec((LayerSpec('attn', head),), input_dim=3)
        profile = calibrate(net, _dataset(rng.standard_normal((5, 3))), p=1)
        cnet = convert(net, profile, 0.5, 8)
        binding = cnet.bindings['probs']
        self.assertEqual(binding.lambda_, 1.0)
        self.assertEqual(int(sfn_fire_array(binding, np.array([1.0]))[1][0]), 263)


class TestConvertAndForward(unittest.TestCase):
    """网络转换与单步前向测试类"""

    def setUp(self):
        self.net = _identity_net()
        self.profile = calibrate(self.net, _dataset(np.linspace(-1, 1, 40).reshape(-1, 2)), p=1)

    def test_convert_binds_every_slot(self):
        cnet = convert(self.net, self.profile, 0.5, 8)
        self.assertEqual(set(cnet.bindings), {'s'})
        self.assertEqual(cnet.profile_digest, self.profile.digest())

    def test_convert_is_idempotent(self):
        once = convert(self.net, self.profile, 0.5, 8)
        twice = convert(once, self.profile, 0.5, 8)
        self.assertIs(twice.base, self.net)
        np.testing.assert_array_equal(once.bindings['s'].fire_pos.boundaries,
                                      twice.bindings['s'].fire_pos.boundaries)

    def test_convert_missing_slot(self):
        other = NetworkSpec((LayerSpec('t', NeuronSlot('t')),), input_dim=2)
        with self.assertRaises(ConversionError) as ctx:
            convert(other, self.profile, 0.5, 8)
        self.assertEqual(ctx.exception.slots, ['t'])

    def test_zero_input_zero_spikes(self):
        cnet = convert(self.net, self.profile, 1.0, 8)
        output, stats = snn_forward(cnet, np.zeros(2))
        np.testing.assert_array_equal(output, [0.0, 0.0])
        self.assertEqual(stats['s'].total_level, 0)

    def test_representable_levels_pass_through(self):
        cnet = convert(self.net, self.profile, 0.5, 8)
        unit = cnet.bindings['s'].fire_pos.unit
        x = np.array([3 * unit, 9 * unit])
        output, stats = snn_forward(cnet, x)
        np.testing.assert_array_equal(output, x)
        self.assertEqual(stats['s'].total_level, 12)

    def test_toy_output_deviation_bounded(self):
        net = load_network(FIXTURES / 'toy_quadrant' / 'network.yaml')
        train = load_dataset(FIXTURES / 'toy_quadrant' / 'train.csv')
        profile = calibrate(net, train, p=1)
        self.assertEqual(profile.slots['hidden'].theta_pos, 1.0)
        cnet = convert(net, profile, 0.5, 8)
        half_width = cnet.bindings['hidden'].fire_pos.unit / 2
        for i in range(0, len(train), 7):
            x = train.sample(i, 2)
            ann, _ = forward(net, x)
            snn, _ = snn_forward(cnet, x)
            self.assertLessEqual(float(np.max(np.abs(snn - ann))), 2 * half_width + 1e-12)


class TestLambdaSearch(unittest.TestCase):
    """λ 搜索测试类"""

    def test_quadratic_objective(self):
        for seed in range(5):
            result = maximize_lambda(lambda lam: -(lam - 0.3) ** 2, trials=50, seed=seed)
            self.assertLess(abs(result.lambda_star - 0.3), 0.05, f"seed={seed}")
            self.assertEqual(len(result.trials), 50)

    def test_constant_objective_returns_first_trial(self):
        result = maximize_lambda(lambda lam: 1.0, trials=15, seed=3)
        self.assertEqual(result.lambda_star, result.trials[0][0])

    def test_monotone_objective(self):
        result = maximize_lambda(lambda lam: lam, trials=50, seed=1)
        self.assertGreaterEqual(result.lambda_star, 0.95)

    def test_deterministic(self):
        a = maximize_lambda(lambda lam: -abs(lam - 0.6), trials=20, seed=9)
        b = maximize_lambda(lambda lam: -abs(lam - 0.6), trials=20, seed=9)
        self.assertEqual(a.trials, b.trials)

    def test_failures_score_negative_infinity(self):
        def objective(lam):
            if lam > 0.5:
                raise RuntimeError("评估失败")
            return lam

        result = maximize_lambda(objective, trials=20, seed=0)
        self.assertLessEqual(result.lambda_star, 0.5)
        self.assertTrue(any(score == -math.inf for _, score in result.trials))
        for lam, _ in result.trials:
            self.assertTrue(0 < lam <= 1)

    def test_needs_two_trials(self):
        with self.assertRaises(ValueError):
            maximize_lambda(lambda lam: lam, trials=1)

    def test_all_trials_failing_raises(self):
        def objective(lam):
            raise RuntimeError("评估失败")

        with self.assertRaises(TuningError):
            maximize_lambda(objective, trials=12, seed=0)

    def test_tune_lambda_validates_data(self):
        net = load_network(FIXTURES / 'toy_quadrant' / 'network.yaml')
        train = load_dataset(FIXTURES / 'toy_quadrant' / 'train.csv')
        profile = calibrate(net, train, p=1)
        unlabelled = Dataset(train.features, None, train.sample_ids, train.feature_names)
        with self.assertRaises(SchemaError) as ctx:
            tune_lambda(net, profile, unlabelled, trials=5)
        self.assertEqual(ctx.exception.field, 'label')
        with self.assertRaises(TuningError):
            tune_lambda(net, profile, train.take([]), trials=5)

    def test_toy_end_to_end(self):
        """校准 → 按能耗加权目标调参 → 测试集评估"""
        net = load_network(FIXTURES / 'toy_quadrant' / 'network.yaml')
        train = load_dataset(FIXTURES / 'toy_quadrant' / 'train.csv')
        test = load_dataset(FIXTURES / 'toy_quadrant' / 'test.csv').take(range(0, 2500, 5))
        profile = calibrate(net, train, p=1)
        result = tune_lambda(net, profile, train, energy_aware_metric(0.01), trials=20, seed=0)
        self.assertLessEqual(result.lambda_star, 0.5)

        evaluation = evaluate_snn(convert(net, profile, result.lambda_star, 8), test)
        self.assertGreaterEqual(evaluation.accuracy, 0.98)
        self.assertLess(energy_ratio(evaluation.counts), 1.0)

    def test_accuracy_drops_above_half(self):
        net = load_network(FIXTURES / 'toy_quadrant' / 'network.yaml')
        train = load_dataset(FIXTURES / 'toy_quadrant' / 'train.csv')
        profile = calibrate(net, train, p=1)
        self.assertEqual(snn_accuracy(convert(net, profile, 0.5, 8), train), 1.0)
        self.assertLess(snn_accuracy(convert(net, profile, 0.75, 8), train), 1.0)


class TestDocuments(unittest.TestCase):
    """校准与转换文件测试类"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.net = load_network(FIXTURES / 'toy_quadrant' / 'network.yaml')
        self.train = load_dataset(FIXTURES / 'toy_quadrant' / 'train.csv')
        self.profile = calibrate(self.net, self.train, p=1)

    def tearDown(self):
        self.tmp.cleanup()

    def test_profile_round_trip(self):
        path = save_profile(self.profile, self.dir / 'profile.yaml')
        again = load_profile(path)
        self.assertEqual(again.digest(), self.profile.digest())

    def test_profile_schema_error(self):
        doc = self.profile.to_document()
        doc['slots']['hidden']['theta_pos'] = -1.0
        write_yaml(doc, self.dir / 'bad.yaml')
        with self.assertRaises(SchemaError) as ctx:
            load_profile(self.dir / 'bad.yaml')
        self.assertEqual(ctx.exception.field, 'slots.hidden.theta_pos')

    def test_converted_round_trip(self):
        cnet = convert(self.net, self.profile, 0.375, 8)
        again = load_converted(save_converted(cnet, self.dir / 'model.yaml'))
        self.assertEqual(again.lambda_, 0.375)
        self.assertEqual(again.profile_digest, cnet.profile_digest)
        sample = self.train.take(range(0, 676, 13))
        self.assertEqual(snn_accuracy(again, sample), snn_accuracy(cnet, sample))

    def test_tune_result_round_trip(self):
        """失败的试验以 −inf 分数写出并读回"""
        def objective(lam):
            if lam > 0.5:
                raise RuntimeError("评估失败")
            return lam

        result = maximize_lambda(objective, trials=12, seed=0)
        again = load_tune_result(save_tune_result(result, self.dir / 'tune.yaml'))
        self.assertEqual(again.lambda_star, result.lambda_star)
        self.assertEqual(again.trials, result.trials)
        self.assertEqual(again.seed, 0)

        doc = read_yaml(self.dir / 'tune.yaml')
        doc['trials'][0]['lambda'] = 1.5
        write_yaml(doc, self.dir / 'tune.yaml')
        with self.assertRaises(SchemaError) as ctx:
            load_tune_result(self.dir / 'tune.yaml')
        self.assertEqual(ctx.exception.field, 'trials.0.lambda')

    def test_converted_slots_must_match_network(self):
        doc = read_yaml(save_converted(convert(self.net, self.profile, 0.5, 8), self.dir / 'model.yaml'))
        doc['slots']['extra'] = dict(doc['slots']['hidden'])
        write_yaml(doc, self.dir / 'model.yaml')
        with self.assertRaises(SchemaError):
            load_converted(self.dir / 'model.yaml')

    def test_distribution_dumps(self):
        import pandas as pd

        hist = pd.read_csv(dump_distributions(self.profile, self.dir / 'hist.csv'))
        self.assertEqual(list(hist.columns), ['slot', 'bin_left', 'bin_right', 'count'])
        self.assertEqual(int(hist['count'].sum()), self.profile.slots['hidden'].n_values)

        subset = self.train.take(range(10))
        levels = pd.read_csv(dump_spike_levels(self.net, self.profile, subset, [0.5, 1.0], 8,
                                               self.dir / 'levels.csv'))
        self.assertEqual(list(levels.columns), ['slot', 'lambda', 'level', 'count'])
        for lam in (0.5, 1.0):
            self.assertEqual(int(levels[levels['lambda'] == lam]['count'].sum()), 10 * 4)


if __name__ == '__main__':
    unittest.main()
