"""
时空等价校验测试
"""

import unittest
import sys
import os
from fractions import Fraction
from pathlib import Path

import numpy as np

# 添加src目录到路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from spikeforge.converter import calibrate
from spikeforge.errors import DimensionError, NonlinearityError
from spikeforge.equivalence import (
    EquivCase, SWEEP_KINDS, bound_trend, build_equivalent_mtn, check_eq5, check_theorem1,
    check_theorem2, check_theorem3, generate_theorem1_case, generate_theorem3_case, replicate_input,
    run_sweep, sweep_T, trace_case,
)
from spikeforge.neurons import DualParams, IFParams
from spikeforge.tensor_net import LayerSpec, NetworkSpec, NeuronSlot, ReLU, load_dataset, load_network

FIXTURES = Path(__file__).resolve().parent.parent / 'fixtures'


class TestEquivalentMTN(unittest.TestCase):
    """等价 MTN 构造测试类"""

    def test_examples(self):
        mtn = build_equivalent_mtn(1.0, 0.0, 3)
        self.assertAlmostEqual(mtn.theta_m, 1 / 3)
        self.assertEqual((mtn.v0, mtn.n_max), (0.0, 4))

        mtn = build_equivalent_mtn(2.0, 1.0, 1)
        self.assertEqual((mtn.theta_m, mtn.v0, mtn.n_max), (2.0, 1.0, 2))

        mtn = build_equivalent_mtn(1.0, 0.5, 4)
        self.assertEqual((mtn.theta_m, mtn.v0, mtn.n_max), (0.25, 0.125, 5))

    def test_exact_construction(self):
        mtn = build_equivalent_mtn(1, 0, 3, exact=True)
        self.assertEqual(mtn.theta_m, Fraction(1, 3))

    def test_preconditions(self):
        with self.assertRaises(ValueError):
            build_equivalent_mtn(1.0, 1.0, 3)
        with self.assertRaises(ValueError):
            build_equivalent_mtn(1.0, 0.0, 0)
        with self.assertRaises(ValueError):
            build_equivalent_mtn(0.0, 0.0, 2)


class TestSingleNeuronEquivalence(unittest.TestCase):
    """单神经元精确等价测试类"""

    def test_worked_example(self):
        result = check_theorem1(EquivCase(3, 1.0, 0.0, (0.5, 0.7, 0.3)))
        self.assertTrue(result.equal)
        self.assertAlmostEqual(result.o_bar_if, 1 / 3)
        self.assertAlmostEqual(result.o_mtn, 1 / 3)

    def test_all_zero(self):
        result = check_theorem1(EquivCase(4, 1.0, 0.0, (0.0,) * 4))
        self.assertEqual((result.o_bar_if, result.o_mtn), (0.0, 0.0))

    def test_case_preconditions(self):
        with self.assertRaises(DimensionError):
            EquivCase(3, 1.0, 0.0, (0.5, 0.5))
        with self.assertRaises(ValueError):
            EquivCase(2, 1.0, 0.0, (0.5, 1.5))
        with self.assertRaises(ValueError):
            EquivCase(2, 1.0, 1.0, (0.5, 0.5))

    def test_random_sweep(self):
        """10000 个随机二进制小数用例全部相等"""
        report = run_sweep('theorem1', 10000, seed=7)
        self.assertEqual(report.n_cases, 10000)
        self.assertTrue(report.passed)
        self.assertEqual(report.max_discrepancy, 0.0)

    def test_case_generation_is_reproducible(self):
        a = generate_theorem1_case(7, 123)
        b = generate_theorem1_case(7, 123)
        self.assertEqual(a, b)
        self.assertNotEqual(a, generate_theorem1_case(7, 124))
        self.assertTrue(1 <= a.T <= 64)

    def test_eq5_identity(self):
        self.assertTrue(check_eq5(IFParams(1.0), [0.5, 0.7, 0.3]))
        self.assertTrue(run_sweep('eq5', 1000, seed=3).passed)


class TestDualBound(unittest.TestCase):
    """双分支误差界测试类"""

    def test_worked_example(self):
        report = check_theorem3(DualParams.symmetric(1.0), [0.5, -0.9, 0.7], 3)
        self.assertAlmostEqual(report.discrepancy, 1 / 3)
        self.assertAlmostEqual(report.c_v, -0.7)
        self.assertAlmostEqual(report.bound, 1.7 / 3)
        self.assertTrue(report.passed)
        self.assertEqual(report.branch, 'positive')

    def test_non_negative_inputs_match_exactly(self):
        report = check_theorem3(DualParams.symmetric(1.0), [0.5, 0.75, 0.25, 1.0], 4)
        self.assertEqual(report.discrepancy, 0.0)

    def test_random_sweep(self):
        report = run_sweep('theorem3', 10000, seed=7)
        self.assertTrue(report.passed)
        self.assertLessEqual(report.max_discrepancy, 1.0)

    def test_generated_case_respects_branch_ranges(self):
        case = generate_theorem3_case(1, 5, T=16)
        self.assertEqual(case.T, 16)
        self.assertEqual(len(case.xs), 16)
        for x in case.xs:
            theta = case.params.pos.theta if x >= 0 else case.params.neg.theta
            self.assertLessEqual(abs(x), theta)

    def test_bound_shrinks_with_T(self):
        trend = bound_trend(seed=7, trials=1000, T_values=[4, 64])
        self.assertLess(trend[64], trend[4])

    def test_length_mismatch(self):
        with self.assertRaises(DimensionError):
            check_theorem3(DualParams.symmetric(1.0), [0.5], 2)


class TestNetworkEquivalence(unittest.TestCase):
    """网络级等价测试类"""

    def setUp(self):
        self.net = load_network(FIXTURES / 'linear3' / 'network.yaml')

    def test_linear_network_dyadic_inputs(self):
        rng = np.random.default_rng(42)
        for T in (1, 2, 4, 8, 16):
            x = rng.integers(0, 257, size=4) / 256
            equal, report = check_theorem2(self.net, replicate_input(x, T), T)
            self.assertTrue(report.preconditions_hold)
            self.assertTrue(equal, f"T={T}: {report.max_deviation}")
            self.assertEqual(set(report.layerwise), {'s1', 's2', 's3'})

    def test_time_varying_inputs(self):
        rng = np.random.default_rng(5)
        xs = [rng.integers(0, 257, size=4) / 256 for _ in range(8)]
        equal, report = check_theorem2(self.net, xs, 8)
        self.assertTrue(equal, report.max_deviation)

    def test_identity_network_reduces_to_single_neuron(self):
        net = NetworkSpec((LayerSpec('s', NeuronSlot('s')),), input_dim=1)
        xs = [[0.5], [0.75], [0.25], [1.0]]
        equal, report = check_theorem2(net, xs, 4)
        self.assertTrue(equal)
        single = check_theorem1(EquivCase(4, 1.0, 0.0, (0.5, 0.75, 0.25, 1.0)))
        self.assertTrue(single.equal)

    def test_relu_is_rejected(self):
        layers = list(self.net.layers)
        layers.insert(1, LayerSpec('act', ReLU()))
        net = NetworkSpec(tuple(layers), input_dim=4)
        with self.assertRaises(NonlinearityError) as ctx:
            check_theorem2(net, replicate_input(np.full(4, 0.5), 2), 2)
        self.assertEqual(ctx.exception.layer, 'act')

    def test_precondition_violation_is_warning(self):
        net = NetworkSpec((LayerSpec('s', NeuronSlot('s')),), input_dim=1)
        _, report = check_theorem2(net, [[2.0], [2.0]], 2)
        self.assertFalse(report.preconditions_hold)
        self.assertEqual(len(report.warnings), 1)


class TestSweeps(unittest.TestCase):
    """批量校验与 T 扫描测试类"""

    def test_unknown_kind(self):
        with self.assertRaises(ValueError):
            run_sweep('theorem4', 1, seed=0)

    def test_report_fields(self):
        report = run_sweep('theorem1', 20, seed=1).get_report()
        self.assertEqual(report['n_cases'], 20)
        self.assertEqual(report['n_passed'], 20)
        self.assertEqual(report['worst_case_seed'], 1)
        self.assertEqual(report['failures'], [])

    def test_trace_case(self):
        for kind in SWEEP_KINDS:
            trace = trace_case(kind, 7, 3)
            self.assertEqual(len(trace['steps']), trace['T'])
            self.assertTrue(trace['passed'])

    def test_sweep_T_on_toy_classifier(self):
        net = load_network(FIXTURES / 'toy_quadrant' / 'network.yaml')
        profile = calibrate(net, load_dataset(FIXTURES / 'toy_quadrant' / 'train.csv'), p=1.0)
        test = load_dataset(FIXTURES / 'toy_quadrant' / 'test.csv').take(range(0, 2500, 10))
        rows = sweep_T(net, test, profile, T_values=(1, 2, 4, 8), seeds=(0,))
        self.assertEqual([row.T for row in rows], [1, 2, 4, 8])
        for row in rows:
            self.assertEqual(row.max_disc, 0.0)
            self.assertEqual(row.acc_if, row.acc_mtn)


if __name__ == '__main__':
    unittest.main()
