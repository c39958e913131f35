#!/usr/bin/env python3
"""
时空等价校验
多时间步 IF 与单时间步 MTN 之间的三个等价关系（单神经元精确等价、线性网络等价、
双分支误差界）及 T 扫描。MTN 一侧用 Fraction 精确计算，二进制小数输入下 IF 一侧也是精确的。
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Real
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from spikeforge.converter import CalibrationProfile
from spikeforge.errors import DimensionError, NonlinearityError
from spikeforge.neurons import (BranchParams, DualIFBank, DualParams, IFParams, MTNParams,
                                dual_if_run, dual_mtn_fire, dual_mtn_fire_array, if_run, mtn_fire)
from spikeforge.tensor_net import (Dataset, LayerObserver, NetworkSpec, SlotInfo, Tensor, as_tensor,
                                   forward, linearity_probe, predict_class)
from utils.logger import get_logger

logger = get_logger('equivalence')

DEFAULT_TOLERANCE = 1e-12


# ========================= 单神经元 =========================

@dataclass(frozen=True)
class EquivCase:
    T: int
    theta: Real
    v0: Real
    xs: Tuple[Real, ...]
    seed: Optional[int] = None
    case_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'xs', tuple(self.xs))
        if self.T < 1:
            raise ValueError(f"T 必须 ≥ 1: {self.T}")
        if len(self.xs) != self.T:
            raise DimensionError(f"输入序列长度 {len(self.xs)} 与 T={self.T} 不符")
        if not self.theta > 0:
            raise ValueError(f"θ 必须为正: {self.theta}")
        if not 0 <= self.v0 < self.theta:
            raise ValueError(f"v0 必须在 [0, θ): {self.v0}")
        if any(not 0 <= x <= self.theta for x in self.xs):
            raise ValueError("输入必须在 [0, θ] 内")


def build_equivalent_mtn(theta: Real, v0: Real, T: int, exact: bool = False) -> MTNParams:
    """θ_M = θ/T，v_M(0) = v0/T，N = T + 1"""
    if T < 1:
        raise ValueError(f"T 必须 ≥ 1: {T}")
    if not theta > 0:
        raise ValueError(f"θ 必须为正: {theta}")
    if not 0 <= v0 < theta:
        raise ValueError(f"v0 必须在 [0, θ): {v0}")
    if exact:
        return MTNParams(Fraction(theta) / T, T + 1, Fraction(v0) / T)
    return MTNParams(theta / T, T + 1, v0 / T)


def _exact_mean(xs: Sequence[Real]) -> Fraction:
    return sum((Fraction(x) for x in xs), Fraction(0)) / len(xs)


@dataclass(frozen=True)
class Theorem1Result:
    equal: bool
    o_bar_if: float
    o_mtn: float
    discrepancy: float


def check_theorem1(case: EquivCase, tol: float = DEFAULT_TOLERANCE) -> Theorem1Result:
    """IF 平均输出 ō 与等价 MTN 在平均输入上的输出比较"""
    run = if_run(IFParams(case.theta, case.v0), case.xs, case.T)
    mtn = build_equivalent_mtn(case.theta, case.v0, case.T, exact=True)
    o_mtn = mtn_fire(mtn, _exact_mean(case.xs))
    o_if = sum((Fraction(o) for o in run.spikes), Fraction(0)) / case.T
    discrepancy = abs(o_if - o_mtn)
    return Theorem1Result(discrepancy <= tol, float(o_if), float(o_mtn), float(discrepancy))


def check_eq5(params: IFParams, xs: Sequence[Real]) -> bool:
    """x̄ − ō == (v(T) − v(0))/T，按有理数精确比较"""
    T = len(xs)
    run = if_run(params, xs, T)
    lhs = _exact_mean(xs) - _exact_mean(run.spikes)
    rhs = (Fraction(run.final_v) - Fraction(params.v0)) / T
    return lhs == rhs


def _dyadic(rng: np.random.Generator, bits: int, high: int, inclusive: bool = True) -> float:
    """[0, 1] 上以 2^-bits 为步长的随机二进制小数"""
    return int(rng.integers(0, high + (1 if inclusive else 0))) / 2 ** bits


def generate_theorem1_case(seed: int, case_id: int, max_T: int = 64, bits: int = 20) -> EquivCase:
    """按 (seed, case_id) 生成可单独复现的用例，全部取值为二进制小数"""
    rng = np.random.default_rng([seed, case_id])
    T = int(rng.integers(1, max_T + 1))
    theta = int(rng.integers(1, 65)) / 16
    full = 2 ** bits
    v0 = _dyadic(rng, bits, full, inclusive=False) * theta
    xs = tuple(_dyadic(rng, bits, full) * theta for _ in range(T))
    return EquivCase(T, theta, v0, xs, seed, case_id)


# ========================= 双分支误差界 =========================

@dataclass(frozen=True)
class BoundReport:
    discrepancy: float
    bound: float
    c_v: float
    passed: bool
    o_bar_if: float
    o_mtn: float
    branch: str


def check_theorem3(params: DualParams, xs: Sequence[Real], T: int,
                   tol: float = DEFAULT_TOLERANCE) -> BoundReport:
    """双分支 IF 与按同样规则构造的双分支 MTN 之差不超过 (|C_v| + θ_branch)/T"""
    if len(xs) != T:
        raise DimensionError(f"输入序列长度 {len(xs)} 与 T={T} 不符")
    run = dual_if_run(params, xs, T)
    mtn = DualParams(
        BranchParams(Fraction(params.pos.theta) / T, Fraction(params.pos.v0) / T),
        BranchParams(Fraction(params.neg.theta) / T, Fraction(params.neg.v0) / T),
        n_max=T + 1,
    )
    x_m = _exact_mean(xs)
    o_mtn = dual_mtn_fire(mtn, x_m)
    o_if = (sum((Fraction(o) for o in run.pos.spikes), Fraction(0))
            - sum((Fraction(o) for o in run.neg.spikes), Fraction(0))) / T

    v_pos_0, v_neg_0 = Fraction(params.pos.v0), Fraction(params.neg.v0)
    v_pos_T, v_neg_T = Fraction(run.v_pos), Fraction(run.v_neg)
    if x_m >= 0:
        branch = 'positive'
        c_v = v_pos_T + v_neg_0 - v_neg_T
        bound = (abs(c_v) + Fraction(params.pos.theta)) / T
    else:
        branch = 'negative'
        c_v = v_neg_T + v_pos_0 - v_pos_T
        bound = (abs(c_v) + Fraction(params.neg.theta)) / T
    discrepancy = abs(o_if - o_mtn)
    return BoundReport(
        discrepancy=float(discrepancy),
        bound=float(bound),
        c_v=float(c_v),
        passed=float(discrepancy) <= float(bound) + tol,
        o_bar_if=float(o_if),
        o_mtn=float(o_mtn),
        branch=branch,
    )


@dataclass(frozen=True)
class DualCase:
    T: int
    params: DualParams
    xs: Tuple[float, ...]
    seed: Optional[int] = None
    case_id: Optional[int] = None


def generate_theorem3_case(seed: int, case_id: int, max_T: int = 64, bits: int = 20,
                           T: Optional[int] = None) -> DualCase:
    """θ± ∈ [0.5, 2]，每步输入为 ±u·θ_branch（u 为 [0, 1] 上的二进制小数）"""
    rng = np.random.default_rng([seed, case_id])
    T = int(rng.integers(1, max_T + 1)) if T is None else T
    full = 2 ** bits
    theta_pos = int(rng.integers(8, 33)) / 16
    theta_neg = int(rng.integers(8, 33)) / 16
    params = DualParams(
        BranchParams(theta_pos, _dyadic(rng, bits, full, inclusive=False) * theta_pos),
        BranchParams(theta_neg, _dyadic(rng, bits, full, inclusive=False) * theta_neg),
        n_max=T + 1,
    )
    signs = rng.random(T) < 0.5
    xs = tuple(-_dyadic(rng, bits, full) * theta_neg if negative else _dyadic(rng, bits, full) * theta_pos
               for negative in signs)
    return DualCase(T, params, xs, seed, case_id)


# ========================= 批量校验 =========================

@dataclass
class SweepReport:
    kind: str
    seed: int
    n_cases: int = 0
    n_passed: int = 0
    max_discrepancy: float = 0.0
    worst_case_id: Optional[int] = None
    errors: List[Dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_passed == self.n_cases

    def get_report(self) -> Dict:
        return {
            'kind': self.kind,
            'n_cases': self.n_cases,
            'n_passed': self.n_passed,
            'max_discrepancy': self.max_discrepancy,
            'worst_case_seed': self.seed,
            'worst_case_id': self.worst_case_id,
            'failures': self.errors[:10],
        }


SWEEP_KINDS = ('theorem1', 'theorem3', 'eq5')


def run_case(kind: str, seed: int, case_id: int, max_T: int = 64, bits: int = 20) -> Tuple[bool, float]:
    """运行单个用例，返回 (是否通过, 差异量)；theorem3 的差异量是误差与界的比值"""
    if kind == 'theorem1':
        result = check_theorem1(generate_theorem1_case(seed, case_id, max_T, bits))
        return result.equal, result.discrepancy
    if kind == 'theorem3':
        case = generate_theorem3_case(seed, case_id, max_T, bits)
        report = check_theorem3(case.params, case.xs, case.T)
        return report.passed, report.discrepancy / report.bound if report.bound else 0.0
    if kind == 'eq5':
        case = generate_theorem1_case(seed, case_id, max_T, bits)
        return check_eq5(IFParams(case.theta, case.v0), case.xs), 0.0
    raise ValueError(f"未知校验类型: {kind}，可选 {SWEEP_KINDS}")


def run_sweep(kind: str, trials: int, seed: int, max_T: int = 64, bits: int = 20,
              progress: bool = False) -> SweepReport:
    report = SweepReport(kind, seed)
    for case_id in tqdm(range(trials), desc=kind, disable=not progress):
        passed, discrepancy = run_case(kind, seed, case_id, max_T, bits)
        report.n_cases += 1
        report.n_passed += int(passed)
        if not passed:
            report.errors.append({'case_id': case_id, 'discrepancy': discrepancy})
            logger.debug(f"{kind} 用例 {case_id} 失败: {discrepancy}")
        if report.worst_case_id is None or discrepancy > report.max_discrepancy:
            report.max_discrepancy = discrepancy
            report.worst_case_id = case_id
    logger.info(f"{kind}: {report.n_passed}/{report.n_cases} 通过，最大差异 {report.max_discrepancy}")
    return report


def bound_trend(seed: int, trials: int, T_values: Sequence[int], bits: int = 20) -> Dict[int, float]:
    """固定 T 下双分支 IF/MTN 的最大差异"""
    trend = {}
    for T in T_values:
        trend[T] = max(
            check_theorem3(case.params, case.xs, case.T).discrepancy
            for case in (generate_theorem3_case(seed, case_id, bits=bits, T=T) for case_id in range(trials))
        )
    return trend


def trace_case(kind: str, seed: int, case_id: int, max_T: int = 64, bits: int = 20) -> Dict:
    """单个用例的逐步轨迹，供 replay 展示"""
    if kind in ('theorem1', 'eq5'):
        case = generate_theorem1_case(seed, case_id, max_T, bits)
        run = if_run(IFParams(case.theta, case.v0), case.xs, case.T)
        result = check_theorem1(case)
        steps = [{'t': t + 1, 'x': x, 'h': h, 'o': o, 'v': v}
                 for t, (x, h, o, v) in enumerate(zip(case.xs, run.latent, run.spikes, run.potentials))]
        return {'kind': kind, 'T': case.T, 'theta': case.theta, 'v0': case.v0, 'steps': steps,
                'o_bar_if': result.o_bar_if, 'o_mtn': result.o_mtn, 'passed': result.equal,
                'eq5': check_eq5(IFParams(case.theta, case.v0), case.xs)}
    if kind == 'theorem3':
        case = generate_theorem3_case(seed, case_id, max_T, bits)
        run = dual_if_run(case.params, case.xs, case.T)
        report = check_theorem3(case.params, case.xs, case.T)
        steps = [{'t': t + 1, 'x': x, 'o_pos': op, 'v_pos': vp, 'o_neg': on, 'v_neg': vn}
                 for t, (x, op, vp, on, vn) in enumerate(zip(
                     case.xs, run.pos.spikes, run.pos.potentials, run.neg.spikes, run.neg.potentials))]
        return {'kind': kind, 'T': case.T, 'theta_pos': case.params.pos.theta,
                'theta_neg': case.params.neg.theta, 'steps': steps, 'o_bar_if': report.o_bar_if,
                'o_mtn': report.o_mtn, 'bound': report.bound, 'c_v': report.c_v, 'passed': report.passed}
    raise ValueError(f"未知校验类型: {kind}，可选 {SWEEP_KINDS}")


# ========================= 网络级 =========================

class _MTNSlots:
    def __init__(self, params: Dict[str, DualParams]):
        self.params = params
        self.outputs: Dict[str, np.ndarray] = {}

    def __call__(self, slot: SlotInfo, x: Tensor):
        out, counts = dual_mtn_fire_array(self.params[slot.slot_id], x)
        self.outputs[slot.slot_id] = out
        return out, counts


def simulate_if_network(net: NetworkSpec, xs_per_t: Sequence, params: Dict[str, DualParams],
                        observer: Optional[LayerObserver] = None) -> Tuple[Tensor, DualIFBank]:
    """多时间步 IF 网络（模型 I）：每步完整前向一次，输出取时间平均"""
    bank = DualIFBank(params)
    outputs = [forward(net, x, slot_fn=bank, observer=observer)[0] for x in xs_per_t]
    return np.mean(np.stack(outputs), axis=0), bank


def simulate_mtn_network(net: NetworkSpec, xs_per_t: Sequence,
                         params: Dict[str, DualParams]) -> Tuple[Tensor, _MTNSlots]:
    """单时间步 MTN 网络（模型 II）：对平均输入前向一次"""
    slots = _MTNSlots(params)
    x_mean = np.mean(np.stack([as_tensor(x) for x in xs_per_t]), axis=0)
    output, _ = forward(net, x_mean, slot_fn=slots)
    return output, slots


def equivalent_mtn_params(params: Dict[str, DualParams], T: int, n_max: int) -> Dict[str, DualParams]:
    return {
        sid: DualParams(BranchParams(p.pos.theta / T, p.pos.v0 / T),
                        BranchParams(p.neg.theta / T, p.neg.v0 / T), n_max)
        for sid, p in params.items()
    }


@dataclass
class Theorem2Report:
    equal: bool
    max_deviation: float
    layerwise: Dict[str, float]
    preconditions_hold: bool
    warnings: List[str] = field(default_factory=list)


def replicate_input(x, T: int) -> List[Tensor]:
    """常数输入复制 T 份"""
    x = as_tensor(x)
    return [x] * T


def check_theorem2(net: NetworkSpec, xs_per_t: Sequence, T: int,
                   thetas: Optional[Dict[str, float]] = None, v0_fraction: float = 0.0,
                   tol: float = 1e-9) -> Tuple[bool, Theorem2Report]:
    """线性网络中，模型 I（T 步 IF）与模型 II（单步 MTN）的输出比较；
    前提条件不满足时记录警告，equal 只作参考"""
    if len(xs_per_t) != T:
        raise DimensionError(f"输入序列长度 {len(xs_per_t)} 与 T={T} 不符")
    dims = net.input_dims()
    rng = np.random.default_rng(0)
    for layer, dim in zip(net.layers, dims):
        if not layer.is_neuron and not linearity_probe(layer, dim, rng):
            raise NonlinearityError(layer.name)

    thetas = thetas or {}
    params = {}
    for slot in net.slots():
        theta = thetas.get(slot.slot_id, 1.0)
        params[slot.slot_id] = DualParams.symmetric(theta, v0_fraction * theta)

    output_if, bank = simulate_if_network(net, xs_per_t, params)
    output_mtn, mtn_slots = simulate_mtn_network(net, xs_per_t, equivalent_mtn_params(params, T, T + 1))

    warnings = []
    for sid, inputs in bank.inputs.items():
        theta = params[sid].pos.theta
        stacked = np.stack(inputs)
        if np.any(stacked < 0) or np.any(stacked > theta):
            warnings.append(f"神经元槽 {sid} 的输入超出 [0, θ={theta}]")
    for message in warnings:
        logger.warning(message)

    layerwise = {
        sid: float(np.max(np.abs(np.mean(np.stack(bank.outputs[sid]), axis=0) - mtn_slots.outputs[sid])))
        for sid in bank.outputs
    }
    max_deviation = float(np.max(np.abs(output_if - output_mtn)))
    report = Theorem2Report(max_deviation <= tol, max_deviation, layerwise, not warnings, warnings)
    return report.equal, report


# ========================= T 扫描 =========================

@dataclass(frozen=True)
class SweepTRow:
    T: int
    acc_if: float
    acc_mtn: float
    mean_disc: float
    max_disc: float


def profile_dual_params(net: NetworkSpec, profile: CalibrationProfile,
                        v0_fraction: float) -> Dict[str, DualParams]:
    """由校准结果得到各槽 IF 参数；无负激活的槽用 θ⁺ 占位（负分支不会发放）"""
    params = {}
    for slot in net.slots():
        entry = profile.slots[slot.slot_id]
        theta_pos = entry.softmax_max if slot.follows_softmax else entry.theta_pos
        if theta_pos is None:
            raise ValueError(f"神经元槽 {slot.slot_id} 缺少 θ⁺")
        theta_neg = entry.theta_neg if entry.theta_neg is not None else theta_pos
        params[slot.slot_id] = DualParams(BranchParams(theta_pos, v0_fraction * theta_pos),
                                          BranchParams(theta_neg, v0_fraction * theta_neg))
    return params


def sweep_T(net: NetworkSpec, data: Dataset, profile: CalibrationProfile,
            T_values: Sequence[int] = (1, 2, 4, 8, 16, 32), seeds: Sequence[int] = (0, 1, 2),
            v0_fraction: float = 0.5) -> List[SweepTRow]:
    """比较 T 步 IF 网络与 N = T 的单步 MTN 网络，评估集按种子做有放回重采样"""
    if data.labels is None:
        raise ValueError("T 扫描需要带 label 的数据")
    if_params = profile_dual_params(net, profile, v0_fraction)
    rows = []
    for T in T_values:
        mtn_params = equivalent_mtn_params(if_params, T, T)
        acc_if, acc_mtn, mean_disc, max_disc = [], [], [], []
        for seed in seeds:
            sample = data.bootstrap(seed)
            correct_if = correct_mtn = 0
            discs = []
            for i in range(len(sample)):
                x = sample.sample(i, net.input_dim)
                xs = replicate_input(x, T)
                out_if, _ = simulate_if_network(net, xs, if_params)
                out_mtn, _ = simulate_mtn_network(net, xs, mtn_params)
                correct_if += int(predict_class(out_if) == sample.labels[i])
                correct_mtn += int(predict_class(out_mtn) == sample.labels[i])
                discs.append(float(np.max(np.abs(out_if - out_mtn))))
            acc_if.append(correct_if / len(sample))
            acc_mtn.append(correct_mtn / len(sample))
            mean_disc.append(float(np.mean(discs)))
            max_disc.append(float(np.max(discs)))
        row = SweepTRow(T, float(np.mean(acc_if)), float(np.mean(acc_mtn)),
                        float(np.mean(mean_disc)), float(np.max(max_disc)))
        logger.info(f"T={T}: IF 准确率 {row.acc_if:.4f} MTN 准确率 {row.acc_mtn:.4f} 平均差异 {row.mean_disc:.3e}")
        rows.append(row)
    return rows
