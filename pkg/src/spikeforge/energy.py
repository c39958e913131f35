#!/usr/bin/env python3
"""
能耗统计
精确统计 ANN 乘加（MAC）与 SNN 累加（AC）次数，计算能耗比，并生成 λ / p / 发放函数扫描数据。
整数脉冲等级 n 经过一个突触计 n 次累加；SoftMax 指数等逐元素运算不计入。
"""

from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from spikeforge.converter import (CalibrationProfile, ConvertedNetwork, SpikeStats, calibrate, convert,
                                  snn_forward)
from spikeforge.equivalence import replicate_input, simulate_if_network
from spikeforge.errors import UndefinedRatioError
from spikeforge.neurons import DualParams
from spikeforge.tensor_net import (AttentionHead, Dataset, LayerSpec, Linear, NetworkSpec, SlotInfo,
                                   Tensor, forward, predict_class)
from utils.logger import get_logger

logger = get_logger('energy')

E_AC = 0.9   # pJ
E_MAC = 4.6  # pJ


@dataclass
class OpCounts:
    ac_snn: int = 0
    mac_snn: int = 0
    mac_ann: int = 0
    neuron_updates: int = 0
    layer_passes: int = 0

    def __add__(self, other: 'OpCounts') -> 'OpCounts':
        return OpCounts(**{k: v + getattr(other, k) for k, v in asdict(self).items()})


class OpCounter:
    """前向观察者：按层累计运算次数"""

    def __init__(self):
        self.counts = OpCounts()

    def on_layer(self, layer: LayerSpec, x: Tensor, spike_levels: Optional[Tensor],
                 prob_levels: Optional[Tensor]) -> None:
        kind = layer.kind
        c = self.counts
        c.layer_passes += 1
        if isinstance(kind, Linear):
            tokens = x.size // kind.in_dim
            macs = tokens * kind.out_dim * kind.in_dim
            c.mac_ann += macs
            if spike_levels is not None:
                c.ac_snn += int(np.abs(spike_levels).sum()) * kind.out_dim
            else:
                c.mac_snn += macs
        elif isinstance(kind, AttentionHead):
            n = x.size // kind.d_model
            fan_out = 2 * kind.d_k + kind.d_v
            projections = n * kind.d_model * fan_out
            scores = n * n * kind.d_k
            weighted = n * n * kind.d_v
            output = n * kind.d_v * kind.d_model
            c.mac_ann += projections + scores + weighted + output
            if spike_levels is not None:
                c.ac_snn += int(np.abs(spike_levels).sum()) * fan_out
            else:
                c.mac_snn += projections
            if prob_levels is not None:
                c.ac_snn += int(np.abs(prob_levels).sum()) * kind.d_v
            else:
                c.mac_snn += weighted
            c.mac_snn += scores + output

    def on_slot(self, slot: SlotInfo, x: Tensor, spike_levels: Optional[Tensor]) -> None:
        self.counts.neuron_updates += int(np.asarray(x).size)


def count_ann(net: NetworkSpec, inputs) -> int:
    counter = OpCounter()
    forward(net, inputs, observer=counter)
    return counter.counts.mac_ann


def count_snn(cnet: ConvertedNetwork, inputs) -> OpCounts:
    counter = OpCounter()
    snn_forward(cnet, inputs, observer=counter)
    return counter.counts


def count_if_snn(net: NetworkSpec, params: Dict[str, DualParams], inputs, T: int) -> OpCounts:
    """T 步 IF 网络（常数输入）的运算次数"""
    counter = OpCounter()
    simulate_if_network(net, replicate_input(inputs, T), params, observer=counter)
    return counter.counts


def energy_ratio(counts: OpCounts, approximate: bool = True, e_ac: float = E_AC,
                 e_mac: float = E_MAC) -> float:
    """近似式 (#AC·E_AC)/(#MAC_ANN·E_MAC)；approximate=False 时计入 #MAC_SNN"""
    if counts.mac_ann == 0:
        raise UndefinedRatioError("ANN 乘加次数为 0，能耗比无定义")
    numerator = counts.ac_snn * e_ac
    if not approximate:
        numerator += counts.mac_snn * e_mac
    return numerator / (counts.mac_ann * e_mac)


@dataclass
class EnergyReport:
    counts: OpCounts
    e_ac: float = E_AC
    e_mac: float = E_MAC
    ratio: float = 0.0
    full_ratio: float = 0.0
    per_slot_rates: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, counts: OpCounts, per_slot_rates: Optional[Dict[str, float]] = None,
                    e_ac: float = E_AC, e_mac: float = E_MAC) -> 'EnergyReport':
        return cls(counts, e_ac, e_mac,
                   energy_ratio(counts, True, e_ac, e_mac),
                   energy_ratio(counts, False, e_ac, e_mac),
                   dict(per_slot_rates or {}))

    def get_report(self) -> Dict:
        return {
            'ac_snn': self.counts.ac_snn,
            'mac_snn': self.counts.mac_snn,
            'mac_ann': self.counts.mac_ann,
            'neuron_updates': self.counts.neuron_updates,
            'layer_passes': self.counts.layer_passes,
            'e_ac': self.e_ac,
            'e_mac': self.e_mac,
            'ratio': self.ratio,
            'full_ratio': self.full_ratio,
            'per_slot_rates': self.per_slot_rates,
        }


@dataclass
class SnnEvaluation:
    accuracy: Optional[float]
    counts: OpCounts
    spike_stats: Dict[str, SpikeStats]
    n_samples: int

    def firing_rates(self) -> Dict[str, float]:
        return {sid: s.total_level / s.neurons if s.neurons else 0.0 for sid, s in self.spike_stats.items()}

    def energy_report(self, e_ac: float = E_AC, e_mac: float = E_MAC) -> EnergyReport:
        return EnergyReport.from_counts(self.counts, self.firing_rates(), e_ac, e_mac)


def evaluate_snn(cnet: ConvertedNetwork, data: Dataset) -> SnnEvaluation:
    """一次遍历同时得到准确率、运算次数和发放统计（逐样本计数相加）"""
    if len(data) == 0:
        raise ValueError("评估数据为空")
    totals = OpCounts()
    stats = {sid: SpikeStats() for sid in cnet.bindings}
    correct = 0
    for i in range(len(data)):
        counter = OpCounter()
        output, sample_stats = snn_forward(cnet, data.sample(i, cnet.base.input_dim), observer=counter)
        totals = totals + counter.counts
        for sid, s in sample_stats.items():
            stats[sid].total_level += s.total_level
            stats[sid].firing += s.firing
            stats[sid].neurons += s.neurons
        if data.labels is not None:
            correct += int(predict_class(output) == data.labels[i])
    accuracy = correct / len(data) if data.labels is not None else None
    return SnnEvaluation(accuracy, totals, stats, len(data))


def firing_rate_report(cnet: ConvertedNetwork, data: Dataset) -> Dict[str, float]:
    """每个槽每个神经元每个样本的平均 Σ|发放等级|"""
    return evaluate_snn(cnet, data).firing_rates()


def energy_aware_metric(weight: float) -> Callable[[ConvertedNetwork, Dataset], float]:
    """调参目标: 准确率 − weight·能耗比"""
    def metric(cnet: ConvertedNetwork, data: Dataset) -> float:
        result = evaluate_snn(cnet, data)
        return result.accuracy - weight * energy_ratio(result.counts)
    return metric


# ========================= 扫描 =========================

def sweep_lambda(net: NetworkSpec, profile: CalibrationProfile, data: Dataset, steps: int = 40,
                 M: int = 8, fire: str = 'sformer') -> List[Dict]:
    """λ_k = k/steps（k = 1..steps），列 lambda,accuracy,energy_ratio"""
    if steps < 1:
        raise ValueError(f"steps 必须 ≥ 1: {steps}")
    rows = []
    for k in range(1, steps + 1):
        lam = k / steps
        result = evaluate_snn(convert(net, profile, lam, M, fire), data)
        rows.append({'lambda': lam, 'accuracy': result.accuracy, 'energy_ratio': energy_ratio(result.counts)})
        logger.debug(f"λ={lam:.4f}: 准确率 {result.accuracy:.4f} 能耗比 {rows[-1]['energy_ratio']:.4f}")
    return rows


def sweep_p(net: NetworkSpec, calib_data: Dataset, eval_data: Dataset, p_values: Sequence[float],
            lambda_: float = 1.0, M: int = 8, fire: str = 'sformer') -> List[Dict]:
    """归一化百分位 p 的消融，列 p,accuracy,energy_ratio"""
    rows = []
    for p in p_values:
        profile = calibrate(net, calib_data, p)
        result = evaluate_snn(convert(net, profile, lambda_, M, fire), eval_data)
        rows.append({'p': float(p), 'accuracy': result.accuracy, 'energy_ratio': energy_ratio(result.counts)})
        logger.info(f"p={p}: 准确率 {result.accuracy:.4f}")
    return rows


def fire_ablation(net: NetworkSpec, profile: CalibrationProfile, data: Dataset, lambda_: float,
                  M: int = 8) -> List[Dict]:
    """发放函数 × 是否缩放（λ=1 视为不缩放），列 fire_function,scaling,lambda,accuracy,energy_ratio"""
    rows = []
    for fire in ('linear', 'exponential', 'sformer'):
        for scaling in (False, True):
            lam = lambda_ if scaling else 1.0
            result = evaluate_snn(convert(net, profile, lam, M, fire), data)
            rows.append({'fire_function': fire, 'scaling': scaling, 'lambda': lam,
                         'accuracy': result.accuracy, 'energy_ratio': energy_ratio(result.counts)})
    return rows
