#!/usr/bin/env python3
"""
ANN→SNN 转换器
校准（百分位阈值）、SFN 构造、网络转换、单时间步 SNN 前向、λ 贝叶斯优化以及相关文件读写
"""

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from bayes_opt import BayesianOptimization, acquisition
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from spikeforge.errors import CalibrationError, ConversionError, SchemaError, TuningError
from spikeforge.neurons import FireFunction, SFNParams, fire_levels, sfn_fire_array
from spikeforge.tensor_net import (Dataset, LayerObserver, NetworkSpec, SlotInfo, Tensor, forward,
                                   network_from_document, network_to_document, predict_class)
from utils.io import PathLike, dump_yaml_text, pydantic_field_path, read_yaml, write_csv, write_yaml
from utils.logger import get_logger

logger = get_logger('converter')

SCHEMA_VERSION = 1
DEFAULT_BINS = 256
LAMBDA_MIN = 1e-3
FAILED_TRIAL_MARGIN = 1.0


# ========================= 校准 =========================

@dataclass
class SlotStatistics:
    """单个神经元槽的激活样本，合并操作满足交换律（多重集并）"""
    values: List[np.ndarray] = field(default_factory=list)

    def add(self, x: np.ndarray):
        self.values.append(np.asarray(x, dtype=np.float64).ravel())

    def merge(self, other: 'SlotStatistics') -> 'SlotStatistics':
        return SlotStatistics(self.values + other.values)

    def collect(self) -> np.ndarray:
        if not self.values:
            return np.empty(0)
        return np.sort(np.concatenate(self.values))


@dataclass
class SlotProfile:
    slot_id: str
    theta_pos: Optional[float]
    theta_neg: Optional[float]
    softmax_max: Optional[float]
    has_negative: bool
    n_values: int
    hist_edges: List[float]
    hist_counts: List[int]


@dataclass
class CalibrationProfile:
    slots: Dict[str, SlotProfile]
    p: float
    n_samples: int

    def to_document(self) -> Dict:
        return {
            'schema_version': SCHEMA_VERSION,
            'p': float(self.p),
            'n_samples': int(self.n_samples),
            'slots': {
                sid: {
                    'theta_pos': s.theta_pos,
                    'theta_neg': s.theta_neg,
                    'softmax_max': s.softmax_max,
                    'has_negative': s.has_negative,
                    'n_values': s.n_values,
                    'histogram': {'edges': s.hist_edges, 'counts': s.hist_counts},
                }
                for sid, s in self.slots.items()
            },
        }

    def digest(self) -> str:
        """规范化文档的 SHA-256"""
        return hashlib.sha256(dump_yaml_text(self.to_document()).encode('utf-8')).hexdigest()


def nearest_rank(sorted_values: np.ndarray, p: float) -> float:
    """最近秩百分位: 第 ⌈(1 − p/100)·n⌉ 个（升序、从 1 计）"""
    n = len(sorted_values)
    rank = math.ceil((100 - Fraction(repr(float(p)))) * n / 100)
    return float(sorted_values[max(rank, 1) - 1])


def _collect_chunk(net: NetworkSpec, data: Dataset, indices: Sequence[int]) -> Dict[str, SlotStatistics]:
    slots = net.slots()
    keys = [slot.record_key for slot in slots]
    stats = {slot.slot_id: SlotStatistics() for slot in slots}
    for i in indices:
        _, recorded = forward(net, data.sample(i, net.input_dim), record=keys)
        for slot in slots:
            stats[slot.slot_id].add(recorded[slot.record_key])
    return stats


def _merge_stats(a: Dict[str, SlotStatistics], b: Dict[str, SlotStatistics]) -> Dict[str, SlotStatistics]:
    return {sid: a[sid].merge(b[sid]) for sid in a}


def calibrate(net: NetworkSpec, data: Dataset, p: float, bins: int = DEFAULT_BINS,
              workers: int = 1) -> CalibrationProfile:
    """统计每个神经元槽的输入激活，按百分位 p 确定 θ⁺ / θ⁻"""
    if not 0 < p <= 50:
        raise CalibrationError(f"p 必须在 (0, 50]: {p}")
    if len(data) == 0:
        raise CalibrationError("校准数据为空")
    slots = net.slots()
    if not slots:
        raise CalibrationError("网络中没有神经元槽")

    chunks = np.array_split(np.arange(len(data)), max(1, min(workers, len(data))))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(lambda idx: _collect_chunk(net, data, idx), chunks))
    else:
        parts = [_collect_chunk(net, data, chunk) for chunk in chunks]
    merged = reduce(_merge_stats, parts)

    profiles = {}
    for slot in slots:
        values = merged[slot.slot_id].collect()
        positives = values[values > 0]
        negatives = np.sort(-values[values < 0])
        theta_pos = nearest_rank(positives, p) if positives.size else None
        theta_neg = nearest_rank(negatives, p) if negatives.size else None
        if theta_pos is None:
            logger.warning(f"神经元槽 {slot.slot_id} 没有正激活，θ⁺ 未定义")
        counts, edges = np.histogram(values, bins=bins)
        profiles[slot.slot_id] = SlotProfile(
            slot_id=slot.slot_id,
            theta_pos=theta_pos,
            theta_neg=theta_neg,
            softmax_max=float(values.max()) if slot.follows_softmax else None,
            has_negative=bool(negatives.size),
            n_values=int(values.size),
            hist_edges=[float(e) for e in edges],
            hist_counts=[int(c) for c in counts],
        )
        logger.info(f"校准神经元槽 {slot.slot_id}: θ⁺={theta_pos} θ⁻={theta_neg} 样本值 {values.size}")
    return CalibrationProfile(profiles, float(p), len(data))


# ========================= SFN 构造与转换 =========================

def make_sfn(entry: SlotProfile, lambda_: float, M: int, fire: str = 'sformer') -> SFNParams:
    """由校准结果构造 SFN；只有出现过负激活的槽才有负分支"""
    if entry.theta_pos is None:
        raise ConversionError(f"神经元槽 {entry.slot_id} 缺少 θ⁺", slots=[entry.slot_id])
    if not 0 < lambda_ <= 1:
        raise ConversionError(f"λ 必须在 (0, 1]: {lambda_}")
    levels = fire_levels(fire, M)
    fire_pos = FireFunction.from_levels(levels, lambda_ * entry.theta_pos)
    theta_neg, fire_neg = None, None
    if entry.has_negative:
        if entry.theta_neg is None:
            raise ConversionError(f"神经元槽 {entry.slot_id} 缺少 θ⁻", slots=[entry.slot_id])
        theta_neg = entry.theta_neg
        fire_neg = FireFunction.from_levels(levels, lambda_ * theta_neg)
    return SFNParams(lambda_, entry.theta_pos, fire_pos, theta_neg, fire_neg)


def make_softmax_sfn(softmax_max: float, M: int, fire: str = 'sformer') -> SFNParams:
    """SoftMax 之后的槽: θ = softmax_max / y_max，λ 固定为 1，只有正分支"""
    if softmax_max is None or not softmax_max > 0:
        raise ConversionError(f"softmax_max 必须为正: {softmax_max}")
    levels = fire_levels(fire, M)
    theta = softmax_max / levels[-1]
    return SFNParams(1.0, theta, FireFunction.from_levels(levels, theta))


@dataclass(frozen=True, eq=False)
class ConvertedNetwork:
    base: NetworkSpec
    bindings: Dict[str, SFNParams]
    lambda_: float
    M: int
    fire: str = 'sformer'
    profile_digest: str = ''


def convert(net: Union[NetworkSpec, ConvertedNetwork], profile: CalibrationProfile, lambda_: float,
            M: int, fire: str = 'sformer') -> ConvertedNetwork:
    """为每个神经元槽绑定 SFN；对已转换网络再次转换只会重新绑定"""
    if isinstance(net, ConvertedNetwork):
        net = net.base
    slots = net.slots()
    missing = [slot.slot_id for slot in slots if slot.slot_id not in profile.slots]
    if missing:
        raise ConversionError(f"校准结果缺少神经元槽: {missing}", slots=missing)

    bindings = {}
    for slot in slots:
        entry = profile.slots[slot.slot_id]
        if slot.follows_softmax:
            bindings[slot.slot_id] = make_softmax_sfn(entry.softmax_max, M, fire)
        else:
            bindings[slot.slot_id] = make_sfn(entry, lambda_, M, fire)
    return ConvertedNetwork(net, bindings, float(lambda_), M, fire, profile.digest())


@dataclass
class SpikeStats:
    total_level: int = 0   # Σ|发放等级|
    firing: int = 0        # 发放等级非零的神经元数
    neurons: int = 0

    def add(self, levels: np.ndarray):
        self.total_level += int(np.abs(levels).sum())
        self.firing += int(np.count_nonzero(levels))
        self.neurons += int(levels.size)


def snn_forward(cnet: ConvertedNetwork, inputs,
                observer: Optional[LayerObserver] = None) -> Tuple[Tensor, Dict[str, SpikeStats]]:
    """单时间步 SNN 前向，每个神经元槽按绑定的 SFN 发放一次"""
    stats = {sid: SpikeStats() for sid in cnet.bindings}

    def slot_fn(slot: SlotInfo, x: Tensor):
        out, levels = sfn_fire_array(cnet.bindings[slot.slot_id], x)
        stats[slot.slot_id].add(levels)
        return out, levels

    output, _ = forward(cnet.base, inputs, slot_fn=slot_fn, observer=observer)
    return output, stats


def snn_accuracy(cnet: ConvertedNetwork, data: Dataset) -> float:
    if data.labels is None:
        raise SchemaError("评估需要 label 列", field='label')
    correct = 0
    for i in range(len(data)):
        output, _ = snn_forward(cnet, data.sample(i, cnet.base.input_dim))
        correct += int(predict_class(output) == data.labels[i])
    return correct / len(data)


# ========================= λ 贝叶斯优化 =========================

@dataclass
class TuneResult:
    lambda_star: float
    best_score: float
    trials: List[Tuple[float, float]]
    seed: int

    def to_document(self) -> Dict:
        return {
            'schema_version': SCHEMA_VERSION,
            'lambda_star': float(self.lambda_star),
            'best_score': float(self.best_score),
            'seed': int(self.seed),
            'trials': [{'lambda': float(lam), 'score': float(score)} for lam, score in self.trials],
        }


def maximize_lambda(objective: Callable[[float], float], trials: int = 50, seed: int = 0,
                    init_points: int = 10, xi: float = 0.01) -> TuneResult:
    """先做 init_points 次随机探测，再按期望提升选点；评估失败记为 −∞，并列取最早的探测"""
    if trials < 2:
        raise ValueError(f"trials 必须 ≥ 2: {trials}")
    scores: List[float] = []

    def target(lambda_: float) -> float:
        try:
            score = float(objective(float(lambda_)))
        except Exception as e:
            logger.warning(f"λ={lambda_:.6f} 评估失败，记为 −∞: {e}")
            score = -math.inf
        if math.isnan(score):
            score = -math.inf
        scores.append(score)
        logger.debug(f"试验 {len(scores)}/{trials}: λ={lambda_:.6f} score={score}")
        if math.isfinite(score):
            return score
        # 高斯过程只接受有限值，失败的试验按当前最差分数再低一档交给优化器
        finite = [s for s in scores if math.isfinite(s)]
        return (min(finite) if finite else 0.0) - FAILED_TRIAL_MARGIN

    optimizer = BayesianOptimization(
        f=target,
        pbounds={'lambda_': (LAMBDA_MIN, 1.0)},
        acquisition_function=acquisition.ExpectedImprovement(xi=xi, random_state=seed),
        random_state=seed,
        allow_duplicate_points=True,
        verbose=0,
    )
    n_init = min(init_points, trials)
    optimizer.maximize(init_points=n_init, n_iter=trials - n_init)

    lambdas = [float(res['params']['lambda_']) for res in optimizer.res]
    if not any(math.isfinite(s) for s in scores):
        raise TuningError(f"{trials} 次试验全部失败，没有可用的 λ")
    best_index = int(np.argmax(scores))
    result = TuneResult(lambdas[best_index], scores[best_index], list(zip(lambdas, scores)), seed)
    logger.info(f"λ 搜索完成: λ*={result.lambda_star:.6f} score={result.best_score}")
    return result


Metric = Callable[[ConvertedNetwork, Dataset], float]


def tune_lambda(net: NetworkSpec, profile: CalibrationProfile, val_data: Dataset,
                metric: Metric = snn_accuracy, trials: int = 50, seed: int = 0, M: int = 8,
                fire: str = 'sformer', **search_options) -> TuneResult:
    """在 (0, 1] 上搜索使 metric(convert(net, profile, λ), val_data) 最大的 λ"""
    if len(val_data) == 0:
        raise TuningError("验证数据为空")
    if val_data.labels is None:
        raise SchemaError("λ 搜索需要带 label 的验证数据", field='label')

    def objective(lam: float) -> float:
        return metric(convert(net, profile, lam, M, fire), val_data)

    return maximize_lambda(objective, trials=trials, seed=seed, **search_options)


# ========================= 分布导出 =========================

def dump_distributions(profile: CalibrationProfile, path: PathLike) -> Path:
    """激活直方图，CSV 列 slot,bin_left,bin_right,count"""
    rows = []
    for sid, entry in profile.slots.items():
        edges = entry.hist_edges
        for j, count in enumerate(entry.hist_counts):
            rows.append({'slot': sid, 'bin_left': edges[j], 'bin_right': edges[j + 1], 'count': count})
    return write_csv(rows, path, columns=['slot', 'bin_left', 'bin_right', 'count'])


def dump_spike_levels(net: NetworkSpec, profile: CalibrationProfile, data: Dataset,
                      lambdas: Sequence[float], M: int, path: PathLike,
                      fire: str = 'sformer') -> Path:
    """不同 λ 下各槽的发放等级分布，CSV 列 slot,lambda,level,count"""
    rows = []
    for lam in lambdas:
        cnet = convert(net, profile, lam, M, fire)
        counts: Dict[str, Dict[int, int]] = {sid: {} for sid in cnet.bindings}

        def slot_fn(slot: SlotInfo, x: Tensor):
            out, levels = sfn_fire_array(cnet.bindings[slot.slot_id], x)
            values, freq = np.unique(levels, return_counts=True)
            for level, n in zip(values, freq):
                counts[slot.slot_id][int(level)] = counts[slot.slot_id].get(int(level), 0) + int(n)
            return out, levels

        for i in range(len(data)):
            forward(net, data.sample(i, net.input_dim), slot_fn=slot_fn)
        for sid, table in counts.items():
            for level in sorted(table):
                rows.append({'slot': sid, 'lambda': float(lam), 'level': level, 'count': table[level]})
    return write_csv(rows, path, columns=['slot', 'lambda', 'level', 'count'])


# ========================= 文件读写 =========================

class _Document(BaseModel):
    model_config = ConfigDict(extra='forbid')


class HistogramDocument(_Document):
    edges: List[float]
    counts: List[int]


class SlotProfileDocument(_Document):
    theta_pos: Optional[float] = Field(None, gt=0)
    theta_neg: Optional[float] = Field(None, gt=0)
    softmax_max: Optional[float] = Field(None, gt=0)
    has_negative: bool
    n_values: int = Field(ge=0)
    histogram: HistogramDocument


class ProfileDocument(_Document):
    schema_version: Literal[1] = SCHEMA_VERSION
    p: float = Field(gt=0, le=50)
    n_samples: int = Field(ge=1)
    slots: Dict[str, SlotProfileDocument]


class SlotBindingDocument(_Document):
    lambda_: float = Field(gt=0, le=1, alias='lambda')
    theta_pos: float = Field(gt=0)
    theta_neg: Optional[float] = Field(None, gt=0)
    levels: List[int]


class ConvertedDocument(_Document):
    schema_version: Literal[1] = SCHEMA_VERSION
    lambda_: float = Field(gt=0, le=1, alias='lambda')
    M: int = Field(ge=1)
    fire_function: Literal['sformer', 'linear', 'exponential']
    profile_digest: str
    network: Dict
    slots: Dict[str, SlotBindingDocument]


class TuneTrialDocument(_Document):
    lambda_: float = Field(gt=0, le=1, alias='lambda')
    score: float


class TuneDocument(_Document):
    schema_version: Literal[1] = SCHEMA_VERSION
    lambda_star: float = Field(gt=0, le=1)
    best_score: float
    seed: int
    trials: List[TuneTrialDocument] = Field(min_length=1)


def _validate(model, data: Dict, what: str):
    try:
        return model.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise SchemaError(f"{what}格式错误: {first['msg']}", field=pydantic_field_path(first['loc'])) from e


def profile_from_document(data: Dict) -> CalibrationProfile:
    doc = _validate(ProfileDocument, data, '校准文件')
    slots = {
        sid: SlotProfile(sid, s.theta_pos, s.theta_neg, s.softmax_max, s.has_negative, s.n_values,
                         list(s.histogram.edges), list(s.histogram.counts))
        for sid, s in doc.slots.items()
    }
    return CalibrationProfile(slots, doc.p, doc.n_samples)


def save_profile(profile: CalibrationProfile, path: PathLike) -> Path:
    return write_yaml(profile.to_document(), path)


def load_profile(path: PathLike) -> CalibrationProfile:
    return profile_from_document(read_yaml(path))


def converted_to_document(cnet: ConvertedNetwork) -> Dict:
    slots = {}
    for sid, params in cnet.bindings.items():
        slots[sid] = {
            'lambda': params.lambda_,
            'theta_pos': params.theta_pos,
            'theta_neg': params.theta_neg,
            'levels': list(params.fire_pos.levels),
        }
    return {
        'schema_version': SCHEMA_VERSION,
        'lambda': cnet.lambda_,
        'M': cnet.M,
        'fire_function': cnet.fire,
        'profile_digest': cnet.profile_digest,
        'network': network_to_document(cnet.base),
        'slots': slots,
    }


def converted_from_document(data: Dict) -> ConvertedNetwork:
    doc = _validate(ConvertedDocument, data, '转换模型文件')
    net = network_from_document(doc.network)
    expected = {slot.slot_id for slot in net.slots()}
    if set(doc.slots) != expected:
        raise SchemaError(f"slots 与网络神经元槽不一致: {sorted(expected ^ set(doc.slots))}", field='slots')
    bindings = {}
    for sid, s in doc.slots.items():
        fire_pos = FireFunction.from_levels(s.levels, s.lambda_ * s.theta_pos)
        fire_neg = None if s.theta_neg is None else FireFunction.from_levels(s.levels, s.lambda_ * s.theta_neg)
        bindings[sid] = SFNParams(s.lambda_, s.theta_pos, fire_pos, s.theta_neg, fire_neg)
    return ConvertedNetwork(net, bindings, doc.lambda_, doc.M, doc.fire_function, doc.profile_digest)


def save_converted(cnet: ConvertedNetwork, path: PathLike) -> Path:
    return write_yaml(converted_to_document(cnet), path)


def load_converted(path: PathLike) -> ConvertedNetwork:
    return converted_from_document(read_yaml(path))


def save_tune_result(result: TuneResult, path: PathLike) -> Path:
    return write_yaml(result.to_document(), path)


def load_tune_result(path: PathLike) -> TuneResult:
    doc = _validate(TuneDocument, read_yaml(path), '调参报告')
    trials = [(t.lambda_, t.score) for t in doc.trials]
    return TuneResult(doc.lambda_star, doc.best_score, trials, doc.seed)
