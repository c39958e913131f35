#!/usr/bin/env python3
"""
神经元模型
IF（软复位）、多阈值神经元 MTN、双分支变体，以及缩放发放神经元 SFN。
标量运算接受任意 numbers.Real（包括 Fraction），等价性校验可以在精确有理数下运行；
*_array 变体用于网络级张量仿真。
"""

import math
from dataclasses import dataclass
from numbers import Real
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from spikeforge.errors import DimensionError


def heaviside(z: Real) -> int:
    """阶跃函数，H(0) = 1"""
    return 1 if z >= 0 else 0


# ========================= IF 神经元 =========================

@dataclass(frozen=True)
class IFParams:
    theta: Real
    v0: Real = 0.0

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"IF 阈值必须为正: {self.theta}")


@dataclass(frozen=True)
class IFState:
    v: Real


@dataclass(frozen=True)
class IFRunResult:
    o_bar: Real
    final_v: Real
    spikes: Tuple[Real, ...]
    potentials: Tuple[Real, ...]  # 每步发放后的膜电位 v(t)
    latent: Tuple[Real, ...]      # 每步发放前的潜在膜电位 h(t)


def if_step(params: IFParams, state: IFState, x: Real) -> Tuple[Real, IFState]:
    """单步 IF: h = v + x，达到阈值发放 θ 并软复位"""
    h = state.v + x
    o = params.theta * heaviside(h - params.theta)
    return o, IFState(h - o)


def if_run(params: IFParams, xs: Sequence[Real], T: int) -> IFRunResult:
    if T < 1:
        raise ValueError(f"时间步数必须 ≥ 1: {T}")
    if len(xs) != T:
        raise DimensionError(f"输入序列长度 {len(xs)} 与 T={T} 不符")
    state = IFState(params.v0)
    spikes, potentials, latent = [], [], []
    for x in xs:
        latent.append(state.v + x)
        o, state = if_step(params, state, x)
        spikes.append(o)
        potentials.append(state.v)
    return IFRunResult(
        o_bar=sum(spikes) / T,
        final_v=state.v,
        spikes=tuple(spikes),
        potentials=tuple(potentials),
        latent=tuple(latent),
    )


# ========================= 多阈值神经元 =========================

@dataclass(frozen=True)
class MTNParams:
    theta_m: Real
    n_max: int
    v0: Real = 0.0

    def __post_init__(self):
        if not self.theta_m > 0:
            raise ValueError(f"MTN 阈值必须为正: {self.theta_m}")
        if self.n_max < 1:
            raise ValueError(f"MTN 最大发放次数必须 ≥ 1: {self.n_max}")


def mtn_fire(params: MTNParams, x: Real) -> Real:
    """o = θ_M · clip(⌊(x + v0)/θ_M⌋, 0, N)"""
    k = math.floor((x + params.v0) / params.theta_m)
    return params.theta_m * min(max(k, 0), params.n_max)


def mtn_fire_array(theta_m: float, n_max: int, v0: float, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """逐元素 MTN，返回 (输出, 发放次数)"""
    counts = np.clip(np.floor((x + v0) / theta_m), 0, n_max)
    return theta_m * counts, counts.astype(np.int64)


# ========================= 双分支 =========================

def dual_decompose(x: Real) -> Tuple[Real, Real]:
    """x = x⁺ − x⁻，x⁺ = max(0, x)，x⁻ = −min(0, x)"""
    if x > 0:
        return x, x - x
    return x - x, abs(x)


@dataclass(frozen=True)
class BranchParams:
    theta: Real
    v0: Real = 0.0

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"分支阈值必须为正: {self.theta}")
        if not 0 <= self.v0 < self.theta:
            raise ValueError(f"分支初始膜电位必须在 [0, θ): v0={self.v0}, θ={self.theta}")


@dataclass(frozen=True)
class DualParams:
    """双分支参数；用于 IF 时是 θ±/v±(0)，用于 MTN 时是 θ_M±/v_M±(0)"""
    pos: BranchParams
    neg: BranchParams
    n_max: int = 1

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError(f"最大发放次数必须 ≥ 1: {self.n_max}")

    @classmethod
    def symmetric(cls, theta: Real, v0: Real = 0.0, n_max: int = 1) -> 'DualParams':
        branch = BranchParams(theta, v0)
        return cls(branch, branch, n_max)


@dataclass(frozen=True)
class DualRunResult:
    o_bar: Real
    v_pos: Real
    v_neg: Real
    pos: IFRunResult
    neg: IFRunResult


def dual_if_run(params: DualParams, xs: Sequence[Real], T: int) -> DualRunResult:
    """正负两个 IF 分支分别处理 x⁺ 与 x⁻，输出 ō = ō⁺ − ō⁻"""
    if len(xs) != T:
        raise DimensionError(f"输入序列长度 {len(xs)} 与 T={T} 不符")
    parts = [dual_decompose(x) for x in xs]
    pos = if_run(IFParams(params.pos.theta, params.pos.v0), [p for p, _ in parts], T)
    neg = if_run(IFParams(params.neg.theta, params.neg.v0), [n for _, n in parts], T)
    return DualRunResult(
        o_bar=pos.o_bar - neg.o_bar,
        v_pos=pos.final_v,
        v_neg=neg.final_v,
        pos=pos,
        neg=neg,
    )


def dual_mtn_fire(params: DualParams, x: Real) -> Real:
    """x ≥ 0 走正分支，x < 0 走负分支"""
    if x >= 0:
        return mtn_fire(MTNParams(params.pos.theta, params.n_max, params.pos.v0), x)
    return -mtn_fire(MTNParams(params.neg.theta, params.n_max, params.neg.v0), -x)


def dual_mtn_fire_array(params: DualParams, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pos_out, pos_counts = mtn_fire_array(params.pos.theta, params.n_max, params.pos.v0, np.maximum(x, 0.0))
    neg_out, neg_counts = mtn_fire_array(params.neg.theta, params.n_max, params.neg.v0, np.maximum(-x, 0.0))
    negative = x < 0
    out = np.where(negative, -neg_out, pos_out)
    counts = np.where(negative, -neg_counts, pos_counts)
    return out, counts


class DualIFBank:
    """网络级仿真用的逐槽双分支 IF 状态，按槽 id 维护膜电位张量"""

    def __init__(self, params: Dict[str, DualParams]):
        self.params = params
        self.v_pos: Dict[str, np.ndarray] = {}
        self.v_neg: Dict[str, np.ndarray] = {}
        self.inputs: Dict[str, List[np.ndarray]] = {}
        self.outputs: Dict[str, List[np.ndarray]] = {}

    def step(self, slot_id: str, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        p = self.params[slot_id]
        if slot_id not in self.v_pos:
            self.v_pos[slot_id] = np.full_like(x, p.pos.v0, dtype=np.float64)
            self.v_neg[slot_id] = np.full_like(x, p.neg.v0, dtype=np.float64)
        h_pos = self.v_pos[slot_id] + np.maximum(x, 0.0)
        h_neg = self.v_neg[slot_id] + np.maximum(-x, 0.0)
        fire_pos = h_pos >= p.pos.theta
        fire_neg = h_neg >= p.neg.theta
        o_pos = np.where(fire_pos, p.pos.theta, 0.0)
        o_neg = np.where(fire_neg, p.neg.theta, 0.0)
        self.v_pos[slot_id] = h_pos - o_pos
        self.v_neg[slot_id] = h_neg - o_neg
        out = o_pos - o_neg
        self.inputs.setdefault(slot_id, []).append(x.copy())
        self.outputs.setdefault(slot_id, []).append(out)
        return out, fire_pos.astype(np.int64) - fire_neg.astype(np.int64)

    def __call__(self, slot, x):
        return self.step(slot.slot_id, x)


# ========================= 缩放发放神经元 =========================

def sformer_levels(M: int) -> List[int]:
    """y_k = k (k ≤ M)；y_k = M − 1 + 2^(k−M) (M < k ≤ 2M)"""
    if M < 1:
        raise ValueError(f"M 必须 ≥ 1: {M}")
    return [k for k in range(1, M + 1)] + [M - 1 + 2 ** (k - M) for k in range(M + 1, 2 * M + 1)]


def linear_levels(M: int) -> List[int]:
    if M < 1:
        raise ValueError(f"M 必须 ≥ 1: {M}")
    return list(range(1, 2 * M + 1))


def exponential_levels(M: int) -> List[int]:
    if M < 1:
        raise ValueError(f"M 必须 ≥ 1: {M}")
    return [2 ** (k - 1) for k in range(1, 2 * M + 1)]


FIRE_FUNCTIONS: Dict[str, Callable[[int], List[int]]] = {
    'sformer': sformer_levels,
    'linear': linear_levels,
    'exponential': exponential_levels,
}


def fire_levels(kind: str, M: int) -> List[int]:
    if kind not in FIRE_FUNCTIONS:
        raise ValueError(f"未知发放函数: {kind}，可选 {sorted(FIRE_FUNCTIONS)}")
    return FIRE_FUNCTIONS[kind](M)


@dataclass(frozen=True, eq=False)
class FireFunction:
    """分段常数发放函数 G: 阈值 θ_i = unit·y_i，输出 unit·y_i"""
    thresholds: Tuple[float, ...]
    levels: Tuple[int, ...]
    unit: float

    def __post_init__(self):
        object.__setattr__(self, 'thresholds', tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, 'levels', tuple(int(y) for y in self.levels))
        if not self.levels or len(self.levels) != len(self.thresholds):
            raise ValueError("阈值与发放等级数量必须相同且非空")
        if not self.unit > 0:
            raise ValueError(f"发放单位必须为正: {self.unit}")
        if self.levels[0] < 1 or any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError(f"发放等级必须是严格递增的正整数: {self.levels}")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("阈值必须严格递增")
        object.__setattr__(self, '_boundaries', np.array(
            [self.unit * (y - 0.5) for y in self.levels], dtype=np.float64))
        object.__setattr__(self, '_level_table', np.array((0,) + self.levels, dtype=np.int64))

    @classmethod
    def from_levels(cls, levels: Sequence[int], unit: float) -> 'FireFunction':
        return cls(tuple(unit * y for y in levels), tuple(levels), unit)

    @property
    def boundaries(self) -> np.ndarray:
        """以 v0 = unit/2 折算后的输入判决边界 unit·(y_i − ½)"""
        return self._boundaries

    def level(self, h: float) -> int:
        """潜在膜电位 h 对应的发放等级: 不超过 h 的最大阈值所在等级，否则 0"""
        index = int(np.searchsorted(np.asarray(self.thresholds), h, side='right'))
        return int(self._level_table[index])

    def quantize_levels(self, x) -> np.ndarray:
        """输入 x（非负部分）对应的发放等级"""
        index = np.searchsorted(self._boundaries, x, side='right')
        return self._level_table[index]


@dataclass(frozen=True, eq=False)
class SFNParams:
    lambda_: float
    theta_pos: float
    fire_pos: FireFunction
    theta_neg: Optional[float] = None
    fire_neg: Optional[FireFunction] = None

    def __post_init__(self):
        if not 0 < self.lambda_ <= 1:
            raise ValueError(f"λ 必须在 (0, 1]: {self.lambda_}")
        if not self.theta_pos > 0:
            raise ValueError(f"θ⁺ 必须为正: {self.theta_pos}")
        if not math.isclose(self.fire_pos.unit, self.lambda_ * self.theta_pos, rel_tol=1e-12):
            raise ValueError("正分支发放单位必须等于 λ·θ⁺")
        if self.fire_neg is not None:
            if self.theta_neg is None or not self.theta_neg > 0:
                raise ValueError("存在负分支时 θ⁻ 必须为正")
            if not math.isclose(self.fire_neg.unit, self.lambda_ * self.theta_neg, rel_tol=1e-12):
                raise ValueError("负分支发放单位必须等于 λ·θ⁻")

    @property
    def signed(self) -> bool:
        return self.fire_neg is not None


def sformer_thresholds(levels: Sequence[int], lambda_: float, theta_pos: float,
                       theta_neg: Optional[float] = None) -> Tuple[List[float], List[float]]:
    """θ_k⁺ = λθ⁺y_k，θ_k⁻ = −λθ⁻y_k"""
    pos = [lambda_ * theta_pos * y for y in levels]
    neg = [] if theta_neg is None else [-lambda_ * theta_neg * y for y in levels]
    return pos, neg


def sfn_fire_array(params: SFNParams, x) -> Tuple[np.ndarray, np.ndarray]:
    """逐元素 SFN，返回 (输出, 带符号发放等级)"""
    x = np.asarray(x, dtype=np.float64)
    levels = params.fire_pos.quantize_levels(x)
    out = params.fire_pos.unit * levels
    if params.fire_neg is not None:
        negative = x < 0
        neg_levels = params.fire_neg.quantize_levels(-x)
        levels = np.where(negative, -neg_levels, levels)
        out = np.where(negative, -params.fire_neg.unit * neg_levels, out)
    return out, levels


def sfn_fire(params: SFNParams, x: float) -> float:
    """单步发放: 正输入走正分支，负输入走负分支（无负分支时输出 0）"""
    if x >= 0:
        return params.fire_pos.unit * int(params.fire_pos.quantize_levels(x))
    if params.fire_neg is None:
        return 0.0
    return -params.fire_neg.unit * int(params.fire_neg.quantize_levels(-x))
