#!/usr/bin/env python3
"""
张量网络模块
float64 张量上的确定性前馈 / 单头注意力网络，作为转换的 ANN 基座。
神经元槽（NeuronSlot）在 ANN 中是恒等映射，在转换后的网络中绑定 SFN。
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import (Callable, Dict, Iterable, List, Literal, Optional, Protocol,
                    Sequence, Tuple, Union)

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError, model_validator

from spikeforge.errors import DimensionError, NetworkValidationError, NumericError, SchemaError
from utils.io import PathLike, pydantic_field_path, read_yaml, write_csv, write_yaml

Tensor = np.ndarray

SCHEMA_VERSION = 1
GELU_COEF = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


def as_tensor(values, shape: Optional[Sequence[int]] = None) -> Tensor:
    """转换为 float64 张量，检查元素个数与有限性"""
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != int(np.prod(shape)):
            raise DimensionError(f"数据长度 {arr.size} 与形状 {list(shape)} 不符")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NumericError("张量包含非有限值")
    return arr


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def gelu(x: Tensor) -> Tensor:
    """tanh 近似 GELU"""
    return 0.5 * x * (1.0 + np.tanh(GELU_COEF * (x + GELU_CUBIC * x ** 3)))


# ========================= 层类型 =========================

@dataclass(frozen=True, eq=False)
class Linear:
    weight: Tensor  # [out, in]
    bias: Tensor    # [out]

    def __post_init__(self):
        weight = as_tensor(self.weight)
        bias = as_tensor(self.bias)
        if weight.ndim != 2:
            raise DimensionError(f"Linear 权重必须是二维，实际形状 {list(weight.shape)}")
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"Linear 偏置形状 {list(bias.shape)} 与输出维度 {weight.shape[0]} 不符")
        object.__setattr__(self, 'weight', weight)
        object.__setattr__(self, 'bias', bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class GELU:
    pass


@dataclass(frozen=True)
class SoftMax:
    axis: int = -1


@dataclass(frozen=True, eq=False)
class AttentionHead:
    """单头注意力: (SoftMax(scale·QKᵀ)·V)·Woᵀ，可选在注意力概率上放一个神经元槽"""
    wq: Tensor  # [d_k, d]
    wk: Tensor  # [d_k, d]
    wv: Tensor  # [d_v, d]
    wo: Tensor  # [d, d_v]
    scale: float
    softmax_slot: Optional[str] = None

    def __post_init__(self):
        for name in ('wq', 'wk', 'wv', 'wo'):
            arr = as_tensor(getattr(self, name))
            if arr.ndim != 2:
                raise DimensionError(f"注意力权重 {name} 必须是二维")
            object.__setattr__(self, name, arr)
        d = self.wq.shape[1]
        if self.wk.shape != self.wq.shape:
            raise DimensionError(f"wk 形状 {list(self.wk.shape)} 与 wq {list(self.wq.shape)} 不符")
        if self.wv.shape[1] != d:
            raise DimensionError(f"wv 输入维度 {self.wv.shape[1]} 与 {d} 不符")
        if self.wo.shape != (d, self.wv.shape[0]):
            raise DimensionError(f"wo 形状 {list(self.wo.shape)} 应为 {[d, self.wv.shape[0]]}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise DimensionError(f"注意力缩放系数必须为正: {self.scale}")
        object.__setattr__(self, 'scale', float(self.scale))

    @property
    def d_model(self) -> int:
        return self.wq.shape[1]

    @property
    def d_k(self) -> int:
        return self.wq.shape[0]

    @property
    def d_v(self) -> int:
        return self.wv.shape[0]


@dataclass(frozen=True)
class NeuronSlot:
    slot_id: str


LayerKind = Union[Linear, ReLU, GELU, SoftMax, AttentionHead, NeuronSlot]

KIND_NAMES = {
    Linear: 'linear', ReLU: 'relu', GELU: 'gelu', SoftMax: 'softmax',
    AttentionHead: 'attention', NeuronSlot: 'neuron',
}


@dataclass(frozen=True, eq=False)
class LayerSpec:
    name: str
    kind: LayerKind

    @property
    def is_neuron(self) -> bool:
        return isinstance(self.kind, NeuronSlot)

    @property
    def kind_name(self) -> str:
        return KIND_NAMES[type(self.kind)]


@dataclass(frozen=True)
class SlotInfo:
    """神经元槽的位置信息"""
    slot_id: str
    record_key: str       # forward 中 record 使用的名字
    follows_softmax: bool
    position: int


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    layers: Tuple[LayerSpec, ...]
    input_dim: int

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))
        self._validate()

    def _validate(self):
        if not isinstance(self.input_dim, (int, np.integer)) or self.input_dim <= 0:
            raise NetworkValidationError(f"input_dim 必须是正整数: {self.input_dim}")

        names = [layer.name for layer in self.layers]
        duplicated = sorted({n for n in names if names.count(n) > 1})
        if duplicated:
            raise NetworkValidationError(f"层名重复: {duplicated}")

        slot_ids: List[str] = []
        dim = self.input_dim
        for index, layer in enumerate(self.layers):
            kind = layer.kind
            if isinstance(kind, NeuronSlot):
                if index > 0 and self.layers[index - 1].is_neuron:
                    raise NetworkValidationError(
                        f"神经元槽 {layer.name} 紧跟在另一个神经元槽之后")
                slot_ids.append(kind.slot_id)
            elif isinstance(kind, Linear):
                if kind.in_dim != dim:
                    raise NetworkValidationError(
                        f"层 {layer.name} 输入维度 {kind.in_dim} 与上一层输出 {dim} 不符")
                dim = kind.out_dim
            elif isinstance(kind, AttentionHead):
                if kind.d_model != dim:
                    raise NetworkValidationError(
                        f"注意力层 {layer.name} 维度 {kind.d_model} 与上一层输出 {dim} 不符")
                if kind.softmax_slot is not None:
                    slot_ids.append(kind.softmax_slot)

        duplicated = sorted({s for s in slot_ids if slot_ids.count(s) > 1})
        if duplicated:
            raise NetworkValidationError(f"神经元槽 id 重复: {duplicated}")
        object.__setattr__(self, '_output_dim', dim)

    @property
    def output_dim(self) -> int:
        return self._output_dim

    def input_dims(self) -> List[int]:
        """每一层输入的最后一维"""
        dims, dim = [], self.input_dim
        for layer in self.layers:
            dims.append(dim)
            if isinstance(layer.kind, Linear):
                dim = layer.kind.out_dim
        return dims

    def slots(self) -> List[SlotInfo]:
        """按出现顺序列出所有神经元槽（含注意力内部的槽）"""
        result = []
        for index, layer in enumerate(self.layers):
            kind = layer.kind
            if isinstance(kind, NeuronSlot):
                prev = self.layers[index - 1].kind if index > 0 else None
                result.append(SlotInfo(
                    slot_id=kind.slot_id,
                    record_key=layer.name,
                    follows_softmax=isinstance(prev, SoftMax),
                    position=index,
                ))
            elif isinstance(kind, AttentionHead) and kind.softmax_slot is not None:
                result.append(SlotInfo(
                    slot_id=kind.softmax_slot,
                    record_key=f"{layer.name}.softmax",
                    follows_softmax=True,
                    position=index,
                ))
        return result


# ========================= 前向计算 =========================

SlotFn = Callable[[SlotInfo, Tensor], Tuple[Tensor, Optional[Tensor]]]


class LayerObserver(Protocol):
    """前向过程观察者（能耗计数等）"""

    def on_layer(self, layer: LayerSpec, x: Tensor, spike_levels: Optional[Tensor],
                 prob_levels: Optional[Tensor]) -> None: ...

    def on_slot(self, slot: SlotInfo, x: Tensor, spike_levels: Optional[Tensor]) -> None: ...


def identity_slot(slot: SlotInfo, x: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
    return x, None


def _check_finite(x: Tensor, layer: str):
    if not np.all(np.isfinite(x)):
        raise NumericError("中间结果出现非有限值", layer=layer)


def _apply_elementwise(kind: LayerKind, x: Tensor) -> Tensor:
    if isinstance(kind, Linear):
        return x @ kind.weight.T + kind.bias
    if isinstance(kind, ReLU):
        return np.maximum(x, 0.0)
    if isinstance(kind, GELU):
        return gelu(x)
    if isinstance(kind, SoftMax):
        return softmax(x, axis=kind.axis)
    raise TypeError(f"不支持的层类型: {type(kind).__name__}")


def _attention_core(head: AttentionHead, tokens: Tensor,
                    on_probs: Optional[Callable[[Tensor], Tuple[Tensor, Optional[Tensor]]]] = None
                    ) -> Tuple[Tensor, Optional[Tensor]]:
    q = tokens @ head.wq.T
    k = tokens @ head.wk.T
    v = tokens @ head.wv.T
    probs = softmax(head.scale * (q @ k.T), axis=-1)
    prob_levels = None
    if on_probs is not None:
        probs, prob_levels = on_probs(probs)
    return (probs @ v) @ head.wo.T, prob_levels


def attention_forward(head: AttentionHead, tokens) -> Tensor:
    """单头注意力前向，tokens 形状 [n, d]"""
    tokens = as_tensor(tokens)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise DimensionError(f"注意力输入必须是 [n, d] 且 n ≥ 1，实际 {list(tokens.shape)}")
    if tokens.shape[1] != head.d_model:
        raise DimensionError(f"注意力输入维度 {tokens.shape[1]} 与 {head.d_model} 不符")
    out, _ = _attention_core(head, tokens)
    return out


def forward(net: NetworkSpec, inputs, record: Iterable[str] = (),
            slot_fn: Optional[SlotFn] = None,
            observer: Optional[LayerObserver] = None) -> Tuple[Tensor, Dict[str, Tensor]]:
    """前向计算，返回输出以及 record 中各神经元槽的输入激活"""
    x = as_tensor(inputs)
    if x.ndim == 0 or x.shape[-1] != net.input_dim:
        raise DimensionError(f"输入最后一维应为 {net.input_dim}，实际形状 {list(x.shape)}")

    slot_fn = slot_fn or identity_slot
    slot_by_position = {}
    for slot in net.slots():
        slot_by_position.setdefault(slot.position, slot)
    record = set(record)
    unknown = record - {slot.record_key for slot in slot_by_position.values()}
    if unknown:
        raise NetworkValidationError(f"无法记录不存在的神经元槽: {sorted(unknown)}")

    recorded: Dict[str, Tensor] = {}
    levels: Optional[Tensor] = None

    for index, layer in enumerate(net.layers):
        kind = layer.kind
        if isinstance(kind, NeuronSlot):
            slot = slot_by_position[index]
            if slot.record_key in record:
                recorded[slot.record_key] = x.copy()
            x_in = x
            x, levels = slot_fn(slot, x_in)
            x = np.asarray(x, dtype=np.float64)
            if observer is not None:
                observer.on_slot(slot, x_in, levels)
            _check_finite(x, layer.name)
            continue

        prob_levels = None
        if isinstance(kind, AttentionHead):
            squeeze = x.ndim == 1
            tokens = x.reshape(1, -1) if squeeze else x
            if tokens.ndim != 2:
                raise DimensionError(f"注意力层 {layer.name} 输入必须是 [n, d]")
            on_probs = None
            if kind.softmax_slot is not None:
                slot = slot_by_position[index]

                def on_probs(probs, slot=slot):
                    if slot.record_key in record:
                        recorded[slot.record_key] = probs.copy()
                    out, prob_lv = slot_fn(slot, probs)
                    if observer is not None:
                        observer.on_slot(slot, probs, prob_lv)
                    return np.asarray(out, dtype=np.float64), prob_lv

            out, prob_levels = _attention_core(kind, tokens, on_probs)
            out = out.reshape(-1) if squeeze else out
        else:
            out = _apply_elementwise(kind, x)

        if observer is not None:
            observer.on_layer(layer, x, levels, prob_levels)
        levels = None
        x = out
        _check_finite(x, layer.name)

    return x, recorded


def predict_class(output: Tensor) -> int:
    """top-1 类别，并列时取最小下标"""
    scores = output.reshape(-1, output.shape[-1]).mean(axis=0)
    return int(np.argmax(scores))


# ========================= 线性探测 =========================

def value_projection(head: AttentionHead) -> Linear:
    """注意力的值投影单独作为线性层"""
    return Linear(head.wv, np.zeros(head.d_v))


def linearity_probe(layer: Union[LayerSpec, LayerKind], input_dim: int,
                    rng: Optional[np.random.Generator] = None, n_tokens: int = 3,
                    tol: float = 1e-9) -> bool:
    """检查 f(a·x + b·y) − f(0) == a·(f(x) − f(0)) + b·(f(y) − f(0))"""
    kind = layer.kind if isinstance(layer, LayerSpec) else layer
    if isinstance(kind, NeuronSlot):
        raise NetworkValidationError("神经元槽不参与线性探测")
    rng = rng if rng is not None else np.random.default_rng(0)

    def f(z: Tensor) -> Tensor:
        if isinstance(kind, AttentionHead):
            return _attention_core(kind, z)[0]
        return _apply_elementwise(kind, z)

    x = rng.standard_normal((n_tokens, input_dim))
    y = rng.standard_normal((n_tokens, input_dim))
    a, b = rng.uniform(-2.0, 2.0, size=2)
    offset = f(np.zeros((n_tokens, input_dim)))
    lhs = f(a * x + b * y) - offset
    rhs = a * (f(x) - offset) + b * (f(y) - offset)
    scale = max(1.0, float(np.max(np.abs(lhs))), float(np.max(np.abs(rhs))))
    return bool(np.max(np.abs(lhs - rhs)) <= tol * scale)


# ========================= 文件读写 =========================

class TensorDocument(BaseModel):
    model_config = ConfigDict(extra='forbid')
    shape: List[PositiveInt]
    data: List[float]

    @model_validator(mode='after')
    def _check_size(self):
        if len(self.data) != int(np.prod(self.shape)):
            raise ValueError(f"data 长度 {len(self.data)} 与 shape {self.shape} 不符")
        return self


class LayerDocument(BaseModel):
    model_config = ConfigDict(extra='forbid')
    kind: Literal['linear', 'relu', 'gelu', 'softmax', 'attention', 'neuron']
    name: str = Field(min_length=1)
    shape: Optional[List[PositiveInt]] = None
    data: Optional[List[float]] = None
    bias: Optional[List[float]] = None
    axis: Optional[int] = None
    id: Optional[str] = None
    wq: Optional[TensorDocument] = None
    wk: Optional[TensorDocument] = None
    wv: Optional[TensorDocument] = None
    wo: Optional[TensorDocument] = None
    scale: Optional[float] = None
    softmax_slot: Optional[str] = None

    @model_validator(mode='after')
    def _check_kind_fields(self):
        if self.kind == 'linear':
            if self.shape is None or len(self.shape) != 2 or self.data is None or self.bias is None:
                raise ValueError("linear 层需要 shape=[out, in]、data 和 bias")
            if len(self.data) != self.shape[0] * self.shape[1]:
                raise ValueError(f"data 长度 {len(self.data)} 与 shape {self.shape} 不符")
            if len(self.bias) != self.shape[0]:
                raise ValueError(f"bias 长度 {len(self.bias)} 与输出维度 {self.shape[0]} 不符")
        elif self.kind == 'attention':
            missing = [n for n in ('wq', 'wk', 'wv', 'wo', 'scale') if getattr(self, n) is None]
            if missing:
                raise ValueError(f"attention 层缺少字段: {missing}")
        elif self.kind == 'neuron' and not self.id:
            raise ValueError("neuron 层需要 id")
        return self


class NetworkDocument(BaseModel):
    model_config = ConfigDict(extra='forbid')
    schema_version: Literal[1] = SCHEMA_VERSION
    input_dim: PositiveInt
    layers: List[LayerDocument]


def _layer_from_document(doc: LayerDocument) -> LayerSpec:
    if doc.kind == 'linear':
        kind = Linear(as_tensor(doc.data, doc.shape), as_tensor(doc.bias))
    elif doc.kind == 'relu':
        kind = ReLU()
    elif doc.kind == 'gelu':
        kind = GELU()
    elif doc.kind == 'softmax':
        kind = SoftMax(axis=-1 if doc.axis is None else doc.axis)
    elif doc.kind == 'attention':
        kind = AttentionHead(
            wq=as_tensor(doc.wq.data, doc.wq.shape), wk=as_tensor(doc.wk.data, doc.wk.shape),
            wv=as_tensor(doc.wv.data, doc.wv.shape), wo=as_tensor(doc.wo.data, doc.wo.shape),
            scale=doc.scale, softmax_slot=doc.softmax_slot,
        )
    else:
        kind = NeuronSlot(doc.id)
    return LayerSpec(doc.name, kind)


def _tensor_document(arr: Tensor) -> Dict:
    return {'shape': list(arr.shape), 'data': [float(v) for v in arr.ravel()]}


def network_to_document(net: NetworkSpec) -> Dict:
    layers = []
    for layer in net.layers:
        kind = layer.kind
        doc = {'kind': layer.kind_name, 'name': layer.name}
        if isinstance(kind, Linear):
            doc.update(shape=list(kind.weight.shape), data=[float(v) for v in kind.weight.ravel()],
                       bias=[float(v) for v in kind.bias])
        elif isinstance(kind, SoftMax):
            doc['axis'] = kind.axis
        elif isinstance(kind, AttentionHead):
            for name in ('wq', 'wk', 'wv', 'wo'):
                doc[name] = _tensor_document(getattr(kind, name))
            doc['scale'] = kind.scale
            if kind.softmax_slot is not None:
                doc['softmax_slot'] = kind.softmax_slot
        elif isinstance(kind, NeuronSlot):
            doc['id'] = kind.slot_id
        layers.append(doc)
    return {'schema_version': SCHEMA_VERSION, 'input_dim': int(net.input_dim), 'layers': layers}


def network_from_document(data: Dict) -> NetworkSpec:
    """解析网络文档；结构错误抛 SchemaError，维度等约束错误抛 NetworkValidationError"""
    try:
        doc = NetworkDocument.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise SchemaError(f"网络文件格式错误: {first['msg']}",
                          field=pydantic_field_path(first['loc'])) from e
    layers = []
    for index, layer_doc in enumerate(doc.layers):
        try:
            layers.append(_layer_from_document(layer_doc))
        except DimensionError as e:
            raise NetworkValidationError(f"层 {layer_doc.name} (layers.{index}): {e}") from e
    return NetworkSpec(tuple(layers), doc.input_dim)


def load_network(path: PathLike) -> NetworkSpec:
    return network_from_document(read_yaml(path))


def save_network(net: NetworkSpec, path: PathLike) -> Path:
    return write_yaml(network_to_document(net), path)


# ========================= 样本集 =========================

@dataclass(frozen=True, eq=False)
class Dataset:
    """样本集: 每行一个样本，注意力网络的 token 按行展开存放"""
    features: np.ndarray
    labels: Optional[np.ndarray]
    sample_ids: np.ndarray
    feature_names: Tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.features)

    def sample(self, index: int, input_dim: int) -> Tensor:
        row = self.features[index]
        if row.size == input_dim:
            return row
        if row.size % input_dim:
            raise DimensionError(f"样本特征数 {row.size} 不是输入维度 {input_dim} 的整数倍")
        return row.reshape(-1, input_dim)

    def take(self, indices) -> 'Dataset':
        indices = np.asarray(indices, dtype=int)
        return Dataset(
            features=self.features[indices],
            labels=None if self.labels is None else self.labels[indices],
            sample_ids=self.sample_ids[indices],
            feature_names=self.feature_names,
        )

    def subsample(self, fraction: float, seed: int) -> 'Dataset':
        """无放回随机子样本，至少保留一个样本，保持原顺序"""
        if not 0 < fraction <= 1:
            raise ValueError(f"子样本比例必须在 (0, 1]: {fraction}")
        n = max(1, math.ceil(fraction * len(self)))
        if n >= len(self):
            return self
        rng = np.random.default_rng(seed)
        return self.take(np.sort(rng.choice(len(self), size=n, replace=False)))

    def bootstrap(self, seed: int) -> 'Dataset':
        """有放回重采样（同样大小）"""
        rng = np.random.default_rng(seed)
        return self.take(rng.integers(0, len(self), size=len(self)))


def load_dataset(path: PathLike) -> Dataset:
    """读取 sample_id,feature…[,label] 格式的 CSV"""
    df = pd.read_csv(path)
    if 'sample_id' not in df.columns:
        raise SchemaError(f"样本文件缺少 sample_id 列: {path}", field='sample_id')
    feature_cols = [c for c in df.columns if c not in ('sample_id', 'label')]
    if not feature_cols:
        raise SchemaError(f"样本文件没有特征列: {path}", field='feature')
    for col in feature_cols:
        if not pd.api.types.is_numeric_dtype(df[col]):
            raise SchemaError(f"特征列不是数值: {col}", field=col)
    features = df[feature_cols].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise SchemaError(f"特征包含缺失或非有限值: {path}", field='feature')
    labels = None
    if 'label' in df.columns:
        if df['label'].isna().any() or not pd.api.types.is_integer_dtype(df['label']):
            raise SchemaError("label 列必须是整数", field='label')
        labels = df['label'].to_numpy(dtype=int)
    return Dataset(features, labels, df['sample_id'].to_numpy(), tuple(feature_cols))


def save_dataset(data: Dataset, path: PathLike) -> Path:
    names = list(data.feature_names) or [f"x{i}" for i in range(data.features.shape[1])]
    df = pd.DataFrame(data.features, columns=names)
    df.insert(0, 'sample_id', data.sample_ids)
    if data.labels is not None:
        df['label'] = data.labels
    return write_csv(df, path)


def ann_accuracy(net: NetworkSpec, data: Dataset) -> float:
    """ANN top-1 准确率"""
    if data.labels is None:
        raise SchemaError("评估需要 label 列", field='label')
    correct = 0
    for i in range(len(data)):
        output, _ = forward(net, data.sample(i, net.input_dim))
        correct += int(predict_class(output) == data.labels[i])
    return correct / len(data)


def dump_activations(net: NetworkSpec, data: Dataset, path: PathLike) -> Path:
    """导出每个神经元槽的输入激活，CSV 列 layer,sample,index,value"""
    keys = [slot.record_key for slot in net.slots()]
    rows = []
    for i in range(len(data)):
        _, recorded = forward(net, data.sample(i, net.input_dim), record=keys)
        for key in keys:
            for j, value in enumerate(recorded[key].ravel()):
                rows.append({'layer': key, 'sample': data.sample_ids[i], 'index': j,
                             'value': float(value)})
    return write_csv(rows, path, columns=['layer', 'sample', 'index', 'value'])
