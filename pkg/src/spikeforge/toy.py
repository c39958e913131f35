"""
玩具分类网络
二维三分类合成数据：标签由点绕原点的方位角决定，三个 120° 扇区整体旋转 20°，边界不与坐标轴对齐。
网络是用 scikit-learn 训练的单隐层 ReLU MLP，导出为 fc1 → relu → hidden → fc2 → logits，
其中 logits 是接在隐层后面、有正有负的下游神经元槽。
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from sklearn.neural_network import MLPClassifier

from spikeforge.tensor_net import (Dataset, LayerSpec, Linear, NetworkSpec, NeuronSlot, ReLU, ann_accuracy,
                                   save_dataset, save_network)
from utils.io import PathLike
from utils.logger import get_logger

logger = get_logger('toy')

N_CLASSES = 3
SECTOR = 2 * math.pi / N_CLASSES
ROTATION = math.radians(20)
MARGIN = math.radians(8)
MIN_RADIUS = 0.25

N_TRAIN = 1500
N_TEST = 600
HIDDEN = 16


def _sector_angle(points: np.ndarray) -> np.ndarray:
    """去掉旋转后的方位角，取值 [0, 2π)"""
    return np.mod(np.arctan2(points[:, 1], points[:, 0]) - ROTATION, 2 * math.pi)


def sector_labels(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return np.minimum(np.floor(_sector_angle(points) / SECTOR), N_CLASSES - 1).astype(int)


def make_toy_dataset(n: int, seed: int, margin: float = MARGIN, min_radius: float = MIN_RADIUS) -> Dataset:
    """[-1, 1]² 上均匀取点，丢掉离扇区边界不足 margin 弧度或离原点不足 min_radius 的点"""
    if n < 1:
        raise ValueError(f"样本数必须 ≥ 1: {n}")
    rng = np.random.default_rng(seed)
    kept, total = [], 0
    while total < n:
        points = rng.uniform(-1.0, 1.0, size=(2 * n, 2))
        offset = np.mod(_sector_angle(points), SECTOR)
        ok = (np.hypot(points[:, 0], points[:, 1]) >= min_radius) & (offset >= margin) & (offset <= SECTOR - margin)
        kept.append(points[ok])
        total += int(ok.sum())
    points = np.concatenate(kept)[:n]
    return Dataset(points, sector_labels(points), np.arange(n), ('x0', 'x1'))


def mlp_to_network(clf: MLPClassifier) -> NetworkSpec:
    """单隐层 MLPClassifier → NetworkSpec；sklearn 的权重按 [in, out] 存放"""
    if len(clf.coefs_) != 2:
        raise ValueError(f"只支持单隐层网络，实际有 {len(clf.coefs_) - 1} 个隐层")
    return NetworkSpec((
        LayerSpec('fc1', Linear(clf.coefs_[0].T, clf.intercepts_[0])),
        LayerSpec('act1', ReLU()),
        LayerSpec('hidden', NeuronSlot('hidden')),
        LayerSpec('fc2', Linear(clf.coefs_[1].T, clf.intercepts_[1])),
        LayerSpec('logits', NeuronSlot('logits')),
    ), input_dim=clf.coefs_[0].shape[0])


def train_toy_mlp(train: Dataset, hidden: int = HIDDEN, seed: int = 0) -> NetworkSpec:
    if train.labels is None:
        raise ValueError("训练数据需要 label")
    clf = MLPClassifier(hidden_layer_sizes=(hidden,), activation='relu', solver='lbfgs',
                        max_iter=2000, random_state=seed)
    clf.fit(train.features, train.labels)
    if len(clf.classes_) != N_CLASSES:
        raise ValueError(f"训练数据只包含 {len(clf.classes_)} 个类别")
    return mlp_to_network(clf)


@dataclass(frozen=True, eq=False)
class ToyFixture:
    net: NetworkSpec
    train: Dataset
    test: Dataset


@lru_cache(maxsize=None)
def toy_fixture(seed: int = 0) -> ToyFixture:
    """训练集与测试集用不同的种子生成；同一种子结果确定"""
    train = make_toy_dataset(N_TRAIN, seed)
    test = make_toy_dataset(N_TEST, seed + 1)
    net = train_toy_mlp(train, seed=seed)
    logger.info(f"玩具网络训练完成 (seed={seed}): 测试集 ANN 准确率 {ann_accuracy(net, test):.4f}")
    return ToyFixture(net, train, test)


def write_toy_fixture(out_dir: PathLike, seed: int = 0) -> ToyFixture:
    """写出 network.yaml、train.csv、test.csv"""
    fixture = toy_fixture(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_network(fixture.net, out / 'network.yaml')
    save_dataset(fixture.train, out / 'train.csv')
    save_dataset(fixture.test, out / 'test.csv')
    return fixture
