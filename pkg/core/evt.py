"""极值基础：伪角度、秩变换、尾部阈值、尾部子集与经验尾部风险"""
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from core.config import config
from core.errors import DomainError
from core.logger import get_logger
from core.nn import OptimConfig, mlp_init, predict_proba, train_classifier

logger = get_logger("evt")


@dataclass
class LabeledDataset:
    """n×d 嵌入矩阵 + ±1 标签"""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=int).reshape(-1)
        if self.X.shape[0] < 1 or self.X.size == 0:
            raise DomainError("数据集为空")
        if self.X.shape[0] != self.y.shape[0]:
            raise DomainError(f"样本数 {self.X.shape[0]} 与标签数 {self.y.shape[0]} 不一致")
        if not np.all(np.isfinite(self.X)):
            raise DomainError("数据集包含 NaN/Inf")
        if not np.all(np.isin(self.y, (-1, 1))):
            raise DomainError("标签必须为 -1 或 +1")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def labels01(self) -> np.ndarray:
        return (self.y > 0).astype(float)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=int)
        if idx.size == 0:
            raise DomainError("子集为空")
        return LabeledDataset(self.X[idx], self.y[idx])


def train_test_split(
    dataset: LabeledDataset, test_fraction: float = 0.25, seed: int = 0
) -> Tuple[LabeledDataset, LabeledDataset]:
    """随机划分，测试集占 test_fraction（3000 -> 2250 / 750）。"""
    if not 0.0 < test_fraction < 1.0:
        raise DomainError(f"test_fraction 必须在 (0, 1) 内: {test_fraction}")
    n_test = int(round(test_fraction * dataset.n))
    if n_test < 1 or n_test >= dataset.n:
        raise DomainError(f"样本数 {dataset.n} 不足以划分")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


def norms(points: np.ndarray) -> np.ndarray:
    """逐行范数（全局范数配置，默认无穷范数）。"""
    arr = np.atleast_2d(np.asarray(points, dtype=float))
    return np.linalg.norm(arr, ord=config.NORM_ORD, axis=1)


def angular_projection(x: np.ndarray) -> np.ndarray:
    """Θ(x) = x / ‖x‖；支持单个向量或逐行矩阵。"""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    r = norms(arr)
    if np.any(r <= 0):
        raise DomainError("零向量没有角度")
    theta = arr / r[:, None]
    return theta[0] if single else theta


@dataclass(frozen=True)
class RankTransformer:
    """逐坐标经验 c.d.f.（保存排序后的训练值）"""

    sorted_columns: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.sorted_columns.shape[0]

    @property
    def d(self) -> int:
        return self.sorted_columns.shape[1]

    @classmethod
    def fit(cls, X: np.ndarray) -> "RankTransformer":
        arr = np.asarray(X, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.size == 0 or arr.shape[0] < 1:
            raise DomainError("秩变换拟合数据为空")
        cols = np.sort(arr, axis=0)
        cols.setflags(write=False)
        return cls(sorted_columns=cols)

    def ecdf(self, X: np.ndarray) -> np.ndarray:
        """F̂_j(x) = (1/(n+1)) Σ_i 1{X_i^j ≤ x}"""
        arr = np.asarray(X, dtype=float)
        single = arr.ndim == 1
        arr = np.atleast_2d(arr)
        if arr.shape[1] != self.d:
            raise DomainError(f"维度不匹配: 期望 {self.d}，实际 {arr.shape[1]}")
        counts = np.empty(arr.shape, dtype=float)
        for j in range(self.d):
            counts[:, j] = np.searchsorted(self.sorted_columns[:, j], arr[:, j], side="right")
        f = counts / (self.n + 1)
        return f[0] if single else f

    def transform(self, X: np.ndarray) -> np.ndarray:
        """T(x) = 1 / (1 - F̂_j(x_j))，取值 [1, n+1]"""
        return 1.0 / (1.0 - self.ecdf(X))


def rank_transform_fit(X: np.ndarray) -> RankTransformer:
    return RankTransformer.fit(X)


def rank_transform_apply(rt: RankTransformer, x: np.ndarray) -> np.ndarray:
    return rt.transform(x)


@dataclass(frozen=True)
class TailThreshold:
    """t = 第 k 大范数，k = ⌊κ n⌋"""

    t: float
    k: int
    kappa: float

    def to_dict(self) -> dict:
        return {"t": self.t, "k": self.k, "kappa": self.kappa}

    @classmethod
    def from_dict(cls, data: dict) -> "TailThreshold":
        return cls(t=float(data["t"]), k=int(data["k"]), kappa=float(data["kappa"]))


def tail_count(n: int, kappa: float) -> int:
    """k = ⌊κ n⌋（κ ∈ (0, 1)）。"""
    if not 0.0 < kappa < 1.0:
        raise DomainError(f"κ 必须在 (0, 1) 内: {kappa}")
    return int(np.floor(kappa * n))


def tail_threshold(norm_values: np.ndarray, kappa: float) -> TailThreshold:
    values = np.asarray(norm_values, dtype=float).reshape(-1)
    k = tail_count(values.size, kappa)
    if k < 1:
        raise DomainError(f"⌊κn⌋ = 0（κ={kappa}, n={values.size}），没有极值样本")
    t = float(np.sort(values)[::-1][k - 1])
    return TailThreshold(t=t, k=k, kappa=float(kappa))


def select_extremes(norm_values: np.ndarray, t: float) -> np.ndarray:
    """{i : ‖z_i‖ ≥ t}，边界点算极值；与阈值并列的点全部纳入。"""
    return np.flatnonzero(np.asarray(norm_values, dtype=float) >= t)


def nested_tail_subset(norm_values: np.ndarray, t: float, lam: float) -> np.ndarray:
    """T^λ = {i : ‖z_i‖ ≥ λ t}，λ ≥ 1。"""
    if not lam >= 1.0:
        raise DomainError(f"λ 必须 >= 1: {lam}")
    return select_extremes(norm_values, lam * t)


def class_balance(labels: np.ndarray) -> float:
    """少数类占比（0 表示只有一类）。"""
    y = np.asarray(labels).reshape(-1)
    if y.size == 0:
        raise DomainError("标签为空")
    pos = float(np.mean(y > 0))
    return min(pos, 1.0 - pos)


def empirical_tail_risk(
    predict: Callable[[np.ndarray], np.ndarray],
    extremes: LabeledDataset,
    angular: bool = True,
) -> float:
    """
    L̂_k = (1/k) Σ 1{Y_(i) ≠ predict(Θ(X_(i)))}

    angular=False 时直接把样本交给 predict（用于以 z 为输入的分类器）。
    """
    if extremes.n < 1:
        raise DomainError("极值子集为空")
    inputs = angular_projection(extremes.X) if angular else extremes.X
    pred = np.asarray(predict(inputs)).reshape(-1)
    return float(np.mean(pred != extremes.y))


class TailErmClassifier:
    """
    ĝ_k：默认只看角度 Θ(x)，天然尺度不变。

    angular=False 时直接以 z 为输入（用于比较增强前后的隐空间分类器）。
    """

    def __init__(self, mlp=None, constant_label: Optional[int] = None, angular: bool = True):
        if mlp is None and constant_label is None:
            raise DomainError("需要网络或常数标签")
        self.mlp = mlp
        self.constant_label = constant_label
        self.angular = angular

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        inputs = np.atleast_2d(angular_projection(X) if self.angular else np.asarray(X, dtype=float))
        if self.constant_label is not None:
            return np.full(inputs.shape[0], 1.0 if self.constant_label > 0 else 0.0)
        return predict_proba(self.mlp, inputs)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.where(self.predict_proba(X) > 0.5, 1, -1)

    __call__ = predict


def fit_tail_erm(
    X_extreme: np.ndarray,
    y_extreme: np.ndarray,
    optim: Optional[OptimConfig] = None,
    hidden: Sequence[int] = (8,),
    seed: int = 0,
    angular: bool = True,
) -> TailErmClassifier:
    """在极值样本的角度（angular=False 时为原坐标）上最小化 BCE（L̂_k 的代理损失）。"""
    X = np.atleast_2d(np.asarray(X_extreme, dtype=float))
    y = np.asarray(y_extreme, dtype=int).reshape(-1)
    if X.shape[0] == 0 or y.size == 0:
        raise DomainError("尾部 ERM 输入为空")
    if X.shape[0] != y.size:
        raise DomainError("样本数与标签数不一致")

    classes = np.unique(y)
    if classes.size == 1:
        logger.warning(f"极值样本只有一类 ({int(classes[0])})，退化为常数分类器")
        return TailErmClassifier(constant_label=int(classes[0]), angular=angular)

    optim = optim or OptimConfig(learning_rate=0.05, weight_decay=0.0, batch_size=32, epochs=200)
    inputs = angular_projection(X) if angular else X
    mlp = mlp_init([X.shape[1], *hidden, 1], mode="classifier", seed=seed)
    history = train_classifier(mlp, inputs, (y > 0).astype(float), optim, seed=seed)
    logger.info(f"尾部 ERM 训练完成: k={X.shape[0]}, angular={angular}, 最终损失 {history[-1]:.4f}")
    return TailErmClassifier(mlp=mlp, angular=angular)
