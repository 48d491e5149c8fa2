"""
最小前馈网络：解析梯度、SGD（解耦权重衰减）、有限差分校验、JSON 序列化

编码器 φ、C^ext、C^bulk、判别器 D 与解码单步网络都基于这里的 Mlp。
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, log_softmax, softmax

from core.config import config
from core.errors import DomainError, ParseError
from core.logger import get_logger, log_epoch
from core.rng import RngStream

logger = get_logger("nn")

MODES = ("classifier", "regressor")
LOSSES = ("bce", "xent", "mse")


@dataclass
class Mlp:
    """全连接网络：隐藏层 ReLU，输出层 sigmoid（classifier）或恒等（regressor）"""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    mode: str = "classifier"
    dropout: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"未知网络模式: {self.mode}")
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError(f"dropout 必须在 [0, 1) 内: {self.dropout}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise DomainError("权重与偏置层数不一致")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DomainError(f"第 {i} 层形状非法: W{w.shape}, b{b.shape}")
            if i > 0 and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DomainError(f"第 {i} 层输入维度与上一层输出不匹配")

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> List[np.ndarray]:
        return [*self.weights, *self.biases]

    def clone(self) -> "Mlp":
        return Mlp(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            mode=self.mode,
            dropout=self.dropout,
        )


@dataclass
class OptimConfig:
    """优化器配置：学习率、权重衰减、batch、epoch"""

    learning_rate: float = 5e-4
    weight_decay: float = 1e-5
    batch_size: int = 64
    epochs: int = 100

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError(f"学习率必须 > 0: {self.learning_rate}")
        if self.weight_decay < 0:
            raise DomainError(f"权重衰减必须 >= 0: {self.weight_decay}")
        if self.batch_size < 1 or self.epochs < 1:
            raise DomainError("batch_size 与 epochs 必须 >= 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OptimConfig":
        return cls(
            learning_rate=float(data["learning_rate"]),
            weight_decay=float(data["weight_decay"]),
            batch_size=int(data["batch_size"]),
            epochs=int(data["epochs"]),
        )


@dataclass
class Gradients:
    """与 Mlp 参数同构的梯度"""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def zeros_like(cls, mlp: Mlp) -> "Gradients":
        return cls([np.zeros_like(w) for w in mlp.weights], [np.zeros_like(b) for b in mlp.biases])

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([w * factor for w in self.weights], [b * factor for b in self.biases])

    def arrays(self) -> List[np.ndarray]:
        return [*self.weights, *self.biases]

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(a))) for a in self.arrays())


@dataclass
class ForwardCache:
    """反向传播所需的中间量"""

    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    masks: List[Optional[np.ndarray]] = field(default_factory=list)
    logits: Optional[np.ndarray] = None


def mlp_init(
    layer_sizes: Sequence[int],
    mode: str = "classifier",
    seed: int = 0,
    dropout: float = 0.0,
) -> Mlp:
    """对称缩放均匀初始化 U(-a, a)，a = sqrt(6 / (fan_in + fan_out))；偏置为 0。"""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise DomainError(f"至少需要 2 个层尺寸: {sizes}")
    if any(s < 1 for s in sizes):
        raise DomainError(f"层尺寸必须 >= 1: {sizes}")
    gen = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(gen.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights=weights, biases=biases, mode=mode, dropout=dropout)


def _as_batch(mlp: Mlp, X) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(X, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != mlp.input_dim:
        raise DomainError(f"输入维度不匹配: 期望 {mlp.input_dim}，实际 {arr.shape[1]}")
    return arr, single


def forward_train(mlp: Mlp, X, rng: Optional[np.random.Generator] = None) -> ForwardCache:
    """前向传播并缓存；rng 非空且 dropout > 0 时对隐藏层做 inverted dropout。"""
    h, _ = _as_batch(mlp, X)
    cache = ForwardCache()
    last = len(mlp.weights) - 1
    for layer, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        cache.inputs.append(h)
        a = h @ w + b
        if layer == last:
            cache.logits = a
            break
        cache.pre.append(a)
        h = np.maximum(a, 0.0)
        mask = None
        if rng is not None and mlp.dropout > 0.0:
            keep = 1.0 - mlp.dropout
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        cache.masks.append(mask)
    return cache


def activate(mlp: Mlp, logits: np.ndarray) -> np.ndarray:
    if mlp.mode == "classifier":
        eps = config.PROB_EPS
        return np.clip(expit(logits), eps, 1.0 - eps)
    return logits


def forward(mlp: Mlp, x) -> np.ndarray:
    """推理前向（不做 dropout）。"""
    arr, single = _as_batch(mlp, x)
    out = activate(mlp, forward_train(mlp, arr).logits)
    return out[0] if single else out


def predict_proba(mlp: Mlp, X) -> np.ndarray:
    """单输出分类器的概率，形状 (m,)。"""
    if mlp.mode != "classifier" or mlp.output_dim != 1:
        raise DomainError("predict_proba 需要单输出分类器")
    arr, _ = _as_batch(mlp, X)
    return forward(mlp, arr)[:, 0]


def predict_labels(mlp: Mlp, X) -> np.ndarray:
    """±1 标签：1{p > 1/2}。"""
    return np.where(predict_proba(mlp, X) > 0.5, 1, -1)


def backprop(mlp: Mlp, cache: ForwardCache, grad_logits: np.ndarray) -> Tuple[Gradients, np.ndarray]:
    """由 dL/dlogits 反传，返回参数梯度与 dL/dinput。"""
    g = np.asarray(grad_logits, dtype=float)
    n_layers = len(mlp.weights)
    gw: List[np.ndarray] = [None] * n_layers
    gb: List[np.ndarray] = [None] * n_layers
    for layer in range(n_layers - 1, -1, -1):
        gw[layer] = cache.inputs[layer].T @ g
        gb[layer] = g.sum(axis=0)
        g = g @ mlp.weights[layer].T
        if layer > 0:
            mask = cache.masks[layer - 1]
            if mask is not None:
                g = g * mask
            g = g * (cache.pre[layer - 1] > 0.0)
    return Gradients(gw, gb), g


def bce_loss(p, y):
    """-(y log p + (1-y) log(1-p))，p 先截断到 [ε, 1-ε]。"""
    eps = config.PROB_EPS
    p = np.clip(np.asarray(p, dtype=float), eps, 1.0 - eps)
    y = np.asarray(y, dtype=float)
    value = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(value) if value.ndim == 0 else value


def loss_terms(mlp: Mlp, logits: np.ndarray, targets, loss: str) -> Tuple[np.ndarray, np.ndarray]:
    """逐样本损失与 dℓ_i/dlogits。"""
    if loss == "bce":
        if mlp.mode != "classifier" or mlp.output_dim != 1:
            raise DomainError("bce 需要单输出分类器")
        eps = config.PROB_EPS
        y = np.asarray(targets, dtype=float).reshape(-1)
        p_raw = expit(logits[:, 0])
        p = np.clip(p_raw, eps, 1.0 - eps)
        # 截断区间外导数为 0
        inside = (p_raw > eps) & (p_raw < 1.0 - eps)
        return bce_loss(p, y), ((p - y) * inside)[:, None]
    if loss == "xent":
        if mlp.mode != "regressor":
            raise DomainError("xent 需要 regressor 模式（输出 logits）")
        t = np.asarray(targets, dtype=int).reshape(-1)
        rows = np.arange(t.size)
        losses = -log_softmax(logits, axis=1)[rows, t]
        grad = softmax(logits, axis=1)
        grad[rows, t] -= 1.0
        return losses, grad
    if loss == "mse":
        if mlp.mode != "regressor":
            raise DomainError("mse 需要 regressor 模式")
        residual = logits - np.atleast_2d(np.asarray(targets, dtype=float)).reshape(logits.shape)
        return 0.5 * np.sum(residual**2, axis=1), residual
    raise DomainError(f"未知损失: {loss}（可选: {', '.join(LOSSES)}）")


def as_chain(model: Union[Mlp, Sequence[Mlp]]) -> List[Mlp]:
    """单个网络或串联 nets[-1] ∘ … ∘ nets[0]；中间网络必须是恒等输出。"""
    nets = [model] if isinstance(model, Mlp) else list(model)
    if not nets:
        raise DomainError("网络链为空")
    for i, (inner, outer) in enumerate(zip(nets[:-1], nets[1:])):
        if inner.mode != "regressor":
            raise DomainError(f"链中第 {i} 个网络必须是 regressor 模式")
        if inner.output_dim != outer.input_dim:
            raise DomainError(f"链中第 {i} 个网络输出维度 {inner.output_dim} 与下一个输入维度 {outer.input_dim} 不一致")
    return nets


def chain_backward(
    model: Union[Mlp, Sequence[Mlp]],
    X,
    targets,
    loss: str = "bce",
    sample_weight: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, List[Gradients]]:
    """
    串联网络上的加权损失 Σ w_i ℓ_i 及每个网络的解析梯度（默认 w_i = 1/m）。

    Returns:
        (逐样本加权损失 w_i ℓ_i, 与 nets 对应的梯度列表)
    """
    nets = as_chain(model)
    arr, _ = _as_batch(nets[0], X)
    m = arr.shape[0]
    if m == 0:
        raise DomainError("batch 为空")
    weights = np.full(m, 1.0 / m) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    if weights.shape != (m,):
        raise DomainError("sample_weight 形状与 batch 不一致")
    caches = []
    h = arr
    for net in nets:
        caches.append(forward_train(net, h, rng))
        h = caches[-1].logits
    losses, g = loss_terms(nets[-1], h, targets, loss)
    g = g * weights[:, None]
    grads: List[Gradients] = [None] * len(nets)
    for i in range(len(nets) - 1, -1, -1):
        grads[i], g = backprop(nets[i], caches[i], g)
    return weights * losses, grads


def backward(
    mlp: Mlp,
    X,
    targets,
    loss: str = "bce",
    sample_weight: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, Gradients]:
    """
    单个网络的加权 batch 损失及其解析梯度。

    Returns:
        (loss, gradients)
    """
    terms, grads = chain_backward(mlp, X, targets, loss, sample_weight, rng)
    return float(np.sum(terms)), grads[0]


def optim_step(mlp: Mlp, grads: Gradients, optim: OptimConfig) -> Mlp:
    """一步 SGD，解耦权重衰减：θ ← θ(1 - lr·wd) - lr·g（原地更新）。"""
    lr, wd = optim.learning_rate, optim.weight_decay
    for param, grad in zip(mlp.parameters(), grads.arrays()):
        if param.shape != grad.shape:
            raise DomainError(f"梯度形状 {grad.shape} 与参数 {param.shape} 不一致")
        if wd > 0.0:
            param *= 1.0 - lr * wd
        param -= lr * grad
    return mlp


def sgd_step(
    model: Union[Mlp, Sequence[Mlp]],
    X,
    targets,
    optim: OptimConfig,
    loss: str = "bce",
    sample_weight: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    extra: Optional[Sequence[Optional[Gradients]]] = None,
) -> np.ndarray:
    """
    一步 SGD：链上所有网络都用更新前的梯度同时更新。

    extra 与链一一对应，非空项在更新前加到该网络的梯度上。
    返回更新前的逐样本加权损失。
    """
    nets = as_chain(model)
    terms, grads = chain_backward(nets, X, targets, loss, sample_weight, rng)
    if extra is not None and len(extra) != len(nets):
        raise DomainError("extra 的长度必须与网络链一致")
    for i, (net, grad) in enumerate(zip(nets, grads)):
        if extra is not None and extra[i] is not None:
            grad = grad + extra[i]
        optim_step(net, grad, optim)
    return terms


def epoch_batches(n: int, batch_size: int, gen: np.random.Generator) -> List[np.ndarray]:
    """一个 epoch 的打乱 mini-batch 索引。"""
    perm = gen.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def train_classifier(
    model: Union[Mlp, Sequence[Mlp]],
    X: np.ndarray,
    y01: np.ndarray,
    optim: OptimConfig,
    seed: int = 0,
    sample_weight: Optional[np.ndarray] = None,
) -> List[float]:
    """
    普通 mini-batch BCE 训练（基线网络、尾部 ERM 与 φ∘C 共用）。

    model 可以是网络链 [φ, C]，此时两者一起训练。返回每个 epoch 的平均损失。
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y01 = np.asarray(y01, dtype=float).reshape(-1)
    stream = RngStream(seed)
    shuffle = stream.spawn("shuffle").generator
    dropout = stream.spawn("dropout").generator
    history = []
    for epoch in range(optim.epochs):
        total = 0.0
        for idx in epoch_batches(X.shape[0], optim.batch_size, shuffle):
            w = None
            if sample_weight is not None:
                w = sample_weight[idx] / np.sum(sample_weight[idx])
            terms = sgd_step(model, X[idx], y01[idx], optim, sample_weight=w, rng=dropout)
            total += float(np.sum(terms)) * idx.size
        history.append(total / X.shape[0])
        log_epoch(logger, "MLP", epoch + 1, optim.epochs, {"loss": history[-1]}, every=max(optim.epochs, 1))
    return history


def gradient_check(
    mlp: Mlp,
    loss_fn: Callable[[Mlp], float],
    analytic: Gradients,
    step: float = 1e-5,
) -> float:
    """
    中心差分校验：逐参数 (f(θ+h) - f(θ-h)) / 2h 与解析梯度比较。

    Returns:
        最大相对误差 |a - n| / max(|a|, |n|, 1e-6)
    """
    worst = 0.0
    for param, grad in zip(mlp.parameters(), analytic.arrays()):
        for idx in np.ndindex(param.shape):
            original = param[idx]
            param[idx] = original + step
            f_plus = loss_fn(mlp)
            param[idx] = original - step
            f_minus = loss_fn(mlp)
            param[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(grad[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
    return worst


# ---------- 序列化 ----------
def mlp_to_dict(mlp: Mlp) -> dict:
    return {
        "format": config.MLP_FORMAT,
        "version": config.FORMAT_VERSION,
        "layer_sizes": mlp.layer_sizes,
        "mode": mlp.mode,
        "dropout": mlp.dropout,
        # 行主序展开；float repr 保证十进制往返逐位一致
        "weights": [w.reshape(-1).tolist() for w in mlp.weights],
        "biases": [b.tolist() for b in mlp.biases],
    }


def mlp_from_dict(data: dict) -> Mlp:
    if data.get("format") != config.MLP_FORMAT:
        raise ParseError(f"不是网络文件: format={data.get('format')!r}")
    if data.get("version") != config.FORMAT_VERSION:
        raise ParseError(f"不支持的版本: {data.get('version')!r}")
    sizes = [int(s) for s in data["layer_sizes"]]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = np.asarray(data["weights"][i], dtype=float)
        b = np.asarray(data["biases"][i], dtype=float)
        if w.size != fan_in * fan_out or b.size != fan_out:
            raise ParseError(f"第 {i} 层参数个数与 layer_sizes 不符")
        weights.append(w.reshape(fan_in, fan_out))
        biases.append(b)
    return Mlp(weights=weights, biases=biases, mode=data["mode"], dropout=float(data["dropout"]))


def save_mlp(mlp: Mlp, path: Union[str, Path]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(mlp_to_dict(mlp), indent=2), encoding="utf-8")
    return out


def load_mlp(path: Union[str, Path]) -> Mlp:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"JSON 解析失败: {e.msg}", line_no=e.lineno, path=str(path)) from e
    return mlp_from_dict(data)
