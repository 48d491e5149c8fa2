"""
极值区域数据增强（GENELIEX）

冻结编码器 φ，在范数最大的 ⌊κm⌋ 个隐编码上训练自回归解码器，
再从 λ·φ(x)（λ ≥ 1）贪心解码生成新序列。
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax

from core.config import config
from core.errors import DomainError, ParseError
from core.evt import norms
from core.logger import get_logger, log_epoch
from core.nn import (
    Mlp,
    OptimConfig,
    backward,
    epoch_batches,
    forward,
    mlp_from_dict,
    mlp_init,
    mlp_to_dict,
    optim_step,
    predict_labels,
)
from core.rng import RngStream, derive_seed

logger = get_logger("augment")

Labeler = Union[Mlp, Callable[[np.ndarray], np.ndarray]]


@dataclass
class SequenceDataset:
    """token 序列 + 对应的输入嵌入 X_U"""

    sequences: List[List[int]]
    X: np.ndarray
    vocab_size: int
    t_max: int

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.sequences = [[int(tok) for tok in seq] for seq in self.sequences]
        if self.vocab_size < 4:
            raise DomainError(f"词表至少需要 4 个 token（含 START/STOP）: {self.vocab_size}")
        if self.t_max < 1:
            raise DomainError(f"T_max 必须 >= 1: {self.t_max}")
        if len(self.sequences) != self.X.shape[0]:
            raise DomainError(f"序列数 {len(self.sequences)} 与嵌入行数 {self.X.shape[0]} 不一致")
        for i, seq in enumerate(self.sequences):
            if len(seq) > self.t_max:
                raise DomainError(f"第 {i} 条序列长度 {len(seq)} 超过 T_max={self.t_max}")
            if any(tok < 0 or tok >= self.vocab_size for tok in seq):
                raise DomainError(f"第 {i} 条序列含越界 token")

    @property
    def n(self) -> int:
        return len(self.sequences)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(seq) for seq in self.sequences], dtype=int)


@dataclass
class ToyDecoder:
    """单步网络：(z ⊕ one-hot(上一 token)) -> |V| 个 logits"""

    step: Mlp
    latent_dim: int
    vocab_size: int
    t_max: int
    history: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.step.mode != "regressor":
            raise DomainError("解码单步网络必须是 regressor 模式")
        if self.step.input_dim != self.latent_dim + self.vocab_size:
            raise DomainError(f"单步网络输入维度应为 d'+|V| = {self.latent_dim + self.vocab_size}")
        if self.step.output_dim != self.vocab_size:
            raise DomainError(f"单步网络输出维度应为 |V| = {self.vocab_size}")


def init_decoder(latent_dim: int, vocab_size: int, t_max: int, hidden: Sequence[int] = (32,), seed: int = 0) -> ToyDecoder:
    step = mlp_init([latent_dim + vocab_size, *hidden, vocab_size], mode="regressor", seed=seed)
    return ToyDecoder(step=step, latent_dim=latent_dim, vocab_size=vocab_size, t_max=t_max)


def effective_length(target: Sequence[int]) -> int:
    """STOP 之后的位置不计入损失。"""
    seq = list(target)
    if config.STOP_ID in seq:
        return seq.index(config.STOP_ID) + 1
    return len(seq)


def sequence_nll(logits: np.ndarray, target: Sequence[int], t_max: Optional[int] = None) -> float:
    """ℓ_gen = -Σ_t log p_{u_t, t}，p 为逐步 softmax。"""
    seq = list(target)
    if t_max is not None and len(seq) > t_max:
        raise DomainError(f"目标序列长度 {len(seq)} 超过 T_max={t_max}")
    length = effective_length(seq)
    if length == 0:
        return 0.0
    steps = np.atleast_2d(np.asarray(logits, dtype=float))
    if steps.shape[0] < length:
        raise DomainError(f"logits 步数 {steps.shape[0]} 少于目标长度 {length}")
    log_p = log_softmax(steps[:length], axis=1)
    return float(-np.sum(log_p[np.arange(length), seq[:length]]))


def teacher_forced_rows(
    Z: np.ndarray, sequences: Sequence[Sequence[int]], vocab_size: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    展开 teacher forcing：每个位置一行 (z ⊕ one-hot(u_{t-1}))，目标 u_t。

    Returns:
        (inputs, targets, owner)，owner[r] 为该行所属序列下标
    """
    Z = np.atleast_2d(Z)
    inputs, targets, owner = [], [], []
    for i, seq in enumerate(sequences):
        length = effective_length(seq)
        prev = [config.START_ID, *seq[: length - 1]]
        for t in range(length):
            one_hot = np.zeros(vocab_size)
            one_hot[prev[t]] = 1.0
            inputs.append(np.concatenate([Z[i], one_hot]))
            targets.append(seq[t])
            owner.append(i)
    if not inputs:
        return np.zeros((0, Z.shape[1] + vocab_size)), np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return np.vstack(inputs), np.asarray(targets, dtype=int), np.asarray(owner, dtype=int)


def step_logits(decoder: ToyDecoder, Z: np.ndarray, sequences: Sequence[Sequence[int]]) -> List[np.ndarray]:
    """每条序列的 teacher-forced 逐步 logits。"""
    inputs, _, owner = teacher_forced_rows(Z, sequences, decoder.vocab_size)
    if inputs.shape[0] == 0:
        return [np.zeros((0, decoder.vocab_size)) for _ in sequences]
    logits = forward(decoder.step, inputs)
    return [logits[owner == i] for i in range(len(sequences))]


def decoder_loss(decoder: ToyDecoder, Z: np.ndarray, sequences: Sequence[Sequence[int]], weights: np.ndarray):
    """Σ_i w_i · ℓ_gen(U_i | z_i) 及单步网络的梯度。"""
    inputs, targets, owner = teacher_forced_rows(Z, sequences, decoder.vocab_size)
    if inputs.shape[0] == 0:
        raise DomainError("所有序列都为空")
    return backward(decoder.step, inputs, targets, "xent", sample_weight=np.asarray(weights, dtype=float)[owner])


def extreme_count(m: int, kappa: float) -> int:
    """⌊κm⌋，κ ∈ (0, 1]（κ = 1 时全部样本参与）。"""
    if not 0.0 < kappa <= 1.0:
        raise DomainError(f"κ 必须在 (0, 1] 内: {kappa}")
    return int(np.floor(kappa * m))


def train_decoder(
    encoder: Mlp,
    data: SequenceDataset,
    kappa: float,
    optim: Optional[OptimConfig] = None,
    seed: int = 0,
    rho1: float = 1.0,
    hidden: Sequence[int] = (32,),
) -> ToyDecoder:
    """
    每个 batch：编码 X_U，按 ‖Z̃‖ 降序排序，
    对 (ρ1/⌊κm⌋) Σ_{i ≤ ⌊κm⌋} ℓ_gen 下降一步。编码器保持冻结。
    """
    optim = optim or OptimConfig(learning_rate=0.05, weight_decay=0.0, batch_size=32, epochs=200)
    if extreme_count(optim.batch_size, kappa) < 1:
        raise DomainError(f"⌊κ·batch⌋ = 0（κ={kappa}, batch={optim.batch_size}）")
    latent_dim = encoder.output_dim
    decoder = init_decoder(latent_dim, data.vocab_size, data.t_max, hidden, seed=derive_seed(seed, "decoder"))
    shuffle = RngStream(seed).spawn("shuffle").generator
    Z_all = np.atleast_2d(forward(encoder, data.X))

    for epoch in range(optim.epochs):
        total, steps = 0.0, 0
        for idx in epoch_batches(data.n, optim.batch_size, shuffle):
            k = extreme_count(idx.size, kappa)
            if k < 1:
                continue
            Z = Z_all[idx]
            top = np.argsort(-norms(Z), kind="stable")[:k]
            seqs = [data.sequences[idx[i]] for i in top]
            if sum(effective_length(s) for s in seqs) == 0:
                continue
            value, grads = decoder_loss(decoder, Z[top], seqs, np.full(k, rho1 / k))
            optim_step(decoder.step, grads, optim)
            total += value
            steps += 1
        decoder.history.append(total / max(steps, 1))
        log_epoch(logger, "解码器", epoch + 1, optim.epochs, {"loss": decoder.history[-1]}, every=50)
    return decoder


def decode_greedy(decoder: ToyDecoder, z) -> List[int]:
    """从 START 开始逐步取 argmax，遇到 STOP 或达到 T_max 停止。"""
    code = np.asarray(z, dtype=float).reshape(-1)
    if code.size != decoder.latent_dim:
        raise DomainError(f"隐编码维度应为 {decoder.latent_dim}: {code.size}")
    tokens: List[int] = []
    prev = config.START_ID
    for _ in range(decoder.t_max):
        one_hot = np.zeros(decoder.vocab_size)
        one_hot[prev] = 1.0
        logits = np.array(forward(decoder.step, np.concatenate([code, one_hot])), dtype=float)
        # START 不是合法输出
        logits[config.START_ID] = -np.inf
        tok = int(np.argmax(logits))
        tokens.append(tok)
        if tok == config.STOP_ID:
            break
        prev = tok
    return tokens


def generate_scaled(
    decoder: ToyDecoder,
    encoder: Mlp,
    x,
    lambdas: Sequence[float],
    threshold: Optional[float] = None,
    strict: bool = False,
) -> List[List[int]]:
    """对每个 λ_j 从 λ_j·φ(x) 贪心解码；返回 |λ| 条序列。"""
    lam = np.asarray(lambdas, dtype=float).reshape(-1)
    if np.any(lam < 1.0):
        raise DomainError(f"λ 必须 >= 1: {lam.min()}")
    z = np.asarray(forward(encoder, np.asarray(x, dtype=float).reshape(-1)), dtype=float)
    if threshold is not None:
        r = float(norms(z)[0])
        if r < threshold:
            if strict:
                raise DomainError(f"‖φ(x)‖ = {r:.6g} 低于阈值 t = {threshold:.6g}")
            logger.warning(f"‖φ(x)‖ = {r:.6g} 低于阈值 t = {threshold:.6g}，仍然生成")
    return [decode_greedy(decoder, value * z) for value in lam]


def _labeler(classifier: Labeler) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(classifier, Mlp):
        return lambda Z: predict_labels(classifier, Z)
    return classifier


def label_preservation_audit(classifier: Labeler, encoder: Mlp, points, lambdas: Sequence[float]) -> float:
    """(点, λ) 对中 C^ext(λz) 与 C^ext(z) 标签一致的比例。"""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    lam = np.asarray(lambdas, dtype=float).reshape(-1)
    if X.shape[0] == 0 or X.size == 0 or lam.size == 0:
        raise DomainError("审计输入为空")
    predict = _labeler(classifier)
    Z = np.atleast_2d(forward(encoder, X))
    base = np.asarray(predict(Z)).reshape(-1)
    scaled = (lam[:, None, None] * Z[None, :, :]).reshape(-1, Z.shape[1])
    labels = np.asarray(predict(scaled)).reshape(lam.size, Z.shape[0])
    return float(np.mean(labels == base[None, :]))


def augment_latent_extremes(encoder: Mlp, X_extreme, y_extreme, lambdas: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """由极值样本构造 {λ_j z_i}，沿用源样本标签。"""
    X = np.atleast_2d(np.asarray(X_extreme, dtype=float))
    y = np.asarray(y_extreme, dtype=int).reshape(-1)
    lam = np.asarray(lambdas, dtype=float).reshape(-1)
    if np.any(lam < 1.0):
        raise DomainError(f"λ 必须 >= 1: {lam.min()}")
    Z = np.atleast_2d(forward(encoder, X))
    Z_aug = (lam[:, None, None] * Z[None, :, :]).reshape(-1, Z.shape[1])
    return Z_aug, np.tile(y, lam.size)


# ---------- 序列化 ----------
def decoder_to_dict(decoder: ToyDecoder) -> dict:
    return {
        "format": config.DECODER_FORMAT,
        "version": config.FORMAT_VERSION,
        "latent_dim": decoder.latent_dim,
        "vocab_size": decoder.vocab_size,
        "t_max": decoder.t_max,
        "step": mlp_to_dict(decoder.step),
        "history": decoder.history,
    }


def decoder_from_dict(data: dict) -> ToyDecoder:
    if data.get("format") != config.DECODER_FORMAT:
        raise ParseError(f"不是解码器文件: format={data.get('format')!r}")
    if data.get("version") != config.FORMAT_VERSION:
        raise ParseError(f"不支持的版本: {data.get('version')!r}")
    return ToyDecoder(
        step=mlp_from_dict(data["step"]),
        latent_dim=int(data["latent_dim"]),
        vocab_size=int(data["vocab_size"]),
        t_max=int(data["t_max"]),
        history=[float(v) for v in data.get("history", [])],
    )


def save_decoder(decoder: ToyDecoder, path: Union[str, Path]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(decoder_to_dict(decoder), indent=2), encoding="utf-8")
    return out


def load_decoder(path: Union[str, Path]) -> ToyDecoder:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"JSON 解析失败: {e.msg}", line_no=e.lineno, path=str(path)) from e
    return decoder_from_dict(data)
