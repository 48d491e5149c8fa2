"""
LHTR：对抗学习重尾隐表示 + 极值/主体两个分类头

双头模式一步训练的更新顺序：判别器 → C^ext → C^bulk → 编码器。
单头模式（LHTR₁）在判别器之后对 φ∘C 做一步联合 SGD。
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from core.config import config
from core.errors import ConfigError, DomainError, ParseError
from core.evt import LabeledDataset, TailThreshold, norms, select_extremes, tail_count, tail_threshold
from core.heavy_tails import LogisticParams, sample_logistic
from core.logger import get_logger, log_epoch
from core.nn import (
    Gradients,
    Mlp,
    OptimConfig,
    backprop,
    epoch_batches,
    forward,
    forward_train,
    loss_terms,
    mlp_from_dict,
    mlp_init,
    mlp_to_dict,
    optim_step,
    predict_proba,
    sgd_step,
)
from core.rng import RngStream, derive_seed

logger = get_logger("lhtr")

TWO_HEAD = "two-head"
SINGLE_HEAD = "single-head"


@dataclass
class LhtrConfig:
    """LHTR 超参数"""

    encoder_sizes: List[int]
    classifier_sizes: List[int]
    discriminator_sizes: List[int]
    optim: OptimConfig = field(default_factory=OptimConfig)
    kappa: float = 0.25
    rho1: Optional[float] = None
    rho2: Optional[float] = None
    rho3: float = 1e-3
    delta: float = 0.9
    dropout: float = 0.0
    mode: str = TWO_HEAD

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ConfigError(f"κ 必须在 (0, 1) 内: {self.kappa}")
        if self.rho3 < 0:
            raise ConfigError(f"ρ3 必须 >= 0: {self.rho3}")
        for name in ("rho1", "rho2"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ConfigError(f"{name} 必须 > 0: {value}")
        if self.mode not in (TWO_HEAD, SINGLE_HEAD):
            raise ConfigError(f"未知模式: {self.mode}")
        if len(self.encoder_sizes) < 2 or len(self.classifier_sizes) < 2 or len(self.discriminator_sizes) < 2:
            raise ConfigError("每个网络至少需要 2 个层尺寸")
        latent = self.encoder_sizes[-1]
        if self.classifier_sizes[0] != latent or self.discriminator_sizes[0] != latent:
            raise ConfigError(f"分类器/判别器输入维度必须等于隐空间维度 {latent}")
        if self.classifier_sizes[-1] != 1 or self.discriminator_sizes[-1] != 1:
            raise ConfigError("分类器与判别器输出维度必须为 1")
        if tail_count(self.optim.batch_size, self.kappa) < 1:
            raise ConfigError(f"⌊κ·batch⌋ = 0（κ={self.kappa}, batch={self.optim.batch_size}）")
        # 校验 δ
        self.target

    @property
    def latent_dim(self) -> int:
        return self.encoder_sizes[-1]

    @property
    def target(self) -> LogisticParams:
        return LogisticParams(dimension=self.latent_dim, delta=self.delta)

    @property
    def single_head(self) -> bool:
        return self.mode == SINGLE_HEAD

    @classmethod
    def from_preset(cls, name: str, input_dim: int, mode: str = TWO_HEAD, **overrides) -> "LhtrConfig":
        """按预设构造（toy / small / large），overrides 覆盖任意字段。"""
        preset = config.get_preset(name, input_dim)
        single = mode == SINGLE_HEAD
        optim = OptimConfig(
            learning_rate=preset["lr"],
            weight_decay=preset["weight_decay"],
            batch_size=preset["batch_size"],
            epochs=preset["epochs"],
        )
        latent = (preset["single_encoder"] if single else preset["encoder"])[-1]
        values = {
            "encoder_sizes": preset["single_encoder"] if single else preset["encoder"],
            "classifier_sizes": preset["single_classifier"] if single else preset["classifier"],
            "discriminator_sizes": [latent, *preset["discriminator"][1:]],
            "optim": optim,
            "kappa": config.DEFAULT_KAPPA,
            "rho3": preset["rho3"],
            "delta": preset["delta"],
            "dropout": preset["dropout"],
            "mode": mode,
        }
        unknown = set(overrides) - set(values) - {"rho1", "rho2"}
        if unknown:
            raise ConfigError(f"未知配置字段: {sorted(unknown)}")
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return {
            "encoder_sizes": list(self.encoder_sizes),
            "classifier_sizes": list(self.classifier_sizes),
            "discriminator_sizes": list(self.discriminator_sizes),
            "optim": self.optim.to_dict(),
            "kappa": self.kappa,
            "rho1": self.rho1,
            "rho2": self.rho2,
            "rho3": self.rho3,
            "delta": self.delta,
            "dropout": self.dropout,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LhtrConfig":
        values = dict(data)
        values["optim"] = OptimConfig.from_dict(values["optim"])
        return cls(**values)


@dataclass
class StepMetrics:
    """一步训练的四项分损失"""

    discriminator: float
    extreme: float
    bulk: float
    adversarial: float
    encoder: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "discriminator": self.discriminator,
            "extreme": self.extreme,
            "bulk": self.bulk,
            "adversarial": self.adversarial,
            "encoder": self.encoder,
        }


@dataclass
class LhtrModel:
    """编码器 φ、C^ext、C^bulk、判别器 D、阈值 t"""

    encoder: Mlp
    c_ext: Mlp
    c_bulk: Mlp
    discriminator: Mlp
    config: LhtrConfig
    rho1: float = 1.0
    rho2: float = 1.0
    threshold: Optional[TailThreshold] = None
    history: List[Dict[str, float]] = field(default_factory=list)

    def encode(self, X) -> np.ndarray:
        return np.atleast_2d(forward(self.encoder, np.atleast_2d(X)))

    def latent_norms(self, X) -> np.ndarray:
        return norms(self.encode(X))

    def require_threshold(self) -> TailThreshold:
        if self.threshold is None:
            raise DomainError("模型尚未完成训练（没有阈值 t）")
        return self.threshold

    def extreme_mask(self, X) -> np.ndarray:
        """‖φ(x)‖ ≥ t 的样本（边界归为极值）。"""
        return self.latent_norms(X) >= self.require_threshold().t


def init_model(cfg: LhtrConfig, input_dim: int, seed: int) -> LhtrModel:
    if cfg.encoder_sizes[0] != input_dim:
        raise ConfigError(f"编码器输入维度 {cfg.encoder_sizes[0]} 与数据维度 {input_dim} 不一致")
    encoder = mlp_init(cfg.encoder_sizes, mode="regressor", seed=derive_seed(seed, "encoder"))
    c_ext = mlp_init(cfg.classifier_sizes, mode="classifier", seed=derive_seed(seed, "c_ext"), dropout=cfg.dropout)
    if cfg.single_head:
        c_bulk = c_ext
    else:
        c_bulk = mlp_init(cfg.classifier_sizes, mode="classifier", seed=derive_seed(seed, "c_bulk"), dropout=cfg.dropout)
    discriminator = mlp_init(cfg.discriminator_sizes, mode="classifier", seed=derive_seed(seed, "discriminator"))
    return LhtrModel(encoder=encoder, c_ext=c_ext, c_bulk=c_bulk, discriminator=discriminator, config=cfg)


def default_class_weights(norm_values: np.ndarray, kappa: float) -> Tuple[float, float]:
    """
    ρ1 = (1 - κ̂)^{-1}，ρ2 = κ̂^{-1}

    κ̂ = P̂(‖Z‖ ≥ ‖Z_(⌊κn⌋)‖) 为实际极值比例（并列时可能大于 κ）。
    """
    values = np.asarray(norm_values, dtype=float).reshape(-1)
    threshold = tail_threshold(values, kappa)
    kappa_hat = select_extremes(values, threshold.t).size / values.size
    return class_weights_from_fraction(kappa_hat)


def class_weights_from_fraction(kappa_hat: float) -> Tuple[float, float]:
    if not 0.0 < kappa_hat < 1.0:
        raise DomainError(f"实际极值比例退化: κ̂={kappa_hat}")
    return 1.0 / (1.0 - kappa_hat), 1.0 / kappa_hat


def discriminator_objective(D: Mlp, prior_batch: np.ndarray, encoded_batch: np.ndarray, rho3: float) -> float:
    """(ρ3/m) Σ [log D(Z_i) + log(1 - D(Z̃_i))]"""
    p_prior = predict_proba(D, prior_batch)
    p_enc = predict_proba(D, encoded_batch)
    m = p_prior.size
    return float(rho3 / m * (np.sum(np.log(p_prior)) + np.sum(np.log1p(-p_enc))))


def discriminator_ascent(
    D: Mlp,
    prior_batch: np.ndarray,
    encoded_batch: np.ndarray,
    rho3: float,
    optim: OptimConfig,
) -> float:
    """
    判别器上升一步：对 -(ρ3/m) Σ [log D(Z) + log(1 - D(Z̃))] 做一步下降。

    返回更新前的 discriminator_objective。
    """
    m = prior_batch.shape[0]
    inputs = np.vstack([prior_batch, encoded_batch])
    targets = np.concatenate([np.ones(m), np.zeros(encoded_batch.shape[0])])
    weights = np.full(inputs.shape[0], rho3 / m)
    terms = sgd_step(D, inputs, targets, optim, sample_weight=weights)
    return -float(np.sum(terms))


def partition_batch(norm_values: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """按范数降序排序，前 k 个为极值，其余为主体（排序本身不求导）。"""
    order = np.argsort(-np.asarray(norm_values, dtype=float), kind="stable")
    return order[:k], order[k:]


def classifier_step(
    clf: Mlp,
    Z: np.ndarray,
    y01: np.ndarray,
    rho: float,
    optim: OptimConfig,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """对 (ρ/|Z|) Σ ℓ(Y, C(Z)) 下降一步，返回更新前的损失。"""
    if Z.shape[0] == 0:
        return 0.0
    weights = np.full(Z.shape[0], rho / Z.shape[0])
    return float(np.sum(sgd_step(clf, Z, y01, optim, sample_weight=weights, rng=rng)))


def adversarial_term(model: LhtrModel, Z: np.ndarray) -> Tuple[float, np.ndarray]:
    """(1/m) Σ -ρ3 log D(Z̃_i) 及其对 Z̃ 的梯度；ρ3 = 0 时为 (0, 0)。"""
    rho3 = model.config.rho3
    dZ = np.zeros_like(Z)
    if rho3 <= 0.0:
        return 0.0, dZ
    eps = config.PROB_EPS
    m = Z.shape[0]
    d_cache = forward_train(model.discriminator, Z)
    p_raw = expit(d_cache.logits[:, 0])
    p = np.clip(p_raw, eps, 1.0 - eps)
    inside = (p_raw > eps) & (p_raw < 1.0 - eps)
    d_logits = (-(rho3 / m) * (1.0 - p) * inside)[:, None]
    _, dz = backprop(model.discriminator, d_cache, d_logits)
    return float(np.mean(-rho3 * np.log(p))), dZ + dz


@dataclass
class EncoderObjective:
    value: float
    grads: Gradients
    adversarial: float
    extreme: float
    bulk: float


def encoder_objective(
    model: LhtrModel,
    X: np.ndarray,
    y01: np.ndarray,
    ext_idx: np.ndarray,
    bulk_idx: np.ndarray,
) -> EncoderObjective:
    """
    编码器目标 (1/m) Σ [-ρ3 log D(Z̃_i)] + L^ext + L^bulk 及其对 φ 参数的解析梯度。

    极值/主体划分由调用方固定传入。
    """
    cache = forward_train(model.encoder, X)
    Z = cache.logits
    adversarial, dZ = adversarial_term(model, Z)

    parts = []
    for clf, idx, rho in ((model.c_ext, ext_idx, model.rho1), (model.c_bulk, bulk_idx, model.rho2)):
        if idx.size == 0:
            parts.append(0.0)
            continue
        c_cache = forward_train(clf, Z[idx])
        losses, d_logits = loss_terms(clf, c_cache.logits, y01[idx], "bce")
        weight = rho / idx.size
        parts.append(float(weight * np.sum(losses)))
        _, dz = backprop(clf, c_cache, d_logits * weight)
        dZ[idx] += dz

    grads, _ = backprop(model.encoder, cache, dZ)
    return EncoderObjective(
        value=adversarial + parts[0] + parts[1],
        grads=grads,
        adversarial=adversarial,
        extreme=parts[0],
        bulk=parts[1],
    )


def partition_weights(m: int, ext_idx: np.ndarray, bulk_idx: np.ndarray, rho1: float, rho2: float) -> np.ndarray:
    """极值样本权重 ρ1/|ext|，主体样本权重 ρ2/|bulk|。"""
    weights = np.zeros(m)
    if ext_idx.size:
        weights[ext_idx] = rho1 / ext_idx.size
    if bulk_idx.size:
        weights[bulk_idx] = rho2 / bulk_idx.size
    return weights


def _joint_step(
    model: LhtrModel,
    X: np.ndarray,
    y01: np.ndarray,
    ext_idx: np.ndarray,
    bulk_idx: np.ndarray,
    disc_value: float,
    dropout_rng: Optional[np.random.Generator],
) -> StepMetrics:
    cfg = model.config
    extra = None
    adversarial = 0.0
    if cfg.rho3 > 0.0:
        cache = forward_train(model.encoder, X)
        adversarial, dZ = adversarial_term(model, cache.logits)
        adv_grads, _ = backprop(model.encoder, cache, dZ)
        extra = [adv_grads, None]
    weights = partition_weights(X.shape[0], ext_idx, bulk_idx, model.rho1, model.rho2)
    terms = sgd_step([model.encoder, model.c_ext], X, y01, cfg.optim, sample_weight=weights, rng=dropout_rng, extra=extra)
    l_ext = float(np.sum(terms[ext_idx]))
    l_bulk = float(np.sum(terms[bulk_idx]))
    return StepMetrics(
        discriminator=disc_value,
        extreme=l_ext,
        bulk=l_bulk,
        adversarial=adversarial,
        encoder=adversarial + l_ext + l_bulk,
    )


def train_step(
    model: LhtrModel,
    X: np.ndarray,
    y01: np.ndarray,
    prior_rng: np.random.Generator,
    dropout_rng: Optional[np.random.Generator] = None,
) -> StepMetrics:
    """
    一个训练步：(a) 判别器上升 (b) C^ext 下降 (c) C^bulk 下降 (d) 编码器下降。

    ρ3 = 0 时 (a) 与对抗项不执行。单头模式下 (b)(c)(d) 合并为 φ∘C 上的一步
    sgd_step，样本权重为 ρ1/k（极值）与 ρ2/(m-k)（主体）。
    """
    cfg = model.config
    m = X.shape[0]
    k = tail_count(m, cfg.kappa)
    if k < 1:
        raise DomainError(f"⌊κm⌋ = 0（κ={cfg.kappa}, m={m}）")

    Z = forward(model.encoder, X)
    disc_value = 0.0
    if cfg.rho3 > 0.0:
        prior = sample_logistic(cfg.target, m, prior_rng)
        disc_value = discriminator_ascent(model.discriminator, prior, Z, cfg.rho3, cfg.optim)

    ext_idx, bulk_idx = partition_batch(norms(Z), k)
    if cfg.single_head:
        return _joint_step(model, X, y01, ext_idx, bulk_idx, disc_value, dropout_rng)

    l_ext = classifier_step(model.c_ext, Z[ext_idx], y01[ext_idx], model.rho1, cfg.optim, dropout_rng)
    l_bulk = classifier_step(model.c_bulk, Z[bulk_idx], y01[bulk_idx], model.rho2, cfg.optim, dropout_rng)

    objective = encoder_objective(model, X, y01, ext_idx, bulk_idx)
    optim_step(model.encoder, objective.grads, cfg.optim)

    return StepMetrics(
        discriminator=disc_value,
        extreme=l_ext,
        bulk=l_bulk,
        adversarial=objective.adversarial,
        encoder=objective.value,
    )


def train_lhtr(dataset: LabeledDataset, cfg: LhtrConfig, seed: int = 0) -> LhtrModel:
    """
    固定 epoch 预算的 mini-batch 训练；结束后在全训练集上编码、排序，
    令 t = ‖Z̃_(⌊κn⌋)‖。
    """
    if tail_count(dataset.n, cfg.kappa) < 1:
        raise DomainError(f"⌊κn⌋ = 0（κ={cfg.kappa}, n={dataset.n}）")
    model = init_model(cfg, dataset.d, seed)
    stream = RngStream(seed)
    shuffle = stream.spawn("shuffle").generator
    prior = stream.spawn("prior").generator
    dropout = stream.spawn("dropout").generator

    if cfg.rho1 is None or cfg.rho2 is None:
        rho1, rho2 = default_class_weights(model.latent_norms(dataset.X), cfg.kappa)
        model.rho1 = cfg.rho1 if cfg.rho1 is not None else rho1
        model.rho2 = cfg.rho2 if cfg.rho2 is not None else rho2
    else:
        model.rho1, model.rho2 = cfg.rho1, cfg.rho2

    y01 = dataset.labels01
    logger.info(
        f"开始训练 LHTR: n={dataset.n}, d={dataset.d}, mode={cfg.mode}, "
        f"ρ=({model.rho1:.4g}, {model.rho2:.4g}, {cfg.rho3:.4g}), epochs={cfg.optim.epochs}"
    )
    for epoch in range(cfg.optim.epochs):
        sums: Dict[str, float] = {}
        steps = 0
        for idx in epoch_batches(dataset.n, cfg.optim.batch_size, shuffle):
            if tail_count(idx.size, cfg.kappa) < 1:
                logger.debug(f"跳过过小的 batch: {idx.size}")
                continue
            metrics = train_step(model, dataset.X[idx], y01[idx], prior, dropout)
            for key, value in metrics.as_dict().items():
                sums[key] = sums.get(key, 0.0) + value
            steps += 1
        summary = {key: value / max(steps, 1) for key, value in sums.items()}
        model.history.append(summary)
        log_epoch(logger, "LHTR", epoch + 1, cfg.optim.epochs, summary)

    model.threshold = tail_threshold(model.latent_norms(dataset.X), cfg.kappa)
    logger.info(f"LHTR 训练完成: t={model.threshold.t:.6g}, k={model.threshold.k}")
    return model


def predict_combined(model: LhtrModel, X) -> np.ndarray:
    """g(z) = g^ext(z)·1{‖z‖ ≥ t} + g^bulk(z)·1{‖z‖ < t}"""
    arr = np.asarray(X, dtype=float)
    single = arr.ndim == 1
    Z = model.encode(arr)
    extreme = norms(Z) >= model.require_threshold().t
    labels_ext = np.where(predict_proba(model.c_ext, Z) > 0.5, 1, -1)
    labels_bulk = np.where(predict_proba(model.c_bulk, Z) > 0.5, 1, -1)
    labels = np.where(extreme, labels_ext, labels_bulk)
    return labels[0] if single else labels


def predict_hybrid(model: LhtrModel, bulk_predict: Callable[[np.ndarray], np.ndarray], X) -> np.ndarray:
    """极值点交给 C^ext，主体点交给外部分类器（作用于原始输入 x）。"""
    arr = np.asarray(X, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    Z = model.encode(arr)
    extreme = norms(Z) >= model.require_threshold().t
    labels = np.empty(arr.shape[0], dtype=int)
    if np.any(extreme):
        labels[extreme] = np.where(predict_proba(model.c_ext, Z[extreme]) > 0.5, 1, -1)
    if np.any(~extreme):
        labels[~extreme] = np.asarray(bulk_predict(arr[~extreme])).reshape(-1)
    return labels[0] if single else labels


# ---------- 序列化 ----------
def model_to_dict(model: LhtrModel) -> dict:
    return {
        "format": config.MODEL_FORMAT,
        "version": config.FORMAT_VERSION,
        "config": model.config.to_dict(),
        "rho1": model.rho1,
        "rho2": model.rho2,
        "threshold": model.threshold.to_dict() if model.threshold else None,
        "encoder": mlp_to_dict(model.encoder),
        "c_ext": mlp_to_dict(model.c_ext),
        # 单头模式两个头是同一个网络
        "c_bulk": None if model.config.single_head else mlp_to_dict(model.c_bulk),
        "discriminator": mlp_to_dict(model.discriminator),
    }


def model_from_dict(data: dict) -> LhtrModel:
    if data.get("format") != config.MODEL_FORMAT:
        raise ParseError(f"不是 LHTR 模型文件: format={data.get('format')!r}")
    if data.get("version") != config.FORMAT_VERSION:
        raise ParseError(f"不支持的版本: {data.get('version')!r}")
    cfg = LhtrConfig.from_dict(data["config"])
    c_ext = mlp_from_dict(data["c_ext"])
    c_bulk = c_ext if cfg.single_head else mlp_from_dict(data["c_bulk"])
    threshold = TailThreshold.from_dict(data["threshold"]) if data.get("threshold") else None
    return LhtrModel(
        encoder=mlp_from_dict(data["encoder"]),
        c_ext=c_ext,
        c_bulk=c_bulk,
        discriminator=mlp_from_dict(data["discriminator"]),
        config=cfg,
        rho1=float(data["rho1"]),
        rho2=float(data["rho2"]),
        threshold=threshold,
    )


def save_model(model: LhtrModel, path: Union[str, Path]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(model_to_dict(model), indent=2), encoding="utf-8")
    logger.info(f"模型已保存: {out}")
    return out


def load_model(path: Union[str, Path]) -> LhtrModel:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"JSON 解析失败: {e.msg}", line_no=e.lineno, path=str(path)) from e
    return model_from_dict(data)
