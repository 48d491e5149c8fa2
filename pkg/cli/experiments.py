"""
端到端实验：toy 实验、三模型对比、极值区域增强

每个实验返回 DiagnosticReport，并把散点 CSV / 模型 / 报告写到输出目录。
"""
import copy
import json
import platform
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import scipy

from core.augment import (
    augment_latent_extremes,
    generate_scaled,
    label_preservation_audit,
    save_decoder,
    sequence_nll,
    step_logits,
    train_decoder,
)
from core.config import config
from core.data_io import (
    MixtureSpec,
    gen_dependent_embedding,
    gen_gaussian_mixture,
    gen_latent_sequences,
    load_embeddings,
    save_sequences,
    write_scatter_csv,
)
from core.diagnostics import (
    DiagnosticReport,
    barcode_constancy,
    distinct_n,
    f1_by_class,
    ks_two_sample,
    length_by_tail_level,
    loss_table,
    rv_report,
    tail_loss_curve,
)
from core.errors import ConfigError
from core.evt import (
    LabeledDataset,
    RankTransformer,
    class_balance,
    fit_tail_erm,
    norms,
    tail_threshold,
    train_test_split,
)
from core.lhtr import (
    SINGLE_HEAD,
    TWO_HEAD,
    LhtrConfig,
    LhtrModel,
    load_model,
    predict_combined,
    predict_hybrid,
    save_model,
    train_lhtr,
)
from core.logger import get_logger
from core.nn import Mlp, OptimConfig, mlp_init, predict_labels, train_classifier
from core.rng import derive_seed

logger = get_logger("experiments")


@dataclass
class ExperimentConfig:
    """实验配置；JSON 配置文件中的未知字段会被拒绝"""

    out_dir: str = "runs"
    seed: int = config.DEFAULT_SEED
    preset: str = "toy"
    kappa: float = config.DEFAULT_KAPPA
    n: int = 3000
    test_fraction: float = 0.25
    data_path: Optional[str] = None
    mixture: Optional[Dict[str, Any]] = None
    lhtr: Dict[str, Any] = field(default_factory=dict)
    permutations: int = config.DEFAULT_PERMUTATIONS
    rv_method: str = "pearson"
    barcode_lambdas: List[float] = field(default_factory=lambda: list(config.BARCODE_LAMBDAS))
    curve_lambdas: List[float] = field(default_factory=lambda: [1.0, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0])
    comparison_seeds: int = 3
    vocab_size: int = 12
    t_max: int = 6
    decoder_epochs: int = 200
    decoder_learning_rate: float = 0.05
    lambda_min: float = config.AUGMENT_LAMBDA_MIN
    lambda_max: float = config.AUGMENT_LAMBDA_MAX
    m: int = config.AUGMENT_M
    model_path: Optional[str] = None

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ConfigError(f"κ 必须在 (0, 1) 内: {self.kappa}")
        if self.preset not in config.PRESETS:
            raise ConfigError(f"未知预设: {self.preset}")
        if self.data_path is not None and not Path(self.data_path).exists():
            raise ConfigError(f"数据文件不存在: {self.data_path}")
        if self.model_path is not None and not Path(self.model_path).exists():
            raise ConfigError(f"模型文件不存在: {self.model_path}")
        if self.comparison_seeds < 1:
            raise ConfigError("comparison_seeds 必须 >= 1")
        # 用户给出的 lhtr 覆盖项叠加在实验默认值之上（optim 逐字段合并）
        merged = copy.deepcopy(config.EXPERIMENT_LHTR.get(self.preset, {}))
        for key, value in (self.lhtr or {}).items():
            if key == "optim" and isinstance(value, dict):
                merged["optim"] = {**merged.get("optim", {}), **value}
            else:
                merged[key] = value
        self.lhtr = merged

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"未知配置字段: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str, **overrides) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"无法读取配置 {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("配置文件顶层必须是对象")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def output(self) -> Path:
        out = Path(self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return out

    def lhtr_config(self, input_dim: int, mode: str = TWO_HEAD) -> LhtrConfig:
        overrides = dict(self.lhtr)
        overrides.setdefault("kappa", self.kappa)
        optim = overrides.pop("optim", None)
        lhtr_cfg = LhtrConfig.from_preset(self.preset, input_dim, mode=mode, **overrides)
        if optim:
            lhtr_cfg = replace(lhtr_cfg, optim=OptimConfig.from_dict({**lhtr_cfg.optim.to_dict(), **optim}))
        return lhtr_cfg


def write_manifest(out_dir: Path, command: str, arguments: Dict[str, Any], seed: int) -> Path:
    """复现一次运行所需的全部信息（不含时间戳）。"""
    manifest = {
        "command": command,
        "arguments": arguments,
        "seed": seed,
        "versions": {
            "hana-tailrep": config.VERSION,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    path = Path(out_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def load_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    if cfg.data_path:
        return load_embeddings(cfg.data_path)
    spec = MixtureSpec.from_dict(cfg.mixture) if cfg.mixture else MixtureSpec()
    return gen_gaussian_mixture(spec, cfg.n, seed=derive_seed(cfg.seed, "data"))


def split_dataset(cfg: ExperimentConfig):
    return train_test_split(load_dataset(cfg), cfg.test_fraction, seed=derive_seed(cfg.seed, "split"))


def train_baseline(cfg: ExperimentConfig, train: LabeledDataset, seed: int) -> Mlp:
    """原始输入上的普通 MLP（对比中的 NN 模型）。"""
    preset = config.get_preset(cfg.preset, train.d)
    mlp = mlp_init(preset["baseline"], mode="classifier", seed=derive_seed(seed, "baseline"), dropout=preset["dropout"])
    optim = OptimConfig(preset["lr"], preset["weight_decay"], preset["batch_size"], preset["epochs"])
    overrides = cfg.lhtr.get("optim")
    if overrides:
        optim = OptimConfig.from_dict({**optim.to_dict(), **overrides})
    train_classifier(mlp, train.X, train.labels01, optim, seed=seed)
    return mlp


def input_extreme_mask(train: LabeledDataset, kappa: float, points: Optional[np.ndarray] = None):
    """秩变换后按范数选输入空间极值；阈值由训练集决定。"""
    rt = RankTransformer.fit(train.X)
    threshold = tail_threshold(norms(rt.transform(train.X)), kappa)
    target = train.X if points is None else points
    return norms(rt.transform(target)) >= threshold.t, threshold, rt


def _fit_lhtr(cfg: ExperimentConfig, train: LabeledDataset, mode: str, seed: int) -> LhtrModel:
    return train_lhtr(train, cfg.lhtr_config(train.d, mode), seed=seed)


def run_toy_experiment(cfg: ExperimentConfig) -> DiagnosticReport:
    """
    训练 LHTR 并输出：输入空间极值散点、隐空间极值散点、
    隐空间选出的极值在输入空间的散点、rv 检验、极值类别平衡、尺度不变条形码。
    """
    out = cfg.output
    train, test = split_dataset(cfg)
    model = _fit_lhtr(cfg, train, TWO_HEAD, cfg.seed)
    save_model(model, out / "model.json")
    t = model.require_threshold()

    report = DiagnosticReport(meta={"experiment": "toy", "seed": cfg.seed, "kappa": cfg.kappa, "preset": cfg.preset, "dataset": cfg.data_path or "gaussian_mixture"})
    artifacts: Dict[str, str] = {}

    mask_in, th_in, _ = input_extreme_mask(train, cfg.kappa)
    write_scatter_csv(out / "input_extremes.csv", train.X, train.y, mask_in)
    artifacts["input_extremes_scatter"] = "input_extremes.csv"

    Z = model.encode(train.X)
    mask_lat = norms(Z) >= t.t
    write_scatter_csv(out / "latent_extremes.csv", Z, train.y, mask_lat)
    artifacts["latent_extremes_scatter"] = "latent_extremes.csv"
    write_scatter_csv(out / "input_latent_extremes.csv", train.X, train.y, mask_lat)
    artifacts["input_latent_extremes_scatter"] = "input_latent_extremes.csv"

    latent_rv = rv_report(Z, cfg.kappa, cfg.rv_method, cfg.permutations, seed=derive_seed(cfg.seed, "latent_rv"))
    report.merge(latent_rv.to_report("latent_rv"))
    control = gen_dependent_embedding(train.n, max(2, Z.shape[1]), seed=derive_seed(cfg.seed, "control"))
    control_rv = rv_report(control.X, cfg.kappa, cfg.rv_method, cfg.permutations, seed=derive_seed(cfg.seed, "control_rv"))
    report.merge(control_rv.to_report("dependent_rv"))
    artifacts["rv_report"] = "report.json#pvalues"

    report.add_scalar("input_extreme_k", th_in.k)
    report.add_scalar("input_extreme_count", int(np.sum(mask_in)))
    report.add_scalar("input_extreme_minority", class_balance(train.y[mask_in]))
    report.add_scalar("latent_extreme_k", t.k)
    report.add_scalar("latent_extreme_count", int(np.sum(mask_lat)))
    report.add_scalar("latent_extreme_minority", class_balance(train.y[mask_lat]))
    report.add_scalar("threshold", t.t)
    artifacts["extreme_balance"] = "report.json#scalars"

    Z_test = model.encode(test.X)
    ext_test = norms(Z_test) >= t.t
    if np.any(ext_test):
        lambdas = cfg.barcode_lambdas
        report.add_scalar("cext_barcode_constancy", barcode_constancy(lambda P: predict_labels(model.c_ext, P), Z_test[ext_test], lambdas))
        baseline = train_baseline(cfg, train, cfg.seed)
        report.add_scalar("baseline_barcode_constancy", barcode_constancy(lambda P: predict_labels(baseline, P), test.X[ext_test], lambdas))
        erm = fit_tail_erm(Z[mask_lat], train.y[mask_lat], seed=derive_seed(cfg.seed, "tail_erm"))
        report.add_scalar("tail_erm_barcode_constancy", barcode_constancy(erm, Z_test[ext_test], lambdas))
        report.add_scalar("barcode_points", int(np.sum(ext_test)))
    else:
        logger.warning("测试集没有隐空间极值，跳过条形码统计")
    artifacts["scale_barcode"] = "report.json#scalars"

    for idx, row in enumerate(model.history):
        for key, value in row.items():
            report.series.setdefault(f"train_{key}", []).append([float(idx + 1), float(value)])
    report.meta["artifacts"] = artifacts

    report.write(out / "report.json")
    report.write_series_csv(out / "series")
    logger.info(f"toy 实验完成 -> {out}")
    return report


def _model_row(report: DiagnosticReport, name: str, seed: int, table: Dict[str, float], curve) -> None:
    for key in ("extreme", "bulk", "overall"):
        report.add_scalar(f"{name}_{key}_loss_seed{seed}", table[key])
    report.add_scalar(f"{name}_kappa_hat_seed{seed}", table["kappa_hat"])
    report.add_series(f"tail_curve_{name}_seed{seed}", curve.as_series())
    report.add_series(f"tail_count_{name}_seed{seed}", curve.count_series())


def run_comparison(cfg: ExperimentConfig) -> DiagnosticReport:
    """NN 基线 / LHTR₁（单头）/ LHTR（双头）在同一测试集上的尾部损失曲线与损失表。"""
    out = cfg.output
    train, test = split_dataset(cfg)
    report = DiagnosticReport(meta={"experiment": "compare", "seed": cfg.seed, "kappa": cfg.kappa, "preset": cfg.preset, "dataset": cfg.data_path or "gaussian_mixture"})
    seeds = [cfg.seed + i for i in range(cfg.comparison_seeds)]
    extreme_losses: Dict[str, List[float]] = {"nn": [], "lhtr1": [], "lhtr": []}

    for s in seeds:
        baseline = train_baseline(cfg, train, s)
        mask_nn, th_nn, rt = input_extreme_mask(train, cfg.kappa, test.X)
        nn_pred = predict_labels(baseline, test.X)
        nn_curve = tail_loss_curve(lambda X: predict_labels(baseline, X), test, norms(rt.transform(test.X)), th_nn.t, cfg.curve_lambdas)
        nn_table = loss_table(nn_pred, test.y, mask_nn)
        _model_row(report, "nn", s, nn_table, nn_curve)
        extreme_losses["nn"].append(nn_table["extreme"])

        for name, mode in (("lhtr1", SINGLE_HEAD), ("lhtr", TWO_HEAD)):
            model = _fit_lhtr(cfg, train, mode, s)
            t = model.require_threshold().t
            test_norms = model.latent_norms(test.X)
            pred = predict_combined(model, test.X)
            curve = tail_loss_curve(lambda X, m=model: predict_combined(m, X), test, test_norms, t, cfg.curve_lambdas)
            table = loss_table(pred, test.y, test_norms >= t)
            _model_row(report, name, s, table, curve)
            extreme_losses[name].append(table["extreme"])

            if mode == TWO_HEAD:
                hybrid = predict_hybrid(model, lambda X: predict_labels(baseline, X), test.X)
                hybrid_table = loss_table(hybrid, test.y, test_norms >= t)
                report.add_scalar(f"hybrid_overall_loss_seed{s}", hybrid_table["overall"])
                report.add_scalar(f"hybrid_extreme_loss_seed{s}", hybrid_table["extreme"])
                report.add_scalar(f"hybrid_bulk_loss_seed{s}", hybrid_table["bulk"])

        if s == seeds[0]:
            for name in ("nn", "lhtr1", "lhtr"):
                report.series[f"tail_curve_{name}"] = report.series[f"tail_curve_{name}_seed{s}"]

    for name, values in extreme_losses.items():
        report.add_scalar(f"{name}_extreme_loss_median", float(np.median(values)))
    report.add_scalar(
        "two_head_not_worse_than_single_head",
        float(report.scalars["lhtr_extreme_loss_median"] <= report.scalars["lhtr1_extreme_loss_median"]),
    )
    report.meta["seeds"] = seeds
    report.meta["curve_lambdas"] = list(cfg.curve_lambdas)

    report.write(out / "report.json")
    report.write_series_csv(out / "series")
    logger.info(f"对比实验完成 -> {out}")
    return report


def _trained_model(cfg: ExperimentConfig, train: LabeledDataset) -> LhtrModel:
    if cfg.model_path:
        return load_model(cfg.model_path)
    return _fit_lhtr(cfg, train, TWO_HEAD, cfg.seed)


def write_generated_csv(path: Path, rows: Sequence[Dict[str, Any]]) -> Path:
    """每行一条生成序列：源样本下标, λ, 空格分隔 token, 标签是否保持。"""
    lines = ["source,lambda,tokens,preserved"]
    for row in rows:
        tokens = " ".join(str(tok) for tok in row["tokens"])
        lines.append(f"{row['source']},{row['lambda']!r},{tokens},{int(row['preserved'])}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def uniform_nll(sequences: Sequence[Sequence[int]], vocab_size: int) -> float:
    """均匀预测下的平均序列负对数似然。"""
    return float(np.mean([len(seq) * np.log(vocab_size) for seq in sequences]))


def mean_sequence_nll(decoder, Z: np.ndarray, sequences: Sequence[Sequence[int]]) -> float:
    logits = step_logits(decoder, Z, sequences)
    return float(np.mean([sequence_nll(lg, seq, decoder.t_max) for lg, seq in zip(logits, sequences)]))


def compare_augmented_f1(
    report: DiagnosticReport,
    encoder: Mlp,
    Z_train: np.ndarray,
    X_train: np.ndarray,
    y_train: np.ndarray,
    Z_test: np.ndarray,
    y_test: np.ndarray,
    lambdas: Sequence[float],
    seed: int,
) -> Dict[str, Dict[str, float]]:
    """
    以 z 为输入的尾部分类器：只用原始极值训练 vs 加入 {λz} 后训练，
    在测试极值上比较两类各自的 F1；少数类按训练极值计。
    """
    Z_aug, y_aug = augment_latent_extremes(encoder, X_train, y_train, lambdas)
    training = {
        "raw": (Z_train, y_train),
        "augmented": (np.vstack([Z_train, Z_aug]), np.concatenate([y_train, y_aug])),
    }
    minority = "positive" if np.sum(y_train > 0) <= np.sum(y_train < 0) else "negative"
    scores: Dict[str, Dict[str, float]] = {}
    for name, (Z_fit, y_fit) in training.items():
        clf = fit_tail_erm(Z_fit, y_fit, seed=seed, angular=False)
        scores[name] = f1_by_class(clf(Z_test), y_test)
        report.add_scalar(f"f1_{name}", scores[name]["positive"])
        report.add_scalar(f"f1_{name}_negative", scores[name]["negative"])
        report.add_scalar(f"f1_{name}_macro", scores[name]["macro"])
        report.add_scalar(f"f1_{name}_minority", scores[name][minority])
        report.add_scalar(f"erm_{name}_training_size", Z_fit.shape[0])
    report.meta["f1_minority_class"] = minority
    return scores


def run_augmentation(cfg: ExperimentConfig) -> DiagnosticReport:
    """
    训练解码器，对每个训练集极值点生成 M 条 λ 缩放序列，
    报告 dist-1/dist-2、标签保持率，以及增强前后尾部 ERM 的 F1。
    """
    out = cfg.output
    train, test = split_dataset(cfg)
    model = _trained_model(cfg, train)
    t = model.require_threshold().t
    encoder = model.encoder

    corpus = gen_latent_sequences(train.X, cfg.vocab_size, cfg.t_max, seed=derive_seed(cfg.seed, "corpus"), encoder=encoder)
    save_sequences(corpus, out / "sequences.json", labels=train.y)
    optim = OptimConfig(learning_rate=cfg.decoder_learning_rate, weight_decay=0.0, batch_size=32, epochs=cfg.decoder_epochs)
    decoder = train_decoder(encoder, corpus, model.config.kappa, optim, seed=derive_seed(cfg.seed, "decoder"), rho1=model.rho1)
    save_decoder(decoder, out / "decoder.json")

    Z = model.encode(train.X)
    ext = np.flatnonzero(norms(Z) >= t)
    ext_seqs = [corpus.sequences[i] for i in ext]
    report = DiagnosticReport(meta={"experiment": "augment", "seed": cfg.seed, "kappa": cfg.kappa, "preset": cfg.preset, "dataset": cfg.data_path or "gaussian_mixture"})
    decoder_nll = mean_sequence_nll(decoder, Z[ext], ext_seqs)
    baseline_nll = uniform_nll(ext_seqs, cfg.vocab_size)
    report.add_scalar("decoder_nll", decoder_nll)
    report.add_scalar("uniform_nll", baseline_nll)
    report.add_scalar("decoder_nll_ratio", decoder_nll / baseline_nll)
    report.add_series("decoder_loss", [(i + 1, v) for i, v in enumerate(decoder.history)])

    lambdas = config.augment_lambdas(cfg.lambda_min, cfg.lambda_max, cfg.m)
    base_labels = predict_labels(model.c_ext, Z[ext])
    rows, generated = [], []
    for pos, i in enumerate(ext):
        seqs = generate_scaled(decoder, encoder, train.X[i], lambdas, threshold=t)
        scaled_labels = predict_labels(model.c_ext, np.outer(lambdas, Z[i]))
        for lam, seq, label in zip(lambdas, seqs, scaled_labels):
            rows.append({"source": int(i), "lambda": lam, "tokens": seq, "preserved": label == base_labels[pos]})
            generated.append(seq)
    write_generated_csv(out / "generated.csv", rows)

    report.add_scalar("generated_sequences", len(generated))
    report.add_scalar("dist1", distinct_n(generated, 1))
    report.add_scalar("dist2", distinct_n(generated, 2))
    report.add_scalar("label_preservation", label_preservation_audit(model.c_ext, encoder, train.X[ext], lambdas))

    lengths = corpus.lengths
    report.add_series("length_by_tail_level", [(lam, mean) for lam, mean, _ in length_by_tail_level(lengths, norms(Z), t, cfg.curve_lambdas)])
    bulk = np.setdiff1d(np.arange(train.n), ext)
    if bulk.size:
        d_stat, p_value = ks_two_sample(lengths[ext], lengths[bulk])
        report.add_scalar("length_ks_statistic", d_stat)
        report.add_scalar("length_ks_pvalue", p_value)

    Z_test = model.encode(test.X)
    ext_test = norms(Z_test) >= t
    if np.any(ext_test):
        compare_augmented_f1(report, encoder, Z[ext], train.X[ext], train.y[ext], Z_test[ext_test], test.y[ext_test], lambdas, derive_seed(cfg.seed, "tail_erm"))
    else:
        logger.warning("测试集没有隐空间极值，跳过 F1 对比")
    report.meta["lambdas"] = lambdas
    report.meta["artifacts"] = {"corpus": "sequences.json", "decoder": "decoder.json", "generated": "generated.csv"}

    report.write(out / "report.json")
    report.write_series_csv(out / "series")
    logger.info(f"增强实验完成 -> {out}")
    return report
