"""
命令行入口：hana-tailrep <子命令> [--seed N] [--out-dir DIR] [--config JSON]

成功时 stdout 输出结果 JSON、退出码 0；失败时 stderr 与 <out-dir>/error.json
输出错误 JSON、退出码 1。每次运行都写 manifest.json。
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from cli.experiments import (
    ExperimentConfig,
    run_augmentation,
    run_comparison,
    run_toy_experiment,
    write_generated_csv,
    write_manifest,
)
from core.augment import generate_scaled, load_decoder, save_decoder, train_decoder
from core.config import config
from core.data_io import (
    MixtureSpec,
    gen_dependent_embedding,
    gen_gaussian_mixture,
    gen_latent_sequences,
    load_embeddings,
    load_sequences,
    save_embeddings,
    save_sequences,
)
from core.diagnostics import DiagnosticReport, barcode_constancy, rv_report, scale_barcode, tail_loss_curve
from core.errors import TailRepError
from core.evt import norms
from core.heavy_tails import LogisticParams, sample_logistic, write_logistic_csv
from core.lhtr import TWO_HEAD, load_model, predict_combined, save_model, train_lhtr
from core.logger import get_logger
from core.nn import OptimConfig, predict_labels
from core.rng import RngStream

logger = get_logger("cli")


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {"seed": args.seed, "out_dir": args.out_dir}
    if args.config:
        return ExperimentConfig.from_json(args.config, **overrides)
    return ExperimentConfig(**overrides)


def _out_path(args: argparse.Namespace, name: str) -> Path:
    path = Path(name)
    if not path.is_absolute():
        path = Path(args.out_dir) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _lambdas(text: Optional[str], default: List[float]) -> List[float]:
    if not text:
        return list(default)
    return [float(v) for v in text.split(",") if v.strip()]


# ---------- 子命令 ----------
def cmd_sample_logistic(args) -> Dict[str, Any]:
    params = LogisticParams(dimension=args.d, delta=args.delta)
    samples = sample_logistic(params, args.n, RngStream(args.seed))
    path = write_logistic_csv(_out_path(args, args.out), samples, params)
    return {"samples": str(path), "n": args.n}


def cmd_gen_toy(args) -> Dict[str, Any]:
    cfg = _experiment_config(args)
    spec = MixtureSpec.from_dict(cfg.mixture) if cfg.mixture else MixtureSpec()
    data = gen_gaussian_mixture(spec, args.n, seed=args.seed)
    return {"data": str(save_embeddings(data, _out_path(args, args.out))), "n": data.n}


def cmd_gen_dependent(args) -> Dict[str, Any]:
    data = gen_dependent_embedding(args.n, args.d, seed=args.seed)
    return {"data": str(save_embeddings(data, _out_path(args, args.out))), "n": data.n}


def cmd_gen_seqs(args) -> Dict[str, Any]:
    data = load_embeddings(args.data)
    encoder = load_model(args.model).encoder if args.model else None
    corpus = gen_latent_sequences(data.X, args.vocab, args.t_max, seed=args.seed, encoder=encoder)
    path = save_sequences(corpus, _out_path(args, args.out), labels=data.y)
    return {"sequences": str(path), "n": corpus.n}


def cmd_train_lhtr(args) -> Dict[str, Any]:
    cfg = _experiment_config(args)
    data = load_embeddings(args.data)
    model = train_lhtr(data, cfg.lhtr_config(data.d, args.mode or TWO_HEAD), seed=args.seed)
    path = save_model(model, _out_path(args, args.out))
    threshold = model.require_threshold()
    return {"model": str(path), "threshold": threshold.t, "k": threshold.k, "rho1": model.rho1, "rho2": model.rho2}


def _report_meta(args, command: str, cfg: ExperimentConfig) -> Dict[str, Any]:
    return {"command": command, "seed": args.seed, "kappa": cfg.kappa, "dataset": args.data}


def cmd_diagnose_rv(args) -> Dict[str, Any]:
    cfg = _experiment_config(args)
    data = load_embeddings(args.data)
    points = load_model(args.model).encode(data.X) if args.model else data.X
    result = rv_report(points, cfg.kappa, args.method, cfg.permutations, seed=args.seed)
    report = DiagnosticReport(meta=_report_meta(args, "diagnose-rv", cfg))
    report.merge(result.to_report("rv"))
    path = report.write(_out_path(args, args.out))
    report.write_series_csv(path.parent / "series")
    return {"report": str(path), "median_pvalue": result.median_pvalue, "degenerate": result.degenerate}


def cmd_barcode(args) -> Dict[str, Any]:
    cfg = _experiment_config(args)
    model = load_model(args.model)
    data = load_embeddings(args.data)
    lambdas = _lambdas(args.lambdas, cfg.barcode_lambdas)
    Z = model.encode(data.X)
    extreme = norms(Z) >= model.require_threshold().t
    if not np.any(extreme):
        raise TailRepError("数据中没有隐空间极值点")

    def classify(points):
        return predict_labels(model.c_ext, points)

    report = DiagnosticReport(meta=_report_meta(args, "barcode", cfg))
    report.meta["lambdas"] = lambdas
    report.meta["barcodes"] = {int(i): scale_barcode(classify, Z[i], lambdas) for i in np.flatnonzero(extreme)}
    report.add_scalar("barcode_constancy", barcode_constancy(classify, Z[extreme], lambdas))
    report.add_scalar("barcode_points", int(np.sum(extreme)))
    path = report.write(_out_path(args, args.out))
    return {"report": str(path), "constancy": report.scalars["barcode_constancy"]}


def cmd_tail_curve(args) -> Dict[str, Any]:
    cfg = _experiment_config(args)
    model = load_model(args.model)
    data = load_embeddings(args.data)
    lambdas = _lambdas(args.lambdas, cfg.curve_lambdas)
    curve = tail_loss_curve(
        lambda X: predict_combined(model, X),
        data,
        model.latent_norms(data.X),
        model.require_threshold().t,
        lambdas,
    )
    report = DiagnosticReport(meta=_report_meta(args, "tail-curve", cfg))
    report.add_series("tail_curve", curve.as_series())
    report.add_series("tail_count", curve.count_series())
    path = report.write(_out_path(args, args.out))
    report.write_series_csv(path.parent / "series")
    return {"report": str(path), "points": len(curve.lambdas)}


def cmd_train_decoder(args) -> Dict[str, Any]:
    cfg = _experiment_config(args)
    model = load_model(args.model)
    corpus = load_sequences(args.data)["data"]
    optim = OptimConfig(learning_rate=cfg.decoder_learning_rate, weight_decay=0.0, batch_size=32, epochs=cfg.decoder_epochs)
    decoder = train_decoder(model.encoder, corpus, model.config.kappa, optim, seed=args.seed, rho1=model.rho1)
    path = save_decoder(decoder, _out_path(args, args.out))
    return {"decoder": str(path), "final_loss": decoder.history[-1] if decoder.history else None}


def cmd_augment(args) -> Dict[str, Any]:
    model = load_model(args.model)
    decoder = load_decoder(args.decoder)
    corpus = load_sequences(args.data)["data"]
    lambdas = config.augment_lambdas(args.lambda_min, args.lambda_max, args.m)
    t = model.require_threshold().t
    Z = model.encode(corpus.X)
    rows = []
    for i in np.flatnonzero(norms(Z) >= t):
        base = predict_labels(model.c_ext, Z[i][None, :])[0]
        scaled = predict_labels(model.c_ext, np.outer(lambdas, Z[i]))
        for lam, seq, label in zip(lambdas, generate_scaled(decoder, model.encoder, corpus.X[i], lambdas, threshold=t), scaled):
            rows.append({"source": int(i), "lambda": lam, "tokens": seq, "preserved": label == base})
    path = write_generated_csv(_out_path(args, args.out), rows)
    return {"generated": str(path), "rows": len(rows)}


def _experiment(runner: Callable[[ExperimentConfig], DiagnosticReport]) -> Callable[[argparse.Namespace], Dict[str, Any]]:
    def command(args) -> Dict[str, Any]:
        report = runner(_experiment_config(args))
        return {"report": str(Path(args.out_dir) / "report.json"), "scalars": report.scalars}

    return command


COMMANDS: Dict[str, Callable[[argparse.Namespace], Dict[str, Any]]] = {
    "sample-logistic": cmd_sample_logistic,
    "gen-toy": cmd_gen_toy,
    "gen-dependent": cmd_gen_dependent,
    "gen-seqs": cmd_gen_seqs,
    "train-lhtr": cmd_train_lhtr,
    "diagnose-rv": cmd_diagnose_rv,
    "barcode": cmd_barcode,
    "tail-curve": cmd_tail_curve,
    "train-decoder": cmd_train_decoder,
    "augment": cmd_augment,
    "toy-experiment": _experiment(run_toy_experiment),
    "compare": _experiment(run_comparison),
    "augment-experiment": _experiment(run_augmentation),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=config.DEFAULT_SEED, help="全部随机性的来源")
    common.add_argument("--out-dir", default="runs", help="输出目录")
    common.add_argument("--config", default=None, help="实验配置 JSON")

    parser = argparse.ArgumentParser(prog="hana-tailrep", description="重尾表示学习与极值分类实验")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample-logistic", parents=[common], help="logistic 分布采样")
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--delta", type=float, default=0.9)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--out", default="logistic.csv")

    p = sub.add_parser("gen-toy", parents=[common], help="toy 高斯混合数据")
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--out", default="toy.csv")

    p = sub.add_parser("gen-dependent", parents=[common], help="角度随半径旋转的对照数据")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--out", default="dependent.csv")

    p = sub.add_parser("gen-seqs", parents=[common], help="由隐编码生成序列语料")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--vocab", type=int, default=12)
    p.add_argument("--t-max", type=int, default=6)
    p.add_argument("--out", default="sequences.json")

    p = sub.add_parser("train-lhtr", parents=[common], help="训练 LHTR")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["two-head", "single-head"], default=None)
    p.add_argument("--out", default="model.json")

    p = sub.add_parser("diagnose-rv", parents=[common], help="正则变化检验")
    p.add_argument("--data", required=True)
    p.add_argument("--model", default=None, help="给定时先编码到隐空间")
    p.add_argument("--method", choices=["pearson", "spearman"], default="pearson")
    p.add_argument("--out", default="rv_report.json")

    p = sub.add_parser("barcode", parents=[common], help="C^ext 尺度不变条形码")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lambdas", default=None, help="逗号分隔，默认 1..20")
    p.add_argument("--out", default="barcode.json")

    p = sub.add_parser("tail-curve", parents=[common], help="嵌套尾部损失曲线")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lambdas", default=None)
    p.add_argument("--out", default="tail_curve.json")

    p = sub.add_parser("train-decoder", parents=[common], help="在极值隐编码上训练解码器")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="序列语料 JSON")
    p.add_argument("--out", default="decoder.json")

    p = sub.add_parser("augment", parents=[common], help="λ 缩放生成")
    p.add_argument("--model", required=True)
    p.add_argument("--decoder", required=True)
    p.add_argument("--data", required=True, help="序列语料 JSON")
    p.add_argument("--lambda-min", type=float, default=config.AUGMENT_LAMBDA_MIN)
    p.add_argument("--lambda-max", type=float, default=config.AUGMENT_LAMBDA_MAX)
    p.add_argument("--m", type=int, default=config.AUGMENT_M)
    p.add_argument("--out", default="generated.csv")

    sub.add_parser("toy-experiment", parents=[common], help="toy 实验")
    sub.add_parser("compare", parents=[common], help="NN / LHTR₁ / LHTR 对比")
    sub.add_parser("augment-experiment", parents=[common], help="极值区域增强实验")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out_dir = Path(args.out_dir)
    arguments = {k: v for k, v in vars(args).items() if k != "command"}
    try:
        result = COMMANDS[args.command](args)
        write_manifest(out_dir, args.command, arguments, args.seed)
    except (TailRepError, ValueError, OSError, KeyError) as e:
        error = {"status": "error", "command": args.command, "error": type(e).__name__, "message": str(e)}
        logger.error(f"{args.command} 失败: {e}")
        text = json.dumps(error, ensure_ascii=False)
        print(text, file=sys.stderr)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "error.json").write_text(text + "\n", encoding="utf-8")
        except OSError:
            pass
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **result}, ensure_ascii=False, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
