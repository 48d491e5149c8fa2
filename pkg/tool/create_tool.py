"""
MCP Tool 注册模块

- 工作流类型注册/会话管理：`workflow.registry`
- 严格步骤执行/诊断步骤插入：`workflow.engine`

该文件只保留工具本身的业务逻辑：准备数据、训练表示、三类诊断、导出报告。
"""
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from core.config import config
from core.data_io import MixtureSpec, gen_gaussian_mixture, load_embeddings
from core.diagnostics import DiagnosticReport, barcode_constancy, rv_report, tail_loss_curve
from core.evt import RankTransformer, class_balance, norms, train_test_split
from core.lhtr import TWO_HEAD, LhtrConfig, predict_combined, save_model, train_lhtr
from core.logger import get_logger
from core.nn import OptimConfig, predict_labels
from core.rng import derive_seed
from workflow.bootstrap import TAIL_STUDY, init_workflows
from workflow.engine import try_execute_step
from workflow.registry import WorkflowSession, workflow_registry

logger = get_logger("tools")


def get_workflow(session_id: str) -> tuple:
    """获取工作流会话"""
    wf = workflow_registry.get_session(session_id)
    if not wf:
        return None, format_error("会话不存在", f"session_id: {session_id}\n请先调用 init_tail_workflow")
    return wf, None


def format_success(title: str, message: str, data: dict = None, next_step: str = None) -> str:
    """格式化成功输出"""
    lines = ["═" * 45, f"📋 {title}", "═" * 45, "", f"✅ {message}", ""]

    if data:
        lines.append("📊 数据:")
        for key, value in data.items():
            if isinstance(value, list):
                if len(value) > 8:
                    display = ", ".join(str(v) for v in value[:8]) + f"... (共{len(value)}项)"
                else:
                    display = ", ".join(str(v) for v in value) if value else "无"
            elif isinstance(value, float):
                display = f"{value:.6g}"
            elif isinstance(value, dict):
                display = ", ".join(f"{k}:{v}" for k, v in list(value.items())[:5])
            else:
                display = str(value)
            lines.append(f"  • {key}: {display}")
        lines.append("")

    if next_step:
        lines.append(f"➡️ 下一步: {next_step}")
        lines.append("")

    lines.append("═" * 45)
    return "\n".join(lines)


def format_error(title: str, message: str) -> str:
    """格式化错误输出"""
    lines = ["═" * 45, f"❌ {title}", "═" * 45, ""]
    for line in message.split("\n"):
        lines.append(f"  {line}")
    lines.append("")
    lines.append("═" * 45)
    return "\n".join(lines)


def format_workflow_status(workflow: WorkflowSession) -> str:
    status = workflow.get_status()
    steps_display = "  ".join(f"[{name}]{mark}" for name, mark in status["steps"])
    return f"进度: {steps_display}"


def _parse_lambdas(text: Optional[str], default: List[float]) -> List[float]:
    if not text:
        return list(default)
    return [float(v) for v in text.split(",") if v.strip()]


def _next_hint(workflow: WorkflowSession) -> Optional[str]:
    nxt = workflow.get_current_step()
    return f"执行 {nxt.name}(session_id)" if nxt else None


def build_session_report(workflow: WorkflowSession) -> DiagnosticReport:
    """把会话中所有诊断结果汇总成一份报告。"""
    ctx = workflow.context
    report = DiagnosticReport(
        meta={
            "session_id": workflow.session_id,
            "seed": ctx.get("seed"),
            "kappa": ctx.get("kappa"),
            "preset": ctx.get("preset"),
            "dataset": ctx.get("dataset_id"),
        }
    )
    model = ctx.get("model")
    if model is not None and model.threshold is not None:
        report.add_scalar("threshold", model.threshold.t)
        report.add_scalar("rho1", model.rho1)
        report.add_scalar("rho2", model.rho2)
    for step_name, runs in workflow.results.items():
        for i, run in enumerate(runs):
            prefix = f"{step_name}_{i}_"
            partial = run.get("report")
            if partial is not None:
                report.merge(partial, prefix=prefix)
    return report


def register_tools(mcp):
    """注册所有工具"""

    @mcp.tool()
    async def init_tail_workflow(
        preset: str = "toy",
        kappa: Optional[float] = None,
        seed: Optional[int] = None,
    ) -> str:
        """
        初始化重尾表示研究工作流

        Args:
            preset: 网络结构预设（toy / small / large）
            kappa: 极值比例 κ（可选，默认 0.25）
            seed: 随机种子（可选）

        Returns:
            初始化结果和 session_id
        """
        init_workflows()
        if preset not in config.PRESETS:
            return format_error("初始化失败", f"未知预设: {preset}\n可选: {', '.join(config.PRESETS)}")
        k = config.DEFAULT_KAPPA if kappa is None else kappa
        if not 0.0 < k < 1.0:
            return format_error("初始化失败", f"κ 必须在 (0, 1) 内: {k}")

        workflow = workflow_registry.create_session(
            TAIL_STUDY,
            context={
                "preset": preset,
                "kappa": k,
                "seed": config.DEFAULT_SEED if seed is None else seed,
            },
        )
        logger.info(f"初始化工作流: {workflow.session_id} preset={preset} κ={k}")

        return format_success(
            "工作流初始化成功",
            "会话已创建",
            {
                "会话ID": workflow.session_id,
                "预设": preset,
                "κ": k,
                "步骤队列": [s.name for s in workflow.steps],
            },
            "执行 prepare_dataset(session_id) 准备数据",
        )

    @mcp.tool()
    async def prepare_dataset(
        session_id: str,
        data_path: Optional[str] = None,
        n: int = 3000,
        test_fraction: float = 0.25,
    ) -> str:
        """
        准备数据集：读取嵌入文件，或生成 toy 高斯混合

        Args:
            session_id: 会话ID
            data_path: 嵌入 CSV 路径（可选，缺省时生成 toy 数据）
            n: toy 数据样本数
            test_fraction: 测试集比例

        Returns:
            数据集概况
        """
        workflow, error = get_workflow(session_id)
        if error:
            return error

        can_execute, error = try_execute_step(workflow, "prepare_dataset")
        if not can_execute:
            return error

        ctx = workflow.context
        try:
            seed = ctx["seed"]
            if data_path:
                data = load_embeddings(data_path)
                ctx["dataset_id"] = str(Path(data_path).name)
            else:
                data = gen_gaussian_mixture(MixtureSpec(), n, seed=derive_seed(seed, "data"))
                ctx["dataset_id"] = "gaussian_mixture"
            train, test = train_test_split(data, test_fraction, seed=derive_seed(seed, "split"))
            ctx["train"], ctx["test"] = train, test

            rt = RankTransformer.fit(train.X)
            r_in = norms(rt.transform(train.X))
            k = int(np.floor(ctx["kappa"] * train.n))
            top = np.argsort(-r_in, kind="stable")[:k]

            workflow.advance()
            logger.info(f"数据准备完成: train={train.n}, test={test.n}, d={train.d}")
            return format_success(
                "数据准备完成",
                f"训练集 {train.n} / 测试集 {test.n}\n{format_workflow_status(workflow)}",
                {
                    "数据集": ctx["dataset_id"],
                    "维度": train.d,
                    "输入空间极值数": k,
                    "输入空间极值少数类占比": class_balance(train.y[top]) if k else 0.0,
                },
                _next_hint(workflow),
            )
        except Exception as e:
            logger.error(f"数据准备失败: {e}")
            return format_error("数据准备失败", str(e))

    @mcp.tool()
    async def train_representation(
        session_id: str,
        mode: str = TWO_HEAD,
        epochs: Optional[int] = None,
        rho3: Optional[float] = None,
    ) -> str:
        """
        训练 LHTR（编码器 + C^ext + C^bulk + 判别器）

        Args:
            session_id: 会话ID
            mode: two-head 或 single-head
            epochs: 覆盖预设的 epoch 数（可选）
            rho3: 覆盖预设的对抗权重 ρ3（可选）

        Returns:
            训练摘要
        """
        workflow, error = get_workflow(session_id)
        if error:
            return error

        can_execute, error = try_execute_step(workflow, "train_representation")
        if not can_execute:
            return error

        ctx = workflow.context
        train = ctx.get("train")
        if train is None:
            return format_error("训练失败", "尚未准备数据，请先执行 prepare_dataset")

        try:
            overrides = {"kappa": ctx["kappa"]}
            if rho3 is not None:
                overrides["rho3"] = rho3
            cfg = LhtrConfig.from_preset(ctx["preset"], train.d, mode=mode, **overrides)
            if epochs is not None:
                cfg.optim = OptimConfig.from_dict({**cfg.optim.to_dict(), "epochs": epochs})
            model = train_lhtr(train, cfg, seed=ctx["seed"])
            ctx["model"] = model

            Z = model.encode(train.X)
            mask = norms(Z) >= model.threshold.t
            workflow.advance()
            return format_success(
                "训练完成",
                f"LHTR ({mode}) 训练完成\n{format_workflow_status(workflow)}",
                {
                    "阈值 t": model.threshold.t,
                    "k": model.threshold.k,
                    "ρ1/ρ2/ρ3": f"{model.rho1:.4g}/{model.rho2:.4g}/{cfg.rho3:.4g}",
                    "隐空间极值少数类占比": class_balance(train.y[mask]),
                    "最后一轮损失": model.history[-1] if model.history else {},
                },
                _next_hint(workflow),
            )
        except Exception as e:
            logger.error(f"训练失败: {e}")
            return format_error("训练失败", str(e))

    @mcp.tool()
    async def diagnose_rv(
        session_id: str,
        target: str = "latent",
        method: str = "pearson",
        permutations: Optional[int] = None,
    ) -> str:
        """
        正则变化检验：极值样本上角度与半径的独立性

        Args:
            session_id: 会话ID
            target: latent（隐编码）或 input（秩变换后的输入）
            method: pearson 或 spearman
            permutations: 置换次数（可选）

        Returns:
            每个坐标的 p 值与直方图
        """
        workflow, error = get_workflow(session_id)
        if error:
            return error

        can_execute, error = try_execute_step(workflow, "diagnose_rv")
        if not can_execute:
            return error

        ctx = workflow.context
        try:
            train, model = ctx["train"], ctx["model"]
            if target == "latent":
                points = model.encode(train.X)
            elif target == "input":
                points = RankTransformer.fit(train.X).transform(train.X)
            else:
                return format_error("诊断失败", f"未知 target: {target}（latent / input）")
            seed = derive_seed(ctx["seed"], f"rv-{target}-{len(workflow.results.get('diagnose_rv', []))}")
            result = rv_report(points, ctx["kappa"], method, permutations, seed=seed)
            workflow.record("diagnose_rv", {"target": target, "report": result.to_report(f"{target}_rv")})

            workflow.advance()
            return format_success(
                "正则变化检验完成",
                f"{target} 空间，{result.n_extremes} 个极值样本\n{format_workflow_status(workflow)}",
                {
                    "p 值": [round(p, 4) if p is not None else "退化" for p in result.pvalues],
                    "中位 p 值": result.median_pvalue if result.median_pvalue is not None else "无",
                    "直方图": result.histogram,
                },
                _next_hint(workflow),
            )
        except Exception as e:
            logger.error(f"正则变化检验失败: {e}")
            return format_error("诊断失败", str(e))

    @mcp.tool()
    async def scale_barcode(session_id: str, lambdas: Optional[str] = None) -> str:
        """
        C^ext 尺度不变条形码（测试集隐空间极值点）

        Args:
            session_id: 会话ID
            lambdas: 逗号分隔的 λ 网格（可选，默认 1..20）

        Returns:
            常数条形码比例
        """
        workflow, error = get_workflow(session_id)
        if error:
            return error

        can_execute, error = try_execute_step(workflow, "scale_barcode")
        if not can_execute:
            return error

        ctx = workflow.context
        try:
            test, model = ctx["test"], ctx["model"]
            grid = _parse_lambdas(lambdas, config.BARCODE_LAMBDAS)
            Z = model.encode(test.X)
            extreme = norms(Z) >= model.threshold.t
            if not np.any(extreme):
                return format_error("条形码失败", "测试集没有隐空间极值点")
            constancy = barcode_constancy(lambda P: predict_labels(model.c_ext, P), Z[extreme], grid)
            partial = DiagnosticReport()
            partial.add_scalar("constancy", constancy)
            partial.add_scalar("points", int(np.sum(extreme)))
            workflow.record("scale_barcode", {"report": partial})

            workflow.advance()
            return format_success(
                "条形码完成",
                f"{int(np.sum(extreme))} 个极值点\n{format_workflow_status(workflow)}",
                {"常数条形码比例": constancy, "λ 网格": grid},
                _next_hint(workflow),
            )
        except Exception as e:
            logger.error(f"条形码失败: {e}")
            return format_error("条形码失败", str(e))

    @mcp.tool()
    async def tail_curve(session_id: str, lambdas: Optional[str] = None) -> str:
        """
        嵌套尾部损失曲线（测试集）

        Args:
            session_id: 会话ID
            lambdas: 逗号分隔的 λ 网格（可选）

        Returns:
            每个 λ 的 0/1 损失
        """
        workflow, error = get_workflow(session_id)
        if error:
            return error

        can_execute, error = try_execute_step(workflow, "tail_curve")
        if not can_execute:
            return error

        ctx = workflow.context
        try:
            test, model = ctx["test"], ctx["model"]
            grid = _parse_lambdas(lambdas, [1.0, 1.25, 1.5, 2.0, 3.0])
            curve = tail_loss_curve(
                lambda X: predict_combined(model, X),
                test,
                model.latent_norms(test.X),
                model.threshold.t,
                grid,
            )
            partial = DiagnosticReport()
            partial.add_series("curve", curve.as_series())
            partial.add_series("counts", curve.count_series())
            workflow.record("tail_curve", {"report": partial})

            workflow.advance()
            return format_success(
                "尾部损失曲线完成",
                f"{len(curve.lambdas)} 个 λ 点\n{format_workflow_status(workflow)}",
                {
                    "λ": curve.lambdas,
                    "损失": [round(v, 4) for v in curve.losses],
                    "样本数": curve.counts,
                },
                _next_hint(workflow),
            )
        except Exception as e:
            logger.error(f"尾部损失曲线失败: {e}")
            return format_error("尾部损失曲线失败", str(e))

    @mcp.tool()
    async def export_report(session_id: str, out_dir: Optional[str] = None) -> str:
        """
        汇总诊断结果并导出报告（结束工作流）

        Args:
            session_id: 会话ID
            out_dir: 输出目录（可选，给定时写 report.json 与 model.json）

        Returns:
            报告摘要
        """
        workflow, error = get_workflow(session_id)
        if error:
            return error

        can_execute, error = try_execute_step(workflow, "export_report")
        if not can_execute:
            return error

        ctx = workflow.context
        try:
            report = build_session_report(workflow)
            ctx["report"] = report
            written: Dict[str, str] = {}
            if out_dir:
                written["report"] = str(report.write(Path(out_dir) / "report.json"))
                written["model"] = str(save_model(ctx["model"], Path(out_dir) / "model.json"))

            workflow.advance()
            return format_success(
                "报告已导出",
                f"工作流已完成\n{format_workflow_status(workflow)}",
                {
                    "标量": len(report.scalars),
                    "序列": list(report.series),
                    "p 值数组": list(report.pvalues),
                    "文件": written or "未写盘",
                },
            )
        except Exception as e:
            logger.error(f"导出失败: {e}")
            return format_error("导出失败", str(e))

    @mcp.tool()
    async def get_workflow_status(session_id: str) -> str:
        """获取工作流状态"""
        workflow, error = get_workflow(session_id)
        if error:
            return error

        status = workflow.get_status()
        lines = [
            "═" * 45,
            "📊 工作流状态",
            "═" * 45,
            "",
            f"会话ID: {session_id}",
            f"当前步骤: {status['current_step'] or '已完成'}",
            f"进度: {status['current_index']}/{status['total_steps']}",
            f"数据: {'已准备' if status['dataset_ready'] else '未准备'}",
            f"模型: {'已训练' if status['model_trained'] else '未训练'}",
            "",
            "步骤队列:",
        ]
        for i, (name, mark) in enumerate(status["steps"]):
            indicator = "→" if i == workflow.current_index else " "
            lines.append(f"  {indicator} {i + 1}. [{name}] {mark}")
        lines.extend(["", "═" * 45])
        return "\n".join(lines)

    @mcp.tool()
    async def list_sessions() -> str:
        """列出所有会话"""
        sessions = workflow_registry.list_sessions()
        if not sessions:
            return "📭 没有活跃会话\n\n使用 init_tail_workflow 创建"

        lines = ["═" * 45, "📋 活跃会话", "═" * 45, ""]
        for wf in sessions:
            current = wf.get_current_step()
            lines.append(f"🔹 {wf.session_id}")
            lines.append(f"   当前: {current.name if current else '已完成'}")
            lines.append(f"   进度: {wf.current_index}/{len(wf.steps)}")
            lines.append("")
        lines.append("═" * 45)
        return "\n".join(lines)

    logger.info("工具注册完成")
