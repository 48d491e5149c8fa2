"""
MCP Resource 定义
提供会话状态与诊断报告的只读视图
"""
import json

from core.logger import get_logger
from workflow.registry import WorkflowSession, workflow_registry

logger = get_logger("resources")


def _session_summary(wf: WorkflowSession) -> dict:
    ctx = wf.context
    train, test, model = ctx.get("train"), ctx.get("test"), ctx.get("model")
    return {
        "session_id": wf.session_id,
        "preset": ctx.get("preset"),
        "kappa": ctx.get("kappa"),
        "dataset": ctx.get("dataset_id"),
        "n_train": train.n if train is not None else 0,
        "n_test": test.n if test is not None else 0,
        "trained": model is not None,
    }


def register_resources(mcp):
    """注册所有 resource 到 MCP 服务器"""

    @mcp.resource("tail://sessions")
    def list_all_sessions() -> str:
        """获取所有活跃会话列表"""
        session_list = [_session_summary(wf) for wf in workflow_registry.list_sessions()]
        return json.dumps(session_list, ensure_ascii=False, indent=2)

    @mcp.resource("tail://session/{session_id}/info")
    def get_session_info(session_id: str) -> str:
        """获取会话详情"""
        wf = workflow_registry.get_session(session_id)
        if not wf:
            return json.dumps({"error": f"会话不存在: {session_id}"}, ensure_ascii=False)

        info = _session_summary(wf)
        model = wf.context.get("model")
        info.update(
            {
                "workflow_type": wf.workflow_type,
                "status": wf.get_status(),
                "mode": model.config.mode if model is not None else None,
                "threshold": model.threshold.to_dict() if model is not None and model.threshold else None,
                "rho": [model.rho1, model.rho2, model.config.rho3] if model is not None else None,
            }
        )
        return json.dumps(info, ensure_ascii=False, indent=2)

    @mcp.resource("tail://session/{session_id}/report")
    def get_session_report(session_id: str) -> str:
        """获取会话导出的诊断报告"""
        wf = workflow_registry.get_session(session_id)
        if not wf:
            return json.dumps({"error": "会话不存在"}, ensure_ascii=False)

        report = wf.context.get("report")
        if report is None:
            return json.dumps({"error": "请先执行 export_report"}, ensure_ascii=False)
        return report.to_json()

    @mcp.resource("tail://help")
    def get_help() -> str:
        """获取使用帮助"""
        return """
# TailRepAssistant 使用指南

## 工具列表

1. `init_tail_workflow(preset, kappa, seed)` - 初始化会话
2. `prepare_dataset(session_id, data_path)` - 读取嵌入或生成 toy 数据
3. `train_representation(session_id, mode)` - 训练 LHTR（two-head / single-head）
4. `diagnose_rv(session_id, target, method)` - 正则变化检验（可重复）
5. `scale_barcode(session_id, lambdas)` - C^ext 尺度不变条形码（可重复）
6. `tail_curve(session_id, lambdas)` - 嵌套尾部损失曲线（可重复）
7. `export_report(session_id, out_dir)` - 汇总并导出报告

## 典型流程

1. init_tail_workflow -> 获取 session_id
2. prepare_dataset -> train_representation
3. 任意次 diagnose_rv / scale_barcode / tail_curve
4. export_report -> 结束会话

## 资源

- `tail://sessions` - 会话列表
- `tail://session/{id}/info` - 会话信息
- `tail://session/{id}/report` - 诊断报告 JSON
"""

    logger.info("资源注册完成")
