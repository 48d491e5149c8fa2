"""
工作流注册入口

只负责把内置工作流类型注册到 workflow_registry；可重复调用。
"""

from __future__ import annotations

from workflow.registry import WorkflowDefinition, workflow_registry

TAIL_STUDY = "tail_study"


def init_workflows() -> None:
    """注册内置工作流类型（幂等）"""
    workflow_registry.register(
        WorkflowDefinition(
            workflow_type=TAIL_STUDY,
            name="重尾表示研究",
            description="准备数据 -> 训练 LHTR -> 正则变化/条形码/尾部曲线诊断（可重复）-> 导出报告",
            steps=[
                "prepare_dataset",
                "train_representation",
                "diagnose_rv",
                "export_report",
            ],
        )
    )
