"""
工作流引擎：严格按步骤执行

- REQUIRED / FINAL 步骤不可跳过，必须从 current_step 开始推进
- 诊断步骤（REPEATABLE）在模型训练完成后可随时插入到当前位置执行
"""

from __future__ import annotations

from typing import Optional, Tuple

from workflow.registry import Step, StepType, WorkflowSession, get_step_type


def try_execute_step(session: WorkflowSession, step_name: str) -> Tuple[bool, Optional[str]]:
    """
    顺序校验，必要时插入可重复步骤。

    Returns:
        (can_execute, error_message)
    """
    if session.is_completed():
        return False, format_engine_error(
            "工作流已完成",
            "报告已导出\n如需继续研究，请创建新会话",
        )

    step_type = get_step_type(step_name)
    if step_type is None:
        return False, format_engine_error("未知步骤", f"步骤 {step_name} 未注册")

    current = session.get_current_step()
    if current and current.inserted and current.name != step_name:
        # 插入后没有执行成功的诊断步骤，直接丢弃
        session.steps.pop(session.current_index)
        return try_execute_step(session, step_name)

    if current and current.name == step_name:
        if step_type == StepType.REPEATABLE and not session.has_model():
            return False, format_engine_error(f"无法执行 {step_name}", "请先完成 train_representation 步骤")
        return True, None

    if step_type == StepType.REPEATABLE:
        # 诊断依赖训练好的表示
        if not session.has_model():
            return False, format_engine_error(
                f"无法执行 {step_name}",
                "请先完成 prepare_dataset 与 train_representation 步骤",
            )
        session.insert_step(Step(name=step_name, step_type=StepType.REPEATABLE, inserted=True))
        return True, None

    return False, format_engine_error(
        "步骤顺序错误",
        f"当前应执行: {current.name if current else 'None'}\n尝试执行: {step_name}\n\n请按顺序执行步骤",
    )


def format_engine_error(title: str, message: str) -> str:
    # 不依赖 tool 层的格式化函数，避免循环依赖
    lines = ["═" * 45, f"❌ {title}", "═" * 45, ""]
    lines.extend(f"  {line}" for line in message.split("\n"))
    lines.extend(["", "═" * 45])
    return "\n".join(lines)
