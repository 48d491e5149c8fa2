"""
MCP Prompt 定义
用户手动选择使用，在 cursor 中，输入/可见
返回的是提示词文本，不是执行结果
"""
from core.logger import get_logger

logger = get_logger("prompts")


def register_prompts(mcp):
    """
    注册所有 prompt 到 MCP 服务器

    Args:
        mcp: FastMCP 实例
    """

    @mcp.prompt()
    def study_tail_representation(dataset: str, question: str) -> str:
        """
        重尾表示研究 - 引导完成一次 LHTR 训练与诊断

        Args:
            dataset: 嵌入 CSV 路径，或 toy 表示生成高斯混合
            question: 想回答的问题
        """
        data_arg = "" if dataset.strip().lower() == "toy" else f', data_path="{dataset}"'
        return f"""# 重尾表示研究任务

## 问题
{question}

## 数据
{dataset}

## 步骤
1. 调用 init_tail_workflow 创建会话
2. 调用 prepare_dataset(session_id{data_arg})
3. 调用 train_representation(session_id)
4. 按问题需要调用 diagnose_rv / scale_barcode / tail_curve，可重复
5. 调用 export_report(session_id) 结束会话，并根据报告回答问题

注意：p 值集中在 0 附近说明极值样本的角度与半径相关，表示不满足正则变化。
"""

    logger.info("提示词注册完成")
