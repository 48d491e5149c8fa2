"""
TailRepAssistant - MCP 重尾表示学习助手

会话工作流：准备数据 -> 训练 LHTR -> 诊断（可重复）-> 导出报告
"""
from mcp.server.fastmcp import FastMCP

from core.config import config
from core.logger import logger
from prompt.create_prompt import register_prompts
from resource.create_resource import register_resources
from tool.create_tool import register_tools
from workflow.bootstrap import init_workflows


def create_server() -> FastMCP:
    mcp = FastMCP(config.SERVER_NAME, json_response=True)
    init_workflows()
    register_tools(mcp)
    register_resources(mcp)
    register_prompts(mcp)
    logger.info(f"MCP 服务器 '{config.SERVER_NAME}' 初始化完成")
    return mcp


mcp = create_server()


if __name__ == "__main__":
    mcp.run()
