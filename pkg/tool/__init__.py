"""
MCP Tool 模块
tail_study 工作流的各个步骤
"""
from .create_tool import register_tools

__all__ = ["register_tools"]
