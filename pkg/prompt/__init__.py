"""
MCP Prompt 模块
引导一次完整的重尾表示研究
"""
from .create_prompt import register_prompts

__all__ = ["register_prompts"]
