"""
MCP Resource 模块
tail:// 下的会话列表、会话信息与诊断报告
"""
from .create_resource import register_resources

__all__ = ["register_resources"]
