"""异常定义"""
from typing import Optional


class TailRepError(Exception):
    """项目异常基类"""


class DomainError(TailRepError, ValueError):
    """参数越界 / 前置条件不满足"""


class ConfigError(DomainError):
    """配置错误（未知字段、非法取值）"""


class ParseError(DomainError):
    """文件解析错误，携带出错行号"""

    def __init__(self, message: str, line_no: Optional[int] = None, path: Optional[str] = None):
        self.line_no = line_no
        self.path = path
        where = ""
        if path:
            where = f"{path}:"
        if line_no is not None:
            where = f"{where}{line_no}: "
        elif where:
            where = f"{where} "
        super().__init__(f"{where}{message}")
