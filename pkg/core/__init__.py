"""核心模块 - 重尾表示学习、极值分类与诊断"""

from .errors import ConfigError, DomainError, ParseError, TailRepError
from .lhtr import LhtrConfig, LhtrModel, train_lhtr

__all__ = [
    "TailRepError",
    "DomainError",
    "ConfigError",
    "ParseError",
    "LhtrConfig",
    "LhtrModel",
    "train_lhtr",
]
