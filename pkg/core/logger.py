"""日志系统模块"""
import logging
import sys
from typing import Mapping, Optional

from core.config import config

ROOT_NAME = "hana-tailrep"


def setup_logger(
    name: str = ROOT_NAME,
    level: Optional[str] = None,
    log_file: Optional[str] = None,
) -> logging.Logger:
    """根 logger：stderr + 可选文件；子模块通过 get_logger 继承其 handler。"""
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger

    log_level = getattr(logging, (level or config.LOG_LEVEL).upper(), logging.INFO)
    logger.setLevel(log_level)
    formatter = logging.Formatter(config.LOG_FORMAT)

    # stdout 留给 MCP stdio 协议与 CLI 结果 JSON
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(formatter)
    logger.addHandler(console)

    file_path = log_file or config.LOG_FILE
    if file_path:
        file_handler = logging.FileHandler(file_path, encoding="utf-8")
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


logger = setup_logger()


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(f"{ROOT_NAME}.{name}")


def format_metrics(metrics: Mapping[str, float], digits: int = 4) -> str:
    return " ".join(f"{key}={value:.{digits}f}" for key, value in metrics.items())


def log_epoch(
    log: logging.Logger,
    label: str,
    epoch: int,
    total: int,
    metrics: Mapping[str, float],
    every: int = 10,
) -> None:
    """
    训练进度：每 every 个 epoch 及最后一个 epoch 记 INFO，其余记 DEBUG。

    epoch 从 1 开始计数。
    """
    level = logging.INFO if epoch % every == 0 or epoch == total else logging.DEBUG
    if log.isEnabledFor(level):
        log.log(level, f"{label} epoch {epoch}/{total} {format_metrics(metrics)}")
