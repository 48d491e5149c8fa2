"""多元 logistic 极值模型：正稳定变量采样、logistic 采样与 c.d.f."""
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp

from core.errors import DomainError
from core.logger import get_logger
from core.rng import RngStream, as_generator

logger = get_logger("heavy_tails")

# exp 的安全指数上限
_LOG_MAX = 700.0
_TINY = 1e-300


@dataclass(frozen=True)
class LogisticParams:
    """logistic 分布参数：维度 d 与依赖参数 δ ∈ (0, 1]"""

    dimension: int
    delta: float

    def __post_init__(self):
        if int(self.dimension) != self.dimension or self.dimension < 1:
            raise DomainError(f"维度必须为正整数: {self.dimension}")
        _check_delta(self.delta)


def _check_delta(delta: float) -> None:
    if not (0.0 < delta <= 1.0) or not np.isfinite(delta):
        raise DomainError(f"依赖参数 δ 必须在 (0, 1] 内: {delta}")


def _log_positive_stable(delta: float, gen: np.random.Generator, size) -> np.ndarray:
    """
    Kanter 表示下的 log S：
        S = sin(δU) / sin(U)^{1/δ} · (sin((1-δ)U) / W)^{(1-δ)/δ}
    U ~ U(0, π)，W ~ Exp(1)，E[exp(-uS)] = exp(-u^δ)。
    """
    if delta == 1.0:
        return np.zeros(size)
    u = np.clip(gen.uniform(0.0, np.pi, size), _TINY, np.pi - 1e-12)
    w = np.maximum(gen.standard_exponential(size), _TINY)
    a = (1.0 - delta) / delta
    return (
        np.log(np.sin(delta * u))
        - np.log(np.sin(u)) / delta
        + a * (np.log(np.sin((1.0 - delta) * u)) - np.log(w))
    )


def sample_positive_stable(
    delta: float,
    rng: Union[RngStream, np.random.Generator, int],
    size: Optional[int] = None,
) -> Union[float, np.ndarray]:
    """
    正 δ-稳定变量（Laplace 变换 exp(-u^δ)）。

    δ = 1 时退化为常数 1；size 为 None 时返回单个浮点数。
    """
    _check_delta(delta)
    gen = as_generator(rng)
    n = 1 if size is None else int(size)
    log_s = _log_positive_stable(delta, gen, n)
    s = np.exp(np.minimum(log_s, _LOG_MAX))
    if size is None:
        return float(s[0])
    return s


def sample_logistic(
    params: LogisticParams,
    n: int,
    rng: Union[RngStream, np.random.Generator, int],
) -> np.ndarray:
    """
    logistic 分布采样（正稳定混合构造）。

    每行：X_j = (S / E_j)^δ，S 为一个正稳定变量，E_j 为独立单位指数变量；
    边缘为单位 Fréchet。
    """
    if n < 1:
        raise DomainError(f"样本数必须 >= 1: {n}")
    gen = as_generator(rng)
    d, delta = params.dimension, params.delta
    log_s = _log_positive_stable(delta, gen, n)
    e = np.maximum(gen.standard_exponential((n, d)), _TINY)
    log_x = delta * (log_s[:, None] - np.log(e))
    return np.exp(np.clip(log_x, -_LOG_MAX, _LOG_MAX))


def logistic_cdf(x, delta: float) -> Union[float, np.ndarray]:
    """
    F(x) = exp(-(Σ_j x_j^{-1/δ})^δ)，单位 Fréchet 边缘约定。

    x 可以是 d 维向量或 (n, d) 矩阵。
    """
    _check_delta(delta)
    arr = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError("logistic_cdf 要求所有坐标为正且有限")
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    log_sum = logsumexp(-np.log(arr) / delta, axis=1)
    value = np.exp(-np.exp(np.minimum(delta * log_sum, _LOG_MAX)))
    return float(value[0]) if single else value


def write_logistic_csv(path: Union[str, Path], samples: np.ndarray, params: LogisticParams) -> Path:
    """写出样本：首行注释 `# d=<d> delta=<δ>`，之后每行一个样本。"""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# d={params.dimension} delta={params.delta!r}"]
    for row in np.asarray(samples, dtype=float):
        lines.append(",".join(repr(float(v)) for v in row))
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"写出 logistic 样本 {len(samples)} 行 -> {out}")
    return out
