"""
统计诊断：正则变化检验、尺度不变条形码、嵌套尾部损失曲线、多样性与 F1

所有 p 值都是带种子的置换检验。
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import ks_2samp, rankdata

from core.config import config
from core.errors import DomainError, ParseError
from core.evt import LabeledDataset, angular_projection, empirical_tail_risk, nested_tail_subset, norms, tail_count
from core.logger import get_logger
from core.rng import RngStream, derive_seed

logger = get_logger("diagnostics")

CORR_METHODS = ("pearson", "spearman")

# 一次置换的行数上限（控制内存）
_PERM_CHUNK = 200


# ---------- 报告 ----------
@dataclass
class DiagnosticReport:
    """标量 / 序列 / p 值数组 + 元数据；JSON 往返无损"""

    meta: Dict[str, Any] = field(default_factory=dict)
    scalars: Dict[str, float] = field(default_factory=dict)
    series: Dict[str, List[List[float]]] = field(default_factory=dict)
    pvalues: Dict[str, List[float]] = field(default_factory=dict)

    def add_scalar(self, name: str, value: float) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise DomainError(f"标量 {name} 不是有限值: {value}")
        self.scalars[name] = value

    def add_series(self, name: str, points: Sequence[Tuple[float, float]]) -> None:
        rows = [[float(x), float(y)] for x, y in points]
        if not all(math.isfinite(v) for row in rows for v in row):
            raise DomainError(f"序列 {name} 含非有限值")
        self.series[name] = rows

    def add_pvalues(self, name: str, values: Sequence[float]) -> None:
        arr = [float(v) for v in values]
        if not all(math.isfinite(v) for v in arr):
            raise DomainError(f"p 值数组 {name} 含非有限值")
        self.pvalues[name] = arr

    def merge(self, other: "DiagnosticReport", prefix: str = "") -> None:
        for name, value in other.scalars.items():
            self.scalars[prefix + name] = value
        for name, rows in other.series.items():
            self.series[prefix + name] = rows
        for name, values in other.pvalues.items():
            self.pvalues[prefix + name] = values

    def to_dict(self) -> dict:
        return {"meta": self.meta, "scalars": self.scalars, "series": self.series, "pvalues": self.pvalues}

    def to_json(self) -> str:
        # repr(float) 为最短往返表示，不丢精度
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "DiagnosticReport":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"报告 JSON 解析失败: {e.msg}", line_no=e.lineno) from e
        return cls(
            meta=dict(data.get("meta", {})),
            scalars={k: float(v) for k, v in data.get("scalars", {}).items()},
            series={k: [[float(x), float(y)] for x, y in v] for k, v in data.get("series", {}).items()},
            pvalues={k: [float(p) for p in v] for k, v in data.get("pvalues", {}).items()},
        )

    def write(self, path: Union[str, Path]) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(self.to_json() + "\n", encoding="utf-8")
        return out

    def write_series_csv(self, out_dir: Union[str, Path]) -> List[Path]:
        """每个序列一个 CSV（x,y）。"""
        directory = Path(out_dir)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name in sorted(self.series):
            path = directory / f"{name}.csv"
            lines = ["x,y"] + [f"{x!r},{y!r}" for x, y in self.series[name]]
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append(path)
        return written


# ---------- 相关性 ----------
def _paired(a, b) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a, dtype=float).reshape(-1)
    y = np.asarray(b, dtype=float).reshape(-1)
    if x.size != y.size:
        raise DomainError(f"长度不一致: {x.size} vs {y.size}")
    if x.size < 3:
        raise DomainError(f"相关性至少需要 3 个样本: {x.size}")
    return x, y


def _standardize(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean()
    scale = np.sqrt(np.dot(centered, centered))
    if scale == 0.0 or not np.isfinite(scale):
        raise DomainError("方差为零，相关系数无定义")
    return centered / scale


def pearson_corr(a, b) -> float:
    x, y = _paired(a, b)
    r = float(np.dot(_standardize(x), _standardize(y)))
    return min(1.0, max(-1.0, r))


def spearman_corr(a, b) -> float:
    x, y = _paired(a, b)
    return pearson_corr(rankdata(x), rankdata(y))


def corr_pvalue(
    a,
    b,
    method: str = "pearson",
    permutations: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    双侧置换检验：p = (1 + #{|r_π| ≥ |r|}) / (P + 1)

    spearman 先对两个输入取秩，再做同样的检验。
    """
    if method not in CORR_METHODS:
        raise DomainError(f"未知相关方法: {method}（可选: {', '.join(CORR_METHODS)}）")
    x, y = _paired(a, b)
    if method == "spearman":
        x, y = rankdata(x), rankdata(y)
    xs, ys = _standardize(x), _standardize(y)
    observed = abs(float(np.dot(xs, ys)))
    n_perm = config.DEFAULT_PERMUTATIONS if permutations is None else int(permutations)
    if n_perm < 1:
        raise DomainError(f"置换次数必须 >= 1: {n_perm}")

    gen = RngStream(seed).generator
    hits = 0
    done = 0
    while done < n_perm:
        rows = min(_PERM_CHUNK, n_perm - done)
        shuffled = gen.permuted(np.tile(ys, (rows, 1)), axis=1)
        stats = np.abs(shuffled @ xs)
        hits += int(np.count_nonzero(stats >= observed - 1e-12))
        done += rows
    return (hits + 1) / (n_perm + 1)


@dataclass
class RvReport:
    """极值样本上 Θ_j 与 ‖x‖ 的独立性检验结果"""

    pvalues: List[Optional[float]]
    degenerate: List[int]
    histogram: List[int]
    n_extremes: int
    method: str

    @property
    def valid_pvalues(self) -> List[float]:
        return [p for p in self.pvalues if p is not None]

    @property
    def median_pvalue(self) -> Optional[float]:
        valid = self.valid_pvalues
        return float(np.median(valid)) if valid else None

    def to_report(self, prefix: str = "rv") -> DiagnosticReport:
        report = DiagnosticReport()
        report.add_pvalues(f"{prefix}_pvalues", self.valid_pvalues)
        edges = np.linspace(0.0, 1.0, len(self.histogram) + 1)
        report.add_series(f"{prefix}_histogram", list(zip(edges[:-1], self.histogram)))
        report.add_scalar(f"{prefix}_n_extremes", self.n_extremes)
        report.add_scalar(f"{prefix}_degenerate_coordinates", len(self.degenerate))
        if self.median_pvalue is not None:
            report.add_scalar(f"{prefix}_median_pvalue", self.median_pvalue)
        return report


def pvalue_histogram(pvalues: Sequence[float], bins: Optional[int] = None) -> List[int]:
    counts, _ = np.histogram(np.asarray(pvalues, dtype=float), bins=bins or config.HISTOGRAM_BINS, range=(0.0, 1.0))
    return [int(c) for c in counts]


def rv_report(
    points: np.ndarray,
    kappa: float,
    method: str = "pearson",
    permutations: Optional[int] = None,
    seed: int = 0,
) -> RvReport:
    """
    取范数最大的 ⌊κn⌋ 个点，对每个坐标检验 Θ_j 与 ‖x‖ 的相关性。

    方差为零的坐标记为退化，不参与中位数与直方图。
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    k = tail_count(X.shape[0], kappa)
    if k < config.MIN_RV_EXTREMES:
        raise DomainError(f"极值样本过少: ⌊κn⌋={k} < {config.MIN_RV_EXTREMES}")
    r = norms(X)
    top = np.argsort(-r, kind="stable")[:k]
    radius = r[top]
    theta = angular_projection(X[top])

    pvalues: List[Optional[float]] = []
    degenerate: List[int] = []
    for j in range(theta.shape[1]):
        try:
            p = corr_pvalue(theta[:, j], radius, method, permutations, seed=derive_seed(seed, f"coord{j}"))
        except DomainError as e:
            logger.warning(f"坐标 {j} 退化: {e}")
            degenerate.append(j)
            pvalues.append(None)
            continue
        pvalues.append(p)

    valid = [p for p in pvalues if p is not None]
    result = RvReport(
        pvalues=pvalues,
        degenerate=degenerate,
        histogram=pvalue_histogram(valid),
        n_extremes=k,
        method=method,
    )
    logger.info(f"rv_report: k={k}, 有效坐标 {len(valid)}/{theta.shape[1]}, 中位 p={result.median_pvalue}")
    return result


def correlation_matrix(
    variables: Mapping[str, Sequence[float]],
    permutations: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, Any]:
    """
    两两 Pearson 系数与置换 p 值，对角线为 1。

    方差为零的列被标记，其非对角元素为 None。
    """
    names = list(variables)
    columns = [np.asarray(variables[name], dtype=float).reshape(-1) for name in names]
    if not columns:
        raise DomainError("没有变量")
    n = columns[0].size
    if n < 3 or any(c.size != n for c in columns):
        raise DomainError("所有变量长度必须相同且 >= 3")

    flagged = [name for name, c in zip(names, columns) if np.ptp(c) == 0.0]
    for name in flagged:
        logger.warning(f"变量 {name} 方差为零，已标记")
    size = len(names)
    coeffs: List[List[Optional[float]]] = [[None] * size for _ in range(size)]
    pvals: List[List[Optional[float]]] = [[None] * size for _ in range(size)]
    for i in range(size):
        coeffs[i][i] = 1.0
        pvals[i][i] = 0.0 if names[i] not in flagged else None
        for j in range(i + 1, size):
            if names[i] in flagged or names[j] in flagged:
                continue
            r = pearson_corr(columns[i], columns[j])
            p = corr_pvalue(columns[i], columns[j], "pearson", permutations, seed=derive_seed(seed, f"{i}-{j}"))
            coeffs[i][j] = coeffs[j][i] = r
            pvals[i][j] = pvals[j][i] = p
    return {"names": names, "coefficients": coeffs, "pvalues": pvals, "flagged": flagged}


# ---------- Kolmogorov-Smirnov ----------
def kolmogorov_sf(y: float) -> float:
    """Q(y) = 2 Σ_{k≥1} (-1)^{k-1} exp(-2k²y²)，截取前若干项；y 很小时取 1。"""
    if y < 0.2:
        return 1.0
    k = np.arange(1, config.KS_SERIES_TERMS + 1)
    terms = np.exp(-2.0 * k**2 * y * y) * np.where(k % 2 == 1, 1.0, -1.0)
    return float(min(1.0, max(0.0, 2.0 * np.sum(terms))))


def ks_statistic(sample, cdf: Callable[[np.ndarray], np.ndarray]) -> Tuple[float, float]:
    """单样本 KS：D = sup |F̂_n − F|，p 由渐近 Kolmogorov 级数在 √n·D 处给出。"""
    x = np.sort(np.asarray(sample, dtype=float).reshape(-1))
    n = x.size
    if n < 1:
        raise DomainError("KS 样本为空")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))
    d = min(1.0, max(0.0, d))
    return d, kolmogorov_sf(math.sqrt(n) * d)


def ks_two_sample(x, y) -> Tuple[float, float]:
    """两样本双侧 KS：(D, p)，小样本用精确分布。"""
    a = np.asarray(x, dtype=float).reshape(-1)
    b = np.asarray(y, dtype=float).reshape(-1)
    if a.size < 1 or b.size < 1:
        raise DomainError("KS 样本为空")
    result = ks_2samp(a, b)
    return float(result.statistic), float(result.pvalue)


# ---------- 尺度不变 ----------
def _check_lambdas(lambdas: Sequence[float]) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=float).reshape(-1)
    if lam.size == 0:
        raise DomainError("λ 网格为空")
    if np.any(lam < 1.0):
        raise DomainError(f"λ 必须 >= 1: {lam.min()}")
    if np.any(np.diff(lam) < 0):
        raise DomainError("λ 网格必须升序")
    return lam


def scale_barcode(classifier: Callable[[np.ndarray], np.ndarray], z, lambdas: Sequence[float]) -> List[int]:
    """g(λ z) 随 λ 的标签序列；常数序列 ⇔ 该点尺度不变。"""
    lam = _check_lambdas(lambdas)
    point = np.asarray(z, dtype=float).reshape(-1)
    labels = np.asarray(classifier(lam[:, None] * point[None, :])).reshape(-1)
    return [int(v) for v in labels]


def barcode_constancy(classifier: Callable[[np.ndarray], np.ndarray], Z: np.ndarray, lambdas: Sequence[float]) -> float:
    """常数条形码所占比例。"""
    lam = _check_lambdas(lambdas)
    points = np.atleast_2d(np.asarray(Z, dtype=float))
    if points.shape[0] == 0:
        raise DomainError("点集为空")
    scaled = (lam[None, :, None] * points[:, None, :]).reshape(-1, points.shape[1])
    labels = np.asarray(classifier(scaled)).reshape(points.shape[0], lam.size)
    constant = np.all(labels == labels[:, :1], axis=1)
    return float(np.mean(constant))


@dataclass
class TailLossCurve:
    lambdas: List[float]
    losses: List[float]
    counts: List[int]

    def as_series(self) -> List[Tuple[float, float]]:
        return list(zip(self.lambdas, self.losses))

    def count_series(self) -> List[Tuple[float, float]]:
        return [(lam, float(c)) for lam, c in zip(self.lambdas, self.counts)]


def tail_loss_curve(
    predict: Callable[[np.ndarray], np.ndarray],
    test: LabeledDataset,
    norm_values: np.ndarray,
    t: float,
    lambdas: Sequence[float],
    angular: bool = False,
) -> TailLossCurve:
    """
    每个 λ 在嵌套尾部子集 {‖z‖ ≥ λt} 上的 0/1 损失。

    norm_values 由调用方给出（输入空间或隐空间的范数）；子集为空时曲线截断。
    """
    lam = _check_lambdas(lambdas)
    values = np.asarray(norm_values, dtype=float).reshape(-1)
    if values.size != test.n:
        raise DomainError("范数个数与测试集大小不一致")
    curve = TailLossCurve([], [], [])
    for lam_value in lam:
        idx = nested_tail_subset(values, t, float(lam_value))
        if idx.size == 0:
            logger.warning(f"λ={lam_value:g} 时尾部子集为空，曲线截断")
            break
        curve.lambdas.append(float(lam_value))
        curve.losses.append(empirical_tail_risk(predict, test.subset(idx), angular=angular))
        curve.counts.append(int(idx.size))
    return curve


def length_by_tail_level(lengths, norm_values, t: float, lambdas: Sequence[float]) -> List[Tuple[float, float, int]]:
    """各嵌套尾部子集上的平均序列长度：(λ, 均值, 样本数)。"""
    lam = _check_lambdas(lambdas)
    lens = np.asarray(lengths, dtype=float).reshape(-1)
    values = np.asarray(norm_values, dtype=float).reshape(-1)
    if lens.size != values.size:
        raise DomainError("长度与范数个数不一致")
    rows = []
    for lam_value in lam:
        idx = nested_tail_subset(values, t, float(lam_value))
        if idx.size == 0:
            break
        rows.append((float(lam_value), float(np.mean(lens[idx])), int(idx.size)))
    return rows


def loss_table(predictions, labels, extreme_mask) -> Dict[str, float]:
    """
    主体 / 极值 / 总体 0/1 损失。

    overall = κ̂·extreme + (1 − κ̂)·bulk，κ̂ 为极值占比；某一侧为空时其损失记 0。
    """
    pred = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    mask = np.asarray(extreme_mask, dtype=bool).reshape(-1)
    if pred.size == 0 or pred.size != y.size or y.size != mask.size:
        raise DomainError("预测、标签与极值掩码长度必须一致且非空")
    errors = (pred != y).astype(float)
    kappa_hat = float(np.mean(mask))
    extreme = float(np.mean(errors[mask])) if np.any(mask) else 0.0
    bulk = float(np.mean(errors[~mask])) if np.any(~mask) else 0.0
    return {"extreme": extreme, "bulk": bulk, "overall": float(np.mean(errors)), "kappa_hat": kappa_hat}


# ---------- 文本指标 ----------
def distinct_n(sequences: Sequence[Sequence[int]], n: int = 1) -> float:
    """不同 n-gram 个数 / 生成 token 总数"""
    if n not in (1, 2):
        raise DomainError(f"n 只能为 1 或 2: {n}")
    total = sum(len(seq) for seq in sequences)
    if total == 0:
        raise DomainError("语料为空")
    grams = set()
    for seq in sequences:
        seq = list(seq)
        grams.update(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))
    return len(grams) / total


def f1_score(predictions, labels, positive: int = 1) -> float:
    pred = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if y.size == 0:
        raise DomainError("标签为空")
    if pred.size != y.size:
        raise DomainError("预测与标签长度不一致")
    tp = int(np.sum((pred == positive) & (y == positive)))
    fp = int(np.sum((pred == positive) & (y != positive)))
    fn = int(np.sum((pred != positive) & (y == positive)))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def f1_by_class(predictions, labels) -> Dict[str, float]:
    """+1 / -1 两类各自的 F1 及其平均（macro）。"""
    positive = f1_score(predictions, labels, positive=1)
    negative = f1_score(predictions, labels, positive=-1)
    return {"positive": positive, "negative": negative, "macro": 0.5 * (positive + negative)}
