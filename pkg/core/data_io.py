"""数据生成与读写：toy 高斯混合、角度随半径旋转的对照数据、隐编码序列语料、嵌入文件"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from core.augment import SequenceDataset
from core.config import config
from core.errors import DomainError, ParseError
from core.evt import LabeledDataset, norms
from core.logger import get_logger
from core.nn import Mlp, forward
from core.rng import RngStream

logger = get_logger("data_io")

SEQUENCES_FORMAT = "hana-tailrep/sequences"


@dataclass(frozen=True)
class MixtureComponent:
    mean: tuple
    cov: tuple
    weight: float
    label: int


@dataclass(frozen=True)
class MixtureSpec:
    """二维高斯混合，每个分量一个标签"""

    components: tuple = field(
        default=(
            MixtureComponent(mean=(1.0, 1.0), cov=((1.0, 0.0), (0.0, 0.25)), weight=0.5, label=1),
            MixtureComponent(mean=(2.5, 1.0), cov=((1.0, 0.0), (0.0, 0.25)), weight=0.5, label=-1),
        )
    )

    def __post_init__(self):
        if not self.components:
            raise DomainError("混合分布至少需要一个分量")
        weights = np.array([c.weight for c in self.components], dtype=float)
        if np.any(weights < 0) or not math.isclose(weights.sum(), 1.0, abs_tol=1e-9):
            raise DomainError(f"分量权重必须非负且和为 1: {weights.tolist()}")
        for c in self.components:
            if c.label not in (-1, 1):
                raise DomainError(f"分量标签必须为 ±1: {c.label}")

    @classmethod
    def from_dict(cls, data: dict) -> "MixtureSpec":
        comps = tuple(
            MixtureComponent(
                mean=tuple(float(v) for v in c["mean"]),
                cov=tuple(tuple(float(v) for v in row) for row in c["cov"]),
                weight=float(c["weight"]),
                label=int(c["label"]),
            )
            for c in data["components"]
        )
        return cls(components=comps)

    def to_dict(self) -> dict:
        return {
            "components": [
                {"mean": list(c.mean), "cov": [list(r) for r in c.cov], "weight": c.weight, "label": c.label}
                for c in self.components
            ]
        }


def _cholesky(cov: np.ndarray) -> np.ndarray:
    if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
        raise DomainError(f"协方差矩阵必须对称: {cov.tolist()}")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise DomainError(f"协方差矩阵不是正定的: {cov.tolist()}") from e


def gen_gaussian_mixture(spec: MixtureSpec, n: int, seed: int = 0) -> LabeledDataset:
    """标签 = 生成该点的分量的标签。"""
    if n < 1:
        raise DomainError(f"样本数必须 >= 1: {n}")
    factors = [_cholesky(np.asarray(c.cov, dtype=float)) for c in spec.components]
    gen = RngStream(seed).generator
    weights = np.array([c.weight for c in spec.components])
    comp = gen.choice(len(spec.components), size=n, p=weights)
    noise = gen.standard_normal((n, len(spec.components[0].mean)))
    X = np.empty_like(noise)
    y = np.empty(n, dtype=int)
    for j, c in enumerate(spec.components):
        mask = comp == j
        X[mask] = np.asarray(c.mean, dtype=float) + noise[mask] @ factors[j].T
        y[mask] = c.label
    return LabeledDataset(X, y)


def gen_dependent_embedding(n: int, d: int, seed: int = 0) -> LabeledDataset:
    """
    角度随半径确定性旋转的数据（正则变化的反例）。

    V ~ U(0,1)，半径 r = 1 + 9V；每对坐标 (2i, 2i+1) 的角度
    θ_i = A_i + (3π/8)·V，A_i ~ U(0, π/8)。点 = r·u，u 按无穷范数归一，
    因此 ‖x‖ = r。奇数维时最后一维复制第一维。标签：θ_0 ≥ π/4 为 +1。
    """
    if n < 1 or d < 2:
        raise DomainError(f"需要 n >= 1 且 d >= 2: n={n}, d={d}")
    gen = RngStream(seed).generator
    v = gen.uniform(0.0, 1.0, n)
    pairs = d // 2
    base = gen.uniform(0.0, np.pi / 8.0, (n, pairs))
    theta = base + (3.0 * np.pi / 8.0) * v[:, None]
    u = np.empty((n, d))
    u[:, 0 : 2 * pairs : 2] = np.cos(theta)
    u[:, 1 : 2 * pairs : 2] = np.sin(theta)
    if d % 2 == 1:
        u[:, -1] = u[:, 0]
    u /= np.max(np.abs(u), axis=1, keepdims=True)
    X = (1.0 + 9.0 * v)[:, None] * u
    y = np.where(theta[:, 0] >= np.pi / 4.0, 1, -1)
    return LabeledDataset(X, y)


def gen_latent_sequences(
    latents: np.ndarray,
    vocab_size: int,
    t_max: int,
    seed: int = 0,
    encoder: Optional[Mlp] = None,
    sectors: int = 8,
) -> SequenceDataset:
    """
    由隐编码的角度扇区与范数档位确定性地生成 token 序列。

    扇区 s 来自前两维的 atan2（一维时按符号），档位 b = clip(⌊log2 ‖z‖⌋, 0, T_max-2)；
    序列为 c_0..c_b 加 STOP，c_t = 2 + ((π(s) + t) mod C)，C = |V| - 2，
    π 是由 seed 决定的扇区到起始 token 的映射。encoder 给定时 latents 视为输入 X_U。
    """
    if vocab_size < 4:
        raise DomainError(f"词表至少需要 4 个 token: {vocab_size}")
    if t_max < 2:
        raise DomainError(f"T_max 至少为 2: {t_max}")
    if sectors < 1:
        raise DomainError(f"扇区数必须 >= 1: {sectors}")
    X = np.atleast_2d(np.asarray(latents, dtype=float))
    Z = np.atleast_2d(forward(encoder, X)) if encoder is not None else X

    content = vocab_size - 2
    perm = RngStream(seed).generator.permutation(max(sectors, content)) % content
    if Z.shape[1] >= 2:
        angle = np.mod(np.arctan2(Z[:, 1], Z[:, 0]), 2.0 * np.pi)
        sector = np.minimum((angle / (2.0 * np.pi) * sectors).astype(int), sectors - 1)
    else:
        sector = (Z[:, 0] < 0).astype(int) % sectors
    r = norms(Z)
    with np.errstate(divide="ignore"):
        bucket = np.floor(np.log2(np.maximum(r, np.finfo(float).tiny)))
    bucket = np.clip(bucket, 0, t_max - 2).astype(int)

    sequences = []
    for s, b in zip(sector, bucket):
        start = int(perm[s])
        sequences.append([2 + (start + t) % content for t in range(b + 1)] + [config.STOP_ID])
    return SequenceDataset(sequences=sequences, X=X, vocab_size=vocab_size, t_max=t_max)


# ---------- 嵌入文件 ----------
def _parse_label(token: str, line_no: int, path: str) -> int:
    if token in ("1", "+1"):
        return 1
    if token == "-1":
        return -1
    raise ParseError(f"标签必须为 -1 或 +1: {token!r}", line_no=line_no, path=path)


def load_embeddings(path: Union[str, Path]) -> LabeledDataset:
    """
    读取嵌入 CSV：首个非注释行 `d=<int>`，之后每行 `label,v1,...,vd`；`#` 开头为注释。
    """
    source = Path(path)
    if not source.exists():
        raise ParseError("文件不存在", path=str(source))
    dim: Optional[int] = None
    labels: List[int] = []
    rows: List[List[float]] = []
    for line_no, raw in enumerate(source.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if dim is None:
            if not line.startswith("d="):
                raise ParseError(f"缺少维度头 d=<int>: {line!r}", line_no=line_no, path=str(source))
            try:
                dim = int(line[2:])
            except ValueError as e:
                raise ParseError(f"维度不是整数: {line!r}", line_no=line_no, path=str(source)) from e
            if dim < 1:
                raise ParseError(f"维度必须 >= 1: {dim}", line_no=line_no, path=str(source))
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != dim + 1:
            raise ParseError(f"期望 {dim} 个数值，实际 {len(fields) - 1} 个", line_no=line_no, path=str(source))
        label = _parse_label(fields[0], line_no, str(source))
        try:
            values = [float(f) for f in fields[1:]]
        except ValueError as e:
            raise ParseError(f"数值格式错误: {e}", line_no=line_no, path=str(source)) from e
        if not all(math.isfinite(v) for v in values):
            raise ParseError("包含非有限值", line_no=line_no, path=str(source))
        labels.append(label)
        rows.append(values)
    if dim is None:
        raise ParseError("文件为空或缺少维度头", path=str(source))
    if not rows:
        raise ParseError("没有数据行", path=str(source))
    logger.info(f"读取嵌入 {len(rows)} 行, d={dim} <- {source}")
    return LabeledDataset(np.array(rows, dtype=float), np.array(labels, dtype=int))


def save_embeddings(dataset: LabeledDataset, path: Union[str, Path]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"d={dataset.d}"]
    for label, row in zip(dataset.y, dataset.X):
        lines.append(",".join([str(int(label))] + [repr(float(v)) for v in row]))
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"写出嵌入 {dataset.n} 行 -> {out}")
    return out


# ---------- 序列语料 ----------
def save_sequences(data: SequenceDataset, path: Union[str, Path], labels: Optional[Sequence[int]] = None) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": SEQUENCES_FORMAT,
        "version": config.FORMAT_VERSION,
        "vocab_size": data.vocab_size,
        "t_max": data.t_max,
        "embeddings": data.X.tolist(),
        "sequences": data.sequences,
        "labels": None if labels is None else [int(v) for v in labels],
    }
    out.write_text(json.dumps(payload), encoding="utf-8")
    return out


def load_sequences(path: Union[str, Path]) -> Dict[str, object]:
    """返回 {"data": SequenceDataset, "labels": 标签数组或 None}。"""
    source = Path(path)
    try:
        payload = json.loads(source.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"JSON 解析失败: {e.msg}", line_no=e.lineno, path=str(source)) from e
    if payload.get("format") != SEQUENCES_FORMAT:
        raise ParseError(f"不是序列语料文件: format={payload.get('format')!r}", path=str(source))
    data = SequenceDataset(
        sequences=payload["sequences"],
        X=np.asarray(payload["embeddings"], dtype=float),
        vocab_size=int(payload["vocab_size"]),
        t_max=int(payload["t_max"]),
    )
    labels = payload.get("labels")
    return {"data": data, "labels": None if labels is None else np.asarray(labels, dtype=int)}


def write_scatter_csv(
    path: Union[str, Path],
    points: np.ndarray,
    labels: np.ndarray,
    extreme_mask: np.ndarray,
) -> Path:
    """点云 CSV：坐标列 + role(bulk/extreme) + label。"""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    y = np.asarray(labels, dtype=int).reshape(-1)
    mask = np.asarray(extreme_mask, dtype=bool).reshape(-1)
    if not X.shape[0] == y.size == mask.size:
        raise DomainError("点、标签与角色长度不一致")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = ",".join([f"x{j + 1}" for j in range(X.shape[1])] + ["role", "label"])
    lines = [header]
    for row, label, extreme in zip(X, y, mask):
        coords = ",".join(repr(float(v)) for v in row)
        lines.append(f"{coords},{'extreme' if extreme else 'bulk'},{int(label)}")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out
