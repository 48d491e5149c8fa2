"""配置管理模块"""
import copy
import os
from typing import Any, Dict, List, Optional

from core.errors import ConfigError


class Config:
    """项目配置"""

    VERSION: str = "0.1.0"

    # 范数：全局唯一（无穷范数）
    NORM_ORD: float = float("inf")

    # 尾部比例 κ（k 的选取交给用户，默认 1/4）
    DEFAULT_KAPPA: float = float(os.getenv("TAILREP_KAPPA", "0.25"))
    DEFAULT_SEED: int = int(os.getenv("TAILREP_SEED", "0"))

    # 分类器输出截断
    PROB_EPS: float = 1e-7

    # 序列解码保留 token
    START_ID: int = 0
    STOP_ID: int = 1

    # 诊断
    DEFAULT_PERMUTATIONS: int = int(os.getenv("TAILREP_PERMUTATIONS", "1000"))
    HISTOGRAM_BINS: int = 10
    KS_SERIES_TERMS: int = 100
    MIN_RV_EXTREMES: int = 10

    # λ 网格
    BARCODE_LAMBDAS: List[float] = [float(v) for v in range(1, 21)]
    AUGMENT_LAMBDA_MIN: float = 1.0
    AUGMENT_LAMBDA_MAX: float = 1.5
    AUGMENT_M: int = 10

    # 序列化格式
    MLP_FORMAT: str = "hana-tailrep/mlp"
    MODEL_FORMAT: str = "hana-tailrep/lhtr"
    DECODER_FORMAT: str = "hana-tailrep/decoder"
    FORMAT_VERSION: int = 1

    # 日志配置
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    LOG_FILE: Optional[str] = os.getenv("LOG_FILE", None)

    # MCP 服务器名称
    SERVER_NAME: str = "TailRepAssistant"

    # 网络结构预设（None 占位符 = 输入维度）
    # toy: 二维混合实验；small: 序列嵌入；large: 文本嵌入
    PRESETS: Dict[str, Dict[str, Any]] = {
        "toy": {
            "encoder": [None, 4, 2],
            "classifier": [2, 8, 1],
            "single_encoder": [None, 4, 2],
            "single_classifier": [2, 8, 1],
            "discriminator": [2, 8, 1],
            "baseline": [None, 4, 2, 8, 1],
            "lr": 5e-4,
            "weight_decay": 1e-5,
            "batch_size": 64,
            "epochs": 100,
            "dropout": 0.4,
            "rho3": 1e-3,
            "delta": 0.9,
        },
        "small": {
            "encoder": [None, 384, 200, 150],
            "classifier": [150, 75, 8, 1],
            "single_encoder": [None, 384, 200, 100],
            "single_classifier": [100, 50, 8, 1],
            "discriminator": [150, 75, 8, 1],
            "baseline": [None, 384, 200, 50, 8, 1],
            "lr": 5e-4,
            "weight_decay": 1e-5,
            "batch_size": 64,
            "epochs": 500,
            "dropout": 0.0,
            "rho3": 1e-3,
            "delta": 0.9,
        },
        "large": {
            "encoder": [None, 384, 200, 150],
            "classifier": [150, 75, 8, 1],
            "single_encoder": [None, 384, 200, 100],
            "single_classifier": [100, 50, 8, 1],
            "discriminator": [150, 75, 8, 1],
            "baseline": [None, 384, 200, 50, 8, 1],
            "lr": 1e-4,
            "weight_decay": 1e-5,
            "batch_size": 256,
            "epochs": 500,
            "dropout": 0.0,
            "rho3": 1e-2,
            "delta": 0.9,
        },
    }

    # 实验命令在预设之上的默认覆盖项（SGD 下的学习率与对抗权重）
    EXPERIMENT_LHTR: Dict[str, Dict[str, Any]] = {
        "toy": {"rho3": 0.5, "optim": {"learning_rate": 1e-2}},
    }

    @classmethod
    def get_preset(cls, name: str, input_dim: int) -> Dict[str, Any]:
        """返回预设的独立副本，首层替换为实际输入维度。"""
        if name not in cls.PRESETS:
            raise ConfigError(f"未知预设: {name}（可选: {', '.join(cls.PRESETS)}）")
        if input_dim < 1:
            raise ConfigError(f"输入维度必须 >= 1: {input_dim}")
        preset = copy.deepcopy(cls.PRESETS[name])
        for key, value in preset.items():
            if isinstance(value, list):
                preset[key] = [input_dim if v is None else v for v in value]
        return preset

    @classmethod
    def augment_lambdas(
        cls,
        lam_min: Optional[float] = None,
        lam_max: Optional[float] = None,
        m: Optional[int] = None,
    ) -> List[float]:
        """增强用 λ 网格：[lam_min, lam_max] 上 m 个等距点。"""
        lo = cls.AUGMENT_LAMBDA_MIN if lam_min is None else lam_min
        hi = cls.AUGMENT_LAMBDA_MAX if lam_max is None else lam_max
        count = cls.AUGMENT_M if m is None else m
        if count < 1:
            raise ConfigError(f"m 必须 >= 1: {count}")
        if count == 1:
            return [float(lo)]
        step = (hi - lo) / (count - 1)
        return [float(lo + i * step) for i in range(count)]


config = Config()
