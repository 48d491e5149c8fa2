"""共享 fixture：小规模数据与快速配置"""
import numpy as np
import pytest

from core.data_io import MixtureSpec, gen_gaussian_mixture
from core.evt import LabeledDataset
from core.lhtr import TWO_HEAD, LhtrConfig, train_lhtr
from core.nn import OptimConfig


def tiny_config(mode: str = TWO_HEAD, epochs: int = 3, **overrides) -> LhtrConfig:
    values = dict(
        encoder_sizes=[2, 4, 2],
        classifier_sizes=[2, 8, 1],
        discriminator_sizes=[2, 8, 1],
        optim=OptimConfig(learning_rate=5e-3, weight_decay=1e-5, batch_size=32, epochs=epochs),
        kappa=0.25,
        mode=mode,
    )
    values.update(overrides)
    return LhtrConfig(**values)


@pytest.fixture
def toy_data() -> LabeledDataset:
    return gen_gaussian_mixture(MixtureSpec(), 256, seed=1)


@pytest.fixture(scope="session")
def trained_model():
    data = gen_gaussian_mixture(MixtureSpec(), 256, seed=7)
    return train_lhtr(data, tiny_config(epochs=5), seed=3), data


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


class FakeMcp:
    """记录 @mcp.tool / resource / prompt 注册的函数"""

    def __init__(self):
        self.tools = {}
        self.resources = {}
        self.prompts = {}

    def tool(self):
        def decorator(fn):
            self.tools[fn.__name__] = fn
            return fn

        return decorator

    def resource(self, uri: str):
        def decorator(fn):
            self.resources[uri] = fn
            return fn

        return decorator

    def prompt(self):
        def decorator(fn):
            self.prompts[fn.__name__] = fn
            return fn

        return decorator


@pytest.fixture
def fake_mcp() -> FakeMcp:
    return FakeMcp()
