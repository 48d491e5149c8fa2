"""随机数流：同一 seed + 同一调用序列 => 同一输出"""
import zlib

import numpy as np


def derive_seed(seed: int, name: str) -> int:
    """由 (seed, name) 派生稳定的 64 位整数种子（不依赖进程级 hash 随机化）。"""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class RngStream:
    """PCG64 随机数流，不做线程同步：一个流只给一个调用方用。"""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def spawn(self, name: str) -> "RngStream":
        """派生独立子流；同名子流在任意时刻派生结果相同。"""
        return RngStream(derive_seed(self.seed, name))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed})"


def as_generator(rng) -> np.random.Generator:
    """接受 RngStream / Generator / int 种子。"""
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        raise TypeError("需要 RngStream、Generator 或整数种子")
    return RngStream(int(rng)).generator
