from __future__ import annotations

from typing import TYPE_CHECKING, List, Tuple

import numpy as np

from .errors import CacheDesyncError, InvalidTokenError

if TYPE_CHECKING:
    from .model import ModelConfig


class KvCache:
    """Per-layer attention keys/values of one decoding stream.

    Buffers are preallocated to ``max_positions``. ``forward`` writes every
    layer for the new positions and then commits them at once, so the
    cached length is always the same for all layers.
    """

    def __init__(self, config: "ModelConfig"):
        self.config = config
        shape = (config.num_heads, config.max_positions, config.head_dim)
        self.keys: List[np.ndarray] = [np.zeros(shape, dtype=config.np_dtype) for _ in range(config.num_layers)]
        self.values: List[np.ndarray] = [np.zeros(shape, dtype=config.np_dtype) for _ in range(config.num_layers)]
        self.length = 0

    def __len__(self) -> int:
        return self.length

    def check(self, config: "ModelConfig", incoming: int) -> None:
        if config != self.config:
            raise CacheDesyncError("cache was built for a different model configuration")
        if self.length + incoming > self.config.max_positions:
            raise InvalidTokenError(
                f"position {self.length + incoming - 1} exceeds max_positions={self.config.max_positions}"
            )

    def past(self, layer: int) -> Tuple[np.ndarray, np.ndarray]:
        """Committed (heads, length, head_dim) keys and values of ``layer``."""
        return self.keys[layer][:, : self.length], self.values[layer][:, : self.length]

    def write(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        """Stage (heads, new, head_dim) keys/values after the committed length."""
        n = k.shape[1]
        self.keys[layer][:, self.length : self.length + n] = k
        self.values[layer][:, self.length : self.length + n] = v

    def commit(self, count: int) -> None:
        self.length += count

    def reset(self) -> None:
        self.length = 0
