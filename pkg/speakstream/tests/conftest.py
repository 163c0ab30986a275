import numpy as np
import pytest

from speakstream.core.gradcheck import TINY_MODEL
from speakstream.core.model import Params, init_params


def _identity_blocks(params: Params) -> Params:
    """Zero every residual branch so each position only sees its own embedding."""
    rigged = params.copy()
    for i in range(rigged.config.num_layers):
        for name in ("attn.out", "ffn.down"):
            rigged.tensors[f"layers.{i}.{name}.weight"][:] = 0.0
            rigged.tensors[f"layers.{i}.{name}.bias"][:] = 0.0
    return rigged


def _stop_on_feature(params: Params, weight: float = 1.0) -> None:
    """Eos exactly when embedding dimension 0 is positive."""
    params.tensors["stop_head.weight"][:] = 0.0
    params.tensors["stop_head.weight"][0] = (-weight, weight)
    params.tensors["stop_head.bias"][:] = 0.0


@pytest.fixture
def one_frame_params() -> Params:
    """Continue after SpeechBOS, Eos after a frame: one frame per segment."""
    params = _identity_blocks(init_params(TINY_MODEL, seed=1))
    C = params.config.num_channels
    params.tensors["text_embedding"][:, 0] = -1.0
    params.tensors["bin_embedding"][:, :, 0] = 1.0 / C
    params.tensors["position_embedding"][:, 0] = 0.0
    _stop_on_feature(params)
    # channel 0 always decodes to bin 1, so no frame equals silence
    params.tensors["channel_head.bias"][1] = 10.0
    return params


@pytest.fixture
def stop_at_position():
    """Factory: frames until position ``p0``, Eos from there on."""

    def make(p0: int) -> Params:
        params = _identity_blocks(init_params(TINY_MODEL, seed=2))
        params.tensors["text_embedding"][:, 0] = 0.0
        params.tensors["bin_embedding"][:, :, 0] = 0.0
        params.tensors["position_embedding"][:, 0] = np.where(np.arange(TINY_MODEL.max_positions) < p0, -1.0, 1.0)
        _stop_on_feature(params)
        return params

    return make


@pytest.fixture
def never_stop_params() -> Params:
    params = init_params(TINY_MODEL, seed=4)
    params.tensors["stop_head.weight"][:] = 0.0
    params.tensors["stop_head.bias"][:] = (5.0, -5.0)
    return params
