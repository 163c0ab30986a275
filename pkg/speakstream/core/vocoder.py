"""Causal frame-by-frame vocoder.

Each log-mel frame is first upsampled in time (linear interpolation
against the previous frame) and in frequency (channel interpolation onto
a finer mel grid). Every upsampled sub-frame is mapped back to a linear
power spectrum through the clamped pseudo-inverse of the mel filterbank
and rendered by a bank of fixed-frequency oscillators whose phase follows
the absolute sample clock, so chunks join without discontinuities.
"""
from __future__ import annotations

import logging
import math
import sys
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Deque, Iterable, Optional, Union

import numpy as np
import soundfile as sf

from .dmel import BinSpec, dequantize, mel_filterbank
from .errors import InvalidConfigError, InvalidInputError
from .utils import sample_boundary

logger = logging.getLogger(__name__)


class VocoderMode(str, Enum):
    STREAMING = "Streaming"
    BUFFERED = "Buffered"


@dataclass(frozen=True)
class VocoderConfig:
    mode: VocoderMode = VocoderMode.STREAMING
    buffer_frames: int = 10  # k, Buffered mode only
    hop: float = 0.025
    sample_rate: int = 24000
    upsample_factor: int = 4  # 25 ms -> 6.25 ms
    channel_expand: int = 120
    num_channels: int = 80
    fmin: float = 0.0
    fmax: float = 11025.0
    n_fft: int = 512
    full_scale_log_mel: float = math.log(1e4)  # log-mel value rendered at full scale

    def validate(self) -> "VocoderConfig":
        if self.mode is VocoderMode.BUFFERED and self.buffer_frames < 1:
            raise InvalidConfigError("buffer_frames must be >= 1")
        if self.upsample_factor < 1:
            raise InvalidConfigError("upsample_factor must be >= 1")
        if self.channel_expand < 1 or self.num_channels < 1:
            raise InvalidConfigError("channel counts must be >= 1")
        if self.hop <= 0 or self.sample_rate <= 0:
            raise InvalidConfigError("hop and sample_rate must be positive")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise InvalidConfigError(f"need 0 <= fmin < fmax <= {self.sample_rate / 2}")
        return self

    @property
    def frame_latency(self) -> int:
        """Frames that must arrive before the first chunk leaves."""
        return self.buffer_frames if self.mode is VocoderMode.BUFFERED else 1

    @property
    def samples_per_frame(self) -> float:
        return self.hop * self.sample_rate


@dataclass(frozen=True)
class _Synth:
    channel_map: np.ndarray  # (expand, channels) interpolation weights
    inverse: np.ndarray  # (bins, expand) clamped-later mel pseudo-inverse
    bins: np.ndarray  # (bins,) oscillator index k, frequency k * sr / n_fft
    sine: np.ndarray  # (n_fft,) one period of sin
    gain: float


def _channel_map(channels: int, expand: int) -> np.ndarray:
    pos = np.linspace(0.0, channels - 1, expand)
    lo = np.clip(np.floor(pos).astype(int), 0, channels - 1)
    hi = np.minimum(lo + 1, channels - 1)
    frac = pos - lo
    out = np.zeros((expand, channels))
    out[np.arange(expand), lo] += 1.0 - frac
    out[np.arange(expand), hi] += frac
    return out


@lru_cache(maxsize=8)
def _synth(config: VocoderConfig) -> _Synth:
    fb = mel_filterbank(config.sample_rate, config.n_fft, config.channel_expand, config.fmin, config.fmax)
    inverse = np.linalg.pinv(fb)
    full = np.maximum(inverse @ np.full(config.channel_expand, math.exp(config.full_scale_log_mel)), 0.0)
    total = float(np.sqrt(full).sum())
    return _Synth(
        channel_map=_channel_map(config.num_channels, config.channel_expand),
        inverse=inverse,
        bins=np.arange(fb.shape[1]),
        sine=np.sin(2.0 * np.pi * np.arange(config.n_fft) / config.n_fft),
        gain=1.0 / total if total > 0 else 0.0,
    )


@dataclass
class VocoderState:
    config: VocoderConfig
    received: int = 0
    emitted: int = 0
    rendered: int = 0  # frames already turned into samples (sample clock position)
    prev: Optional[np.ndarray] = None
    pending: Deque[np.ndarray] = field(default_factory=deque)

    @classmethod
    def new(cls, config: Optional[VocoderConfig] = None) -> "VocoderState":
        return cls(config=(config or VocoderConfig()).validate())


def _check_frame(state: VocoderState, frame: Union[np.ndarray, Iterable[float]]) -> np.ndarray:
    x = np.asarray(frame, dtype=np.float64)
    if x.shape != (state.config.num_channels,):
        raise InvalidInputError(f"expected a frame of {state.config.num_channels} channels, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("frame values must be finite")
    return x


def upsample(state: VocoderState, frame: np.ndarray) -> np.ndarray:
    """(upsample_factor, channel_expand) sub-frames from this and the previous frame."""
    x = _check_frame(state, frame)
    cfg = state.config
    prev = x if state.prev is None else state.prev
    alphas = np.arange(1, cfg.upsample_factor + 1) / cfg.upsample_factor
    steps = prev[None, :] + alphas[:, None] * (x - prev)[None, :]
    state.prev = x
    return steps @ _synth(cfg).channel_map.T


def _render(state: VocoderState, subframes: np.ndarray) -> np.ndarray:
    cfg = state.config
    syn = _synth(cfg)
    F = cfg.upsample_factor
    step = cfg.samples_per_frame / F
    base = state.rendered * F
    parts = []
    for s, logmel in enumerate(subframes):
        lo, hi = sample_boundary(base + s, step), sample_boundary(base + s + 1, step)
        power = np.maximum(syn.inverse @ np.exp(logmel), 0.0)
        amplitude = np.sqrt(power) * syn.gain
        n = np.arange(lo, hi, dtype=np.int64)
        phase = (n[:, None] * syn.bins[None, :]) % cfg.n_fft
        parts.append(syn.sine[phase] @ amplitude)
    state.rendered += 1
    state.emitted += 1
    return np.clip(np.concatenate(parts), -1.0, 1.0).astype(np.float32)


def push_frame(state: VocoderState, frame: np.ndarray) -> np.ndarray:
    """Waveform chunk for one incoming log-mel frame (empty while Buffered fills)."""
    x = _check_frame(state, frame)
    state.received += 1
    if state.config.mode is VocoderMode.STREAMING:
        return _render(state, upsample(state, x))
    state.pending.append(x)
    if len(state.pending) < state.config.buffer_frames:
        return np.zeros(0, dtype=np.float32)
    return _render(state, upsample(state, state.pending.popleft()))


def push_dmel(state: VocoderState, bins: np.ndarray, spec: BinSpec) -> np.ndarray:
    return push_frame(state, dequantize(np.asarray(bins)[None, :], spec).frames[0])


def finalize(state: VocoderState) -> np.ndarray:
    """Audio of every frame still held back (Buffered); empty when Streaming."""
    chunks = []
    while state.pending:
        chunks.append(_render(state, upsample(state, state.pending.popleft())))
    if not chunks:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate(chunks)


def synthesize(frames: np.ndarray, config: Optional[VocoderConfig] = None) -> np.ndarray:
    """One-shot rendering of a whole (num_frames, channels) log-mel matrix."""
    state = VocoderState.new(config)
    chunks = [push_frame(state, f) for f in np.asarray(frames)]
    chunks.append(finalize(state))
    return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float32)


def peak_dbfs(samples: np.ndarray) -> float:
    peak = float(np.max(np.abs(samples))) if len(samples) else 0.0
    return 20.0 * math.log10(peak) if peak > 0 else -math.inf


def write_wav(path: Union[str, Path], samples: np.ndarray, sample_rate: int) -> None:
    """16-bit PCM WAV; ``-`` writes raw little-endian samples to stdout."""
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    if str(path) == "-":
        sys.stdout.buffer.write(np.round(x * 32767).astype("<i2").tobytes())
        sys.stdout.buffer.flush()
        return
    sf.write(str(path), x, sample_rate, subtype="PCM_16")
    logger.info("wrote %.2f s of audio to %s", len(x) / sample_rate, path)
