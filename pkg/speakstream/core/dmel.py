from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Final, Iterable, Optional, Union

import librosa
import numpy as np
import yaml
from scipy.signal import get_window

from .errors import (
    EmptyInputError,
    FormatError,
    InvalidBinError,
    InvalidConfigError,
    InvalidInputError,
)
from .utils import sample_boundary


# Added to mel energies before the log so silence maps to a finite floor.
LOG_EPSILON: Final[float] = 1e-10
LOG_FLOOR: Final[float] = math.log(LOG_EPSILON)

DUMP_MAGIC: Final[bytes] = b"DMEL"
DUMP_VERSION: Final[int] = 1
_DUMP_HEADER = struct.Struct("<4sHHHII")


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 22050
    hop: float = 0.025  # seconds per frame
    window: float = 0.1  # seconds, 4 x hop
    num_channels: int = 80
    fmin: float = 0.0
    fmax: float = 11025.0

    def validate(self) -> "MelConfig":
        if self.sample_rate <= 0:
            raise InvalidConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.hop <= 0:
            raise InvalidConfigError(f"hop must be positive, got {self.hop}")
        if self.window < self.hop:
            raise InvalidConfigError(f"window {self.window} is shorter than hop {self.hop}")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise InvalidConfigError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={self.fmin} fmax={self.fmax}"
            )
        if self.num_channels < 1:
            raise InvalidConfigError(f"num_channels must be >= 1, got {self.num_channels}")
        return self

    @property
    def hop_samples(self) -> float:
        """Samples per hop; fractional when hop * sample_rate is not integral."""
        return self.hop * self.sample_rate

    @property
    def window_samples(self) -> int:
        return int(round(self.window * self.sample_rate))


@dataclass(frozen=True)
class BinSpec:
    num_bins: int = 16
    lo: float = LOG_FLOOR
    hi: float = math.log(1e4)

    def validate(self) -> "BinSpec":
        if not 2 <= self.num_bins <= 256:
            raise InvalidConfigError(f"num_bins must be in [2, 256], got {self.num_bins}")
        if not self.lo < self.hi:
            raise InvalidConfigError(f"need lo < hi, got lo={self.lo} hi={self.hi}")
        return self

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.num_bins

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump({"num_bins": int(self.num_bins), "lo": float(self.lo), "hi": float(self.hi)}, f)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "BinSpec":
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise FormatError(f"{path}: expected a mapping")
        try:
            spec = cls(num_bins=int(data["num_bins"]), lo=float(data["lo"]), hi=float(data["hi"]))
        except KeyError as exc:
            raise FormatError(f"{path}: missing key {exc}") from exc
        return spec.validate()


@dataclass
class MelFrameMatrix:
    """Continuous log-mel frames, one row per hop."""

    frames: np.ndarray  # (num_frames, num_channels), float64
    config: MelConfig

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != self.config.num_channels:
            raise InvalidInputError(
                f"expected frames of width {self.config.num_channels}, got shape {self.frames.shape}"
            )
        if not np.all(np.isfinite(self.frames)):
            raise InvalidInputError("log-mel frames must be finite")

    def __len__(self) -> int:
        return int(self.frames.shape[0])


@lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, n_fft: int, num_channels: int, fmin: float, fmax: float) -> np.ndarray:
    """Slaney-style triangular mel filterbank, shape (num_channels, 1 + n_fft // 2)."""
    fb = librosa.filters.mel(
        sr=sample_rate, n_fft=n_fft, n_mels=num_channels, fmin=fmin, fmax=fmax, dtype=np.float64
    )
    fb.setflags(write=False)
    return fb


def channel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    """Center frequency in Hz of every mel channel."""
    edges = librosa.mel_frequencies(n_mels=cfg.num_channels + 2, fmin=cfg.fmin, fmax=cfg.fmax)
    return edges[1:-1]


def mel_spectrogram(waveform: Iterable[float], sample_rate: int, cfg: MelConfig) -> MelFrameMatrix:
    """Log-mel frames of a mono waveform.

    Frames are centred every ``cfg.hop`` seconds (zero padded at both ends),
    windowed with a periodic Hann window of ``cfg.window`` seconds. Each
    value is ``log(mel_energy + LOG_EPSILON)`` where the energy is the power
    spectrum projected on the mel filterbank. The frame count is
    ``ceil(len(waveform) / hop_samples)``.
    """
    cfg.validate()
    if sample_rate != cfg.sample_rate:
        raise InvalidConfigError(f"waveform sample rate {sample_rate} != config {cfg.sample_rate}")
    x = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise EmptyInputError("waveform is empty")

    hop = cfg.hop_samples
    win = cfg.window_samples
    num_frames = int(math.ceil(x.size / hop - 1e-9))
    half = win // 2
    padded = np.pad(x, (half, win))
    starts = np.array([sample_boundary(k, hop) for k in range(num_frames)])
    idx = starts[:, None] + np.arange(win)[None, :]
    window = get_window("hann", win, fftbins=True)
    power = np.abs(np.fft.rfft(padded[idx] * window, n=win, axis=1)) ** 2

    fb = mel_filterbank(cfg.sample_rate, win, cfg.num_channels, cfg.fmin, cfg.fmax)
    mel = power @ fb.T
    return MelFrameMatrix(frames=np.log(mel + LOG_EPSILON), config=cfg)


def _as_array(frames: Union[MelFrameMatrix, np.ndarray]) -> np.ndarray:
    if isinstance(frames, MelFrameMatrix):
        return frames.frames
    arr = np.asarray(frames, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("log-mel frames must be finite")
    return arr


def fit_bin_spec(corpus: Iterable[Union[MelFrameMatrix, np.ndarray]], num_bins: int = 16) -> BinSpec:
    """Global linear bin range covering every log-mel value of the corpus.

    A degenerate range (all values equal to c) widens to [c - eps, c + eps].
    """
    lo, hi = math.inf, -math.inf
    seen = False
    for item in corpus:
        arr = _as_array(item)
        if arr.size == 0:
            continue
        seen = True
        lo = min(lo, float(arr.min()))
        hi = max(hi, float(arr.max()))
    if not seen:
        raise EmptyInputError("cannot fit bins on an empty corpus")
    if not lo < hi:
        eps = max(abs(lo), 1.0) * 1e-6
        lo, hi = lo - eps, hi + eps
    return BinSpec(num_bins=num_bins, lo=lo, hi=hi).validate()


def discretize(frames: Union[MelFrameMatrix, np.ndarray], spec: BinSpec) -> np.ndarray:
    """Map log-mel values to intensity bins; out-of-range values clamp."""
    spec.validate()
    values = _as_array(frames)
    scaled = np.floor((values - spec.lo) / (spec.hi - spec.lo) * spec.num_bins)
    return np.clip(scaled, 0, spec.num_bins - 1).astype(np.uint8)


def dequantize(dmel: np.ndarray, spec: BinSpec, config: Optional[MelConfig] = None) -> MelFrameMatrix:
    """Bin centres ``lo + (bin + 0.5) * width`` for every channel."""
    spec.validate()
    bins = np.asarray(dmel)
    if bins.ndim == 1:
        bins = bins[None, :]
    if bins.size and (bins.min() < 0 or bins.max() >= spec.num_bins):
        raise InvalidBinError(f"bins must lie in [0, {spec.num_bins}), got [{bins.min()}, {bins.max()}]")
    if config is None:
        config = MelConfig(num_channels=int(bins.shape[1]))
    values = spec.lo + (bins.astype(np.float64) + 0.5) * spec.width
    return MelFrameMatrix(frames=values, config=config)


# ------------------------------ Frame dumps ------------------------------ #
@dataclass
class DmelDump:
    frames: np.ndarray  # (num_frames, num_channels), uint8
    num_bins: int
    hop: float


def write_dump(path: Union[str, Path], dmel: np.ndarray, num_bins: int, hop: float) -> None:
    """Write frames as ``DMEL`` header + row-major one-byte bins (little-endian header)."""
    bins = np.asarray(dmel)
    if bins.ndim != 2:
        raise InvalidInputError(f"expected a 2-D frame array, got shape {bins.shape}")
    if not 2 <= num_bins <= 256:
        raise InvalidConfigError("frame dumps store one byte per bin; num_bins must be in [2, 256]")
    header = _DUMP_HEADER.pack(
        DUMP_MAGIC,
        DUMP_VERSION,
        bins.shape[1],
        num_bins,
        int(round(hop * 1e6)),
        bins.shape[0],
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(bins, dtype=np.uint8).tobytes(order="C"))


def read_dump(path: Union[str, Path]) -> DmelDump:
    raw = Path(path).read_bytes()
    if len(raw) < _DUMP_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, channels, num_bins, hop_us, num_frames = _DUMP_HEADER.unpack_from(raw)
    if magic != DUMP_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DUMP_VERSION:
        raise FormatError(f"{path}: unsupported dump version {version}")
    body = raw[_DUMP_HEADER.size:]
    if len(body) != channels * num_frames:
        raise FormatError(f"{path}: expected {channels * num_frames} bytes of bins, got {len(body)}")
    frames = np.frombuffer(body, dtype=np.uint8).reshape(num_frames, channels).copy()
    return DmelDump(frames=frames, num_bins=num_bins, hop=hop_us / 1e6)
