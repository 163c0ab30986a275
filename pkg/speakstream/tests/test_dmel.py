import math

import numpy as np
import pytest

from speakstream.core.dmel import (
    LOG_EPSILON,
    BinSpec,
    MelConfig,
    MelFrameMatrix,
    channel_center_frequencies,
    dequantize,
    discretize,
    fit_bin_spec,
    mel_spectrogram,
    read_dump,
    write_dump,
)
from speakstream.core.errors import (
    EmptyInputError,
    FormatError,
    InvalidBinError,
    InvalidConfigError,
    InvalidInputError,
)


def test_one_second_of_silence_gives_40_floor_frames():
    cfg = MelConfig()
    mel = mel_spectrogram(np.zeros(22050), 22050, cfg)
    assert mel.frames.shape == (40, 80)
    assert np.allclose(mel.frames, math.log(LOG_EPSILON))


def test_frame_count_is_ceil_of_length_over_hop():
    cfg = MelConfig()
    mel = mel_spectrogram(np.zeros(1000), 22050, cfg)
    assert len(mel) == math.ceil(1000 / cfg.hop_samples)


def test_sine_at_channel_center_peaks_in_that_channel():
    cfg = MelConfig()
    channel = 40
    freq = channel_center_frequencies(cfg)[channel]
    t = np.arange(22050) / 22050
    mel = mel_spectrogram(0.5 * np.sin(2 * np.pi * freq * t), 22050, cfg)
    interior = mel.frames[4:-4]
    assert np.all(interior.argmax(axis=1) == channel)


def test_mel_rejects_empty_waveform_and_bad_config():
    with pytest.raises(EmptyInputError):
        mel_spectrogram(np.zeros(0), 22050, MelConfig())
    with pytest.raises(InvalidConfigError):
        mel_spectrogram(np.zeros(100), 22050, MelConfig(fmax=20000.0))
    with pytest.raises(InvalidConfigError):
        mel_spectrogram(np.zeros(100), 16000, MelConfig())


def test_fit_bin_spec_uses_global_range():
    cfg = MelConfig(num_channels=2)
    a = MelFrameMatrix(frames=np.array([[-5.0, 0.0], [1.0, 2.0]]), config=cfg)
    b = MelFrameMatrix(frames=np.array([[3.0, -1.0]]), config=cfg)
    spec = fit_bin_spec([a, b], num_bins=16)
    assert (spec.lo, spec.hi, spec.num_bins) == (-5.0, 3.0, 16)


def test_fit_bin_spec_widens_a_constant_range():
    spec = fit_bin_spec([np.full((3, 4), 2.0)], num_bins=8)
    assert spec.lo < 2.0 < spec.hi
    assert spec.hi - spec.lo < 1e-4


def test_fit_bin_spec_needs_frames():
    with pytest.raises(EmptyInputError):
        fit_bin_spec([], num_bins=16)
    with pytest.raises(EmptyInputError):
        fit_bin_spec([np.zeros((0, 4))], num_bins=16)


def test_discretize_formula_and_clamping():
    spec = BinSpec(num_bins=16, lo=0.0, hi=16.0)
    values = np.array([[0.0, 16.0, 8.0, -3.0, 99.0, 15.999]])
    assert discretize(values, spec).tolist() == [[0, 15, 8, 0, 15, 15]]


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_discretize_rejects_non_finite_arrays(bad):
    spec = BinSpec(num_bins=16, lo=0.0, hi=16.0)
    with pytest.raises(InvalidInputError):
        discretize(np.array([[1.0, bad]]), spec)
    with pytest.raises(InvalidInputError):
        fit_bin_spec([np.array([[0.0, bad]])], num_bins=16)


def test_dequantize_returns_bin_centres():
    spec = BinSpec(num_bins=16, lo=0.0, hi=16.0)
    mel = dequantize(np.array([[0, 15]], dtype=np.uint8), spec)
    assert mel.frames.tolist() == [[0.5, 15.5]]


def test_quantizer_fixed_point_and_half_bin_bound():
    spec = BinSpec(num_bins=16, lo=-23.0, hi=9.2)
    bins = np.arange(16, dtype=np.uint8)[None, :]
    assert np.array_equal(discretize(dequantize(bins, spec), spec), bins)

    values = np.linspace(spec.lo, spec.hi, 1001)[None, :]
    back = dequantize(discretize(values, spec), spec).frames
    assert np.max(np.abs(back - values)) <= spec.width / 2 + 1e-12


def test_discretize_is_monotone_and_keeps_frame_count():
    spec = BinSpec(num_bins=16, lo=-4.0, hi=4.0)
    values = np.sort(np.random.default_rng(0).uniform(-6, 6, size=(1, 500)))
    bins = discretize(values, spec)
    assert np.all(np.diff(bins[0].astype(int)) >= 0)
    frames = np.random.default_rng(1).uniform(-4, 4, size=(7, 80))
    assert len(dequantize(discretize(frames, spec), spec)) == 7


def test_dequantize_rejects_out_of_range_bins():
    with pytest.raises(InvalidBinError):
        dequantize(np.array([[16]]), BinSpec(num_bins=16, lo=0.0, hi=1.0))


def test_mel_frames_must_be_finite():
    with pytest.raises(InvalidInputError):
        MelFrameMatrix(frames=np.array([[np.nan, 0.0]]), config=MelConfig(num_channels=2))


def test_bin_spec_file_and_dump_roundtrip(tmp_path):
    spec = BinSpec(num_bins=16, lo=-3.5, hi=7.25)
    spec.save(tmp_path / "bins.yaml")
    assert BinSpec.load(tmp_path / "bins.yaml") == spec

    frames = np.random.default_rng(0).integers(0, 16, size=(5, 80)).astype(np.uint8)
    write_dump(tmp_path / "x.dmel", frames, num_bins=16, hop=0.025)
    dump = read_dump(tmp_path / "x.dmel")
    assert np.array_equal(dump.frames, frames)
    assert (dump.num_bins, dump.hop) == (16, 0.025)
    raw = (tmp_path / "x.dmel").read_bytes()
    assert raw[:4] == b"DMEL"


def test_corrupt_dump_is_a_format_error(tmp_path):
    path = tmp_path / "bad.dmel"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError):
        read_dump(path)
    write_dump(path, np.zeros((3, 4), dtype=np.uint8), num_bins=16, hop=0.025)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        read_dump(path)
