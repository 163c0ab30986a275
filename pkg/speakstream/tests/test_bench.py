import math

import numpy as np
import pandas as pd
import pytest

import speakstream.core.bench as bench
from speakstream.core.bench import (
    LatencyReport,
    bench_latency,
    first_phoneme_check,
    latency_sweep,
    run_pipeline,
)
from speakstream.core.dmel import BinSpec
from speakstream.core.engine import EngineConfig
from speakstream.core.errors import EmptyInputError, InvalidBinError, NoSpeechDetectedError
from speakstream.core.interleave import Scheme
from speakstream.core.vocoder import VocoderConfig, VocoderMode

SPEC = BinSpec(num_bins=4)
STREAMING = VocoderConfig(num_channels=4)
BUFFERED = VocoderConfig(num_channels=4, mode=VocoderMode.BUFFERED, buffer_frames=10)
SENTENCES = ["ab c dd a bc d", "ca b", "d dc ab ba c cc a"]


def test_first_phoneme_check():
    silence = np.zeros((3, 4), dtype=np.uint8)
    speech = np.array([[0, 0, 0, 0], [0, 2, 0, 0], [1, 1, 1, 1]], dtype=np.uint8)
    assert first_phoneme_check(speech) == 1
    assert first_phoneme_check(speech[1:]) == 0
    with pytest.raises(NoSpeechDetectedError):
        first_phoneme_check(silence)
    with pytest.raises(EmptyInputError):
        first_phoneme_check(np.zeros((0, 4), dtype=np.uint8))


def test_pipeline_stages_add_up(one_frame_params):
    run = run_pipeline(one_frame_params, EngineConfig(Scheme.S1, m=3, n=1), STREAMING, SPEC, SENTENCES[0].split())
    parts = [run.tts_latency, run.handoff, run.vocoder_latency, run.sink_handoff]
    assert all(p >= 0 for p in parts)
    assert math.isclose(sum(parts), run.total_latency, rel_tol=1e-9, abs_tol=1e-12)
    assert run.total_latency >= max(run.tts_latency, run.vocoder_latency)
    assert run.words_waited == 3
    assert run.frames == 6
    assert run.samples == 6 * 600
    assert run.first_phoneme == 0


def test_buffered_vocoder_flushes_short_streams(one_frame_params):
    run = run_pipeline(one_frame_params, EngineConfig(Scheme.S1, m=2, n=1), BUFFERED, SPEC, ["ab", "c"])
    assert run.frames == 2
    assert run.samples == 2 * 600
    assert not math.isnan(run.total_latency)


def test_bench_report_counts_runs(one_frame_params):
    report = bench_latency(one_frame_params, EngineConfig(Scheme.S1, m=2, n=1), STREAMING, SENTENCES, SPEC, runs=2, progress=False)
    assert len(report.samples) == 6
    assert sorted(report.samples["run"].unique()) == [0, 1]
    assert report.samples["words_waited"].tolist() == [2, 2, 2] * 2
    summary = report.summary().set_index("stage")
    assert summary.loc["total_latency", "mean_ms"] >= summary.loc["tts_latency", "mean_ms"]
    assert report.first_phoneme_fraction == 1.0
    assert report.vocoder_frame_latency == 1


def test_failed_sentences_are_recorded(never_stop_params):
    config = EngineConfig(Scheme.S1, m=1, n=1, max_frames_per_segment=2)
    report = bench_latency(never_stop_params, config, STREAMING, ["ab c"], SPEC, progress=False)
    assert report.samples["error"].tolist() == ["segment_overrun"]
    assert report.ok.empty
    assert math.isnan(report.first_phoneme_fraction)


def test_report_arithmetic():
    samples = pd.DataFrame(
        {
            "tts_latency": [0.010, 0.030],
            "handoff": [0.0, 0.0],
            "vocoder_latency": [0.002, 0.002],
            "sink_handoff": [0.0, 0.0],
            "total_latency": [0.012, 0.032],
            "mean_frame_time": [0.004, 0.006],
            "first_phoneme": [0, 2],
            "error": [None, None],
        }
    )
    report = LatencyReport(samples=samples, m=3, vocoder_mode="Streaming", vocoder_frame_latency=1)
    summary = report.summary().set_index("stage")
    assert math.isclose(summary.loc["tts_latency", "mean_ms"], 20.0)
    assert math.isclose(summary.loc["tts_latency", "std_ms"], 10.0)
    assert math.isclose(report.projected_buffered_latency(10), 0.05)
    assert report.first_phoneme_fraction == 0.5


def test_sweep_has_one_row_per_window_and_mode(one_frame_params):
    sweep = latency_sweep(
        one_frame_params, EngineConfig(Scheme.S1, m=3, n=1), [STREAMING, BUFFERED], [1, 2], SENTENCES[:2], SPEC,
        progress=False,
    )
    assert list(zip(sweep["m"], sweep["vocoder"])) == [(1, "Streaming"), (1, "Buffered"), (2, "Streaming"), (2, "Buffered")]
    assert sweep["frame_latency"].tolist() == [1, 10, 1, 10]
    assert (sweep["failures"] == 0).all()


def test_streaming_vocoder_answers_before_buffered(one_frame_params):
    words = "a b c d ab ba cd dc aa bb cc dd".split()
    config = EngineConfig(Scheme.S1, m=1, n=1)

    def median_latency(vocoder):
        runs = [run_pipeline(one_frame_params, config, vocoder, SPEC, words) for _ in range(3)]
        assert all(r.frames == len(words) for r in runs)
        return float(np.median([r.vocoder_latency for r in runs]))

    assert median_latency(STREAMING) < median_latency(BUFFERED)


def test_vocoder_failure_does_not_stall_the_engine(one_frame_params, monkeypatch):
    def broken(state, frame, spec):
        raise InvalidBinError("corrupt frame")

    monkeypatch.setattr(bench, "push_dmel", broken)
    words = "a b c d ab ba cd dc".split()
    with pytest.raises(InvalidBinError):
        run_pipeline(one_frame_params, EngineConfig(Scheme.S1, m=1, n=1), STREAMING, SPEC, words, queue_size=1)
