import numpy as np
import pytest

from speakstream.core.bench import bench_latency
from speakstream.core.corpus import CorpusSpec, generate_corpus
from speakstream.core.dmel import BinSpec
from speakstream.core.engine import EngineConfig, run_offline, run_stream
from speakstream.core.errors import SpeakStreamError
from speakstream.core.interleave import InterleaveConfig, Scheme
from speakstream.core.model import ModelConfig
from speakstream.core.trainer import TrainConfig, evaluate, train
from speakstream.core.vocoder import VocoderConfig

pytestmark = pytest.mark.slow

SPEC = CorpusSpec(
    alphabet="ab", num_channels=8, num_bins=4, words_per_utterance=(2, 4), chars_per_word=(1, 2), num_utterances=64
)
MODEL = ModelConfig(
    num_layers=2, model_dim=32, num_heads=4, ffn_dim=64, max_positions=256, alphabet="ab", num_channels=8, num_bins=4
)


def outcome(run):
    """(error code or None, frames)."""
    try:
        return None, run()
    except SpeakStreamError as exc:
        return exc.code, None


def test_train_stream_and_benchmark(tmp_path):
    corpus = generate_corpus(SPEC)
    train_set, dev_set = corpus[:56], corpus[56:]
    config = TrainConfig(steps=150, batch=8, warmup_steps=10, peak_lr=3e-3, log_every=0, interleave=InterleaveConfig(Scheme.S1, 2, 1))
    result = train(train_set, MODEL, config, out_dir=tmp_path, progress=False)
    head, tail = result.trace["loss"].iloc[:10].mean(), result.trace["loss"].iloc[-10:].mean()
    assert tail < 0.8 * head

    engine = EngineConfig(Scheme.S1, m=2, n=1, silence_prompt_frames=0, max_frames_per_segment=30)
    for utt in dev_set:
        offline = outcome(lambda: run_offline(result.params, engine, utt.words))
        streamed = outcome(lambda: run_stream(result.params, engine, [(0.002, w) for w in utt.words]).frames)
        assert offline[0] == streamed[0], utt.id
        if offline[0] is None:
            assert np.array_equal(streamed[1], offline[1]), utt.id

    table = evaluate(result.params, dev_set, [InterleaveConfig(Scheme.S1, 2, 1)], SPEC, engine_defaults=engine, progress=False).table
    assert set(table["scheme"]) == {"GroundTruth", "S1"}

    report = bench_latency(
        result.params, engine, VocoderConfig(num_channels=8), [u.words for u in dev_set[:3]], BinSpec(num_bins=4),
        progress=False,
    )
    assert len(report.samples) == 3
