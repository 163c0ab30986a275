"""One model per (scheme, m, n) cell at the default corpus scale.

Runs for a long time; selected with ``-m slow``.
"""
from dataclasses import replace

import numpy as np
import pytest

import config as project_config
from speakstream.app.settings import Settings
from speakstream.core.bench import bench_latency
from speakstream.core.corpus import generate_corpus
from speakstream.core.engine import run_offline, run_stream
from speakstream.core.interleave import InterleaveConfig, Scheme
from speakstream.core.trainer import evaluate, train

pytestmark = pytest.mark.slow

SETTINGS = Settings.from_config(project_config.CFG)
LOOKAHEAD = InterleaveConfig(Scheme.S1, 3, 1)
NO_LOOKAHEAD = InterleaveConfig(Scheme.S1, 1, 1)
S1_HOP2 = InterleaveConfig(Scheme.S1, 3, 2)
S2_HOP2 = InterleaveConfig(Scheme.S2, 3, 2)
CELLS = (LOOKAHEAD, NO_LOOKAHEAD, S1_HOP2, S2_HOP2)


@pytest.fixture(scope="module")
def corpus():
    s = SETTINGS
    utts = generate_corpus(replace(s.corpus, num_utterances=s.corpus.num_utterances + s.dev_utterances), workers=4)
    return utts[: s.corpus.num_utterances], utts[s.corpus.num_utterances :]


@pytest.fixture(scope="module")
def cells(corpus):
    """(params, table row) for every cell."""
    train_set, dev_set = corpus
    engine = replace(SETTINGS.engine, silence_prompt_frames=SETTINGS.eval_silence_prompt_frames)
    out = {}
    for cell in CELLS:
        config = replace(SETTINGS.train, interleave=cell, eval_every=0, log_every=0, workers=4)
        params = train(train_set, SETTINGS.model, config, progress=False).params
        table = evaluate(params, dev_set, [cell], SETTINGS.corpus, engine_defaults=engine, workers=4, progress=False).table
        out[cell] = (params, table[table["scheme"] == cell.scheme.value].iloc[0])
    return out


def test_lookahead_model_reads_back(cells):
    row = cells[LOOKAHEAD][1]
    assert row["failures"] == 0
    assert row["cer"] < 0.05


def test_equal_window_and_hop_is_worse(cells):
    assert cells[NO_LOOKAHEAD][1]["cer"] >= cells[LOOKAHEAD][1]["cer"] + 0.02


def test_scheme1_not_worse_than_scheme2(cells):
    assert cells[S1_HOP2][1]["cer"] <= cells[S2_HOP2][1]["cer"]


def test_trained_stream_matches_offline(cells, corpus):
    params = cells[LOOKAHEAD][0]
    engine = replace(SETTINGS.engine, scheme=Scheme.S1, m=3, n=1)
    for utt in corpus[1][:50]:
        offline = run_offline(params, engine, utt.words)
        streamed = run_stream(params, engine, [(0.001, w) for w in utt.words])
        assert np.array_equal(streamed.frames, offline), utt.id


def test_silence_prompted_synthesis_speaks_from_the_first_frame(cells, corpus):
    params = cells[LOOKAHEAD][0]
    engine = replace(SETTINGS.engine, scheme=Scheme.S1, m=3, n=1)
    sentences = [u.words for u in corpus[1][: int(SETTINGS.bench.get("sentences", 25))]]
    report = bench_latency(params, engine, SETTINGS.vocoder, sentences, SETTINGS.bins, progress=False)
    assert not report.ok.empty
    assert report.first_phoneme_fraction >= 0.9
