from pathlib import Path

import pytest

import config as project_config
from speakstream.app.settings import Settings
from speakstream.core.errors import InvalidConfigError
from speakstream.core.interleave import Scheme
from speakstream.core.vocoder import VocoderMode

EXAMPLE = Path(__file__).resolve().parents[1] / "examples" / "small_config.yaml"


def test_defaults_from_repository_config():
    s = Settings.from_config(project_config.CFG)
    assert s.mel.num_channels == s.model.num_channels == s.vocoder.num_channels == 80
    assert s.engine.silence_prompt_frames == 12
    assert s.eval_silence_prompt_frames == 0
    assert s.engine.frame_cap == 20 * 3 * 3 * 5
    assert s.train.interleave.scheme is Scheme.S1
    assert s.vocoder.mode is VocoderMode.STREAMING
    assert s.dev_utterances == 100


def test_bundled_small_config():
    s = Settings.from_config(project_config.load(EXAMPLE))
    assert (s.corpus.alphabet, s.corpus.num_channels, s.corpus.num_bins) == ("ab", 8, 4)
    assert s.model.alphabet == "ab"
    assert (s.train.interleave.m, s.engine.m) == (2, 2)
    assert s.engine.frame_cap == 40


def test_seed_override_reaches_every_stage():
    s = Settings.from_config(project_config.CFG, seed=7)
    assert s.corpus.seed == s.train.seed == s.engine.seed == 7


def test_bad_sections_are_rejected():
    with pytest.raises(InvalidConfigError):
        Settings.from_config({"train": {"stepz": 3}})
    with pytest.raises(InvalidConfigError):
        Settings.from_config({"engine": {"scheme": "S3"}})
    with pytest.raises(InvalidConfigError):
        Settings.from_config({"engine": {"m": 2, "n": 3}})


def test_missing_sections_fall_back_to_defaults():
    s = Settings.from_config({})
    assert s.corpus.alphabet == "abcdefgh"
    assert s.bench == {}
