"""Typed run settings built from the YAML configuration sections."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Any, Dict, Optional, Type, TypeVar

from config import section
from speakstream.core.corpus import CorpusSpec
from speakstream.core.dmel import BinSpec, MelConfig
from speakstream.core.engine import EngineConfig
from speakstream.core.errors import InvalidConfigError
from speakstream.core.interleave import InterleaveConfig, Scheme
from speakstream.core.model import ModelConfig
from speakstream.core.trainer import TrainConfig
from speakstream.core.utils import frames_for_duration
from speakstream.core.vocoder import VocoderConfig, VocoderMode

T = TypeVar("T")


def _known(cls: Type[T], values: Dict[str, Any]) -> Dict[str, Any]:
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise InvalidConfigError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    return values


def _scheme(value: Any) -> Scheme:
    try:
        return Scheme(str(value))
    except ValueError as exc:
        raise InvalidConfigError(f"unknown scheme {value!r}") from exc


@dataclass(frozen=True)
class Settings:
    mel: MelConfig
    bins: BinSpec
    corpus: CorpusSpec
    dev_utterances: int
    model: ModelConfig
    train: TrainConfig
    engine: EngineConfig
    eval_max_window: int
    eval_silence_prompt_frames: int
    vocoder: VocoderConfig
    bench: Dict[str, Any]

    @classmethod
    def from_config(cls, cfg: Dict[str, Any], seed: Optional[int] = None) -> "Settings":
        mel = MelConfig(**_known(MelConfig, section(cfg, "mel"))).validate()
        bins = BinSpec(num_bins=int(section(cfg, "bins").get("num_bins", 16))).validate()

        corpus_raw = section(cfg, "corpus")
        dev = int(corpus_raw.pop("dev_utterances", 100))
        for key in ("words_per_utterance", "chars_per_word"):
            if key in corpus_raw:
                corpus_raw[key] = tuple(int(v) for v in corpus_raw[key])
        corpus = CorpusSpec(
            **_known(CorpusSpec, corpus_raw), num_channels=mel.num_channels, num_bins=bins.num_bins
        ).validate()

        model = ModelConfig(
            **_known(ModelConfig, section(cfg, "model")),
            alphabet=corpus.alphabet,
            num_channels=mel.num_channels,
            num_bins=bins.num_bins,
        ).validate()

        train_raw = section(cfg, "train")
        interleave = InterleaveConfig(
            _scheme(train_raw.pop("scheme", "S1")), int(train_raw.pop("m", 3)), int(train_raw.pop("n", 1))
        )
        train = TrainConfig(**_known(TrainConfig, train_raw), interleave=interleave)

        engine_raw = section(cfg, "engine")
        prompt = float(engine_raw.pop("silence_prompt", 0.3))
        engine = EngineConfig(
            scheme=_scheme(engine_raw.pop("scheme", "S1")),
            silence_prompt_frames=frames_for_duration(prompt, mel.hop),
            frames_per_char_base=corpus.max_frames_per_char,
            max_chars_per_word=corpus.chars_per_word[1],
            num_channels=mel.num_channels,
            num_bins=bins.num_bins,
            **_known(EngineConfig, engine_raw),
        )

        eval_raw = section(cfg, "eval")
        voc_raw = section(cfg, "vocoder")
        mode = VocoderMode(str(voc_raw.pop("mode", "Streaming")))
        vocoder = VocoderConfig(
            mode=mode, hop=mel.hop, num_channels=mel.num_channels, **_known(VocoderConfig, voc_raw)
        ).validate()

        settings = cls(
            mel=mel,
            bins=bins,
            corpus=corpus,
            dev_utterances=dev,
            model=model,
            train=train.validate(),
            engine=engine.validate(),
            eval_max_window=int(eval_raw.get("max_window", 6)),
            eval_silence_prompt_frames=frames_for_duration(float(eval_raw.get("silence_prompt", 0.0)), mel.hop),
            vocoder=vocoder,
            bench=section(cfg, "bench"),
        )
        return settings.with_seed(seed) if seed is not None else settings

    def with_seed(self, seed: int) -> "Settings":
        return replace(
            self,
            corpus=replace(self.corpus, seed=seed),
            train=replace(self.train, seed=seed),
            engine=replace(self.engine, seed=seed),
        )
