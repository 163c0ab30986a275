from __future__ import annotations

import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from .corpus import silence_frame
from .dmel import BinSpec
from .engine import EngineConfig, EngineEvent, EventKind, run_stream
from .errors import EmptyInputError, NoSpeechDetectedError, SpeakStreamError
from .model import Params
from .utils import mean_std
from .vocoder import VocoderConfig, VocoderState, finalize, push_dmel

logger = logging.getLogger(__name__)

STAGES = ("tts_latency", "handoff", "vocoder_latency", "sink_handoff", "total_latency")
_END = object()


def first_phoneme_check(frames: np.ndarray, silence: Optional[np.ndarray] = None) -> int:
    """Index of the first frame that differs from the silence frame."""
    x = np.asarray(frames)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInputError("no frames to check")
    ref = silence_frame(x.shape[1]) if silence is None else np.asarray(silence)
    speech = np.flatnonzero(np.any(x != ref[None, :], axis=1))
    if speech.size == 0:
        raise NoSpeechDetectedError(f"all {x.shape[0]} frames are silence")
    return int(speech[0])


@dataclass
class RunLatency:
    sentence: int
    run: int
    words: int
    words_waited: int = 0
    tts_latency: float = math.nan  # FirstWordIn -> FirstFrameOut
    handoff: float = math.nan  # FirstFrameOut -> vocoder receives it
    vocoder_latency: float = math.nan  # first frame in -> first chunk out
    sink_handoff: float = math.nan  # first chunk out -> sink receives it
    total_latency: float = math.nan  # FirstWordIn -> first audio at the sink
    frames: int = 0
    samples: int = 0
    mean_frame_time: float = math.nan  # seconds between consecutive frames
    first_phoneme: Optional[int] = None
    error: Optional[str] = None


@dataclass
class LatencyReport:
    samples: pd.DataFrame  # one RunLatency per row
    m: int
    vocoder_mode: str
    vocoder_frame_latency: int

    @property
    def ok(self) -> pd.DataFrame:
        return self.samples[self.samples["error"].isna()]

    def summary(self) -> pd.DataFrame:
        """Mean and standard deviation per stage, in milliseconds."""
        rows = []
        for stage in STAGES:
            mean, std = mean_std(self.ok[stage].dropna())
            rows.append({"stage": stage, "mean_ms": mean * 1e3, "std_ms": std * 1e3})
        return pd.DataFrame(rows)

    def projected_buffered_latency(self, buffer_frames: int = 10) -> float:
        """Seconds a k-frame vocoder waits for frames at the measured generation rate."""
        return buffer_frames * float(self.ok["mean_frame_time"].mean())

    @property
    def first_phoneme_fraction(self) -> float:
        ok = self.ok
        if ok.empty:
            return math.nan
        return float((ok["first_phoneme"] == 0).mean())


def _words_of(sentence) -> List[str]:
    return sentence.split() if isinstance(sentence, str) else list(sentence)


def run_pipeline(
    params: Params,
    engine_config: EngineConfig,
    vocoder_config: VocoderConfig,
    bin_spec: BinSpec,
    words: Sequence[str],
    queue_size: int = 256,
    clock: Callable[[], float] = time.perf_counter,
) -> RunLatency:
    """One sentence through word source -> engine -> vocoder -> sink.

    Each stage runs in its own thread; stages are joined by bounded queues.
    Words arrive instantaneously.
    """
    frames_q: "queue.Queue[object]" = queue.Queue(maxsize=queue_size)
    audio_q: "queue.Queue[object]" = queue.Queue(maxsize=queue_size)
    marks: Dict[str, float] = {}
    failures: List[BaseException] = []
    total_samples = [0]

    def on_event(event: EngineEvent) -> None:
        if event.kind is EventKind.FRAME_OUT:
            frames_q.put(event.frame)

    def vocoder_stage() -> None:
        state = VocoderState.new(vocoder_config)
        ended = False
        try:
            while True:
                item = frames_q.get()
                if item is _END:
                    ended = True
                    tail = finalize(state)
                    if tail.size:
                        marks.setdefault("chunk_out", clock())
                        audio_q.put(tail)
                    break
                marks.setdefault("frame_in", clock())
                chunk = push_dmel(state, item, bin_spec)
                if chunk.size:
                    marks.setdefault("chunk_out", clock())
                    audio_q.put(chunk)
        except BaseException as exc:
            failures.append(exc)
            # consume until the engine is done so its puts never block
            while not ended:
                ended = frames_q.get() is _END
        finally:
            audio_q.put(_END)

    def sink_stage() -> None:
        while True:
            item = audio_q.get()
            if item is _END:
                return
            marks.setdefault("audio_out", clock())
            total_samples[0] += len(item)

    workers = [
        threading.Thread(target=vocoder_stage, name="vocoder", daemon=True),
        threading.Thread(target=sink_stage, name="sink", daemon=True),
    ]
    for w in workers:
        w.start()
    try:
        result = run_stream(params, engine_config, list(words), listener=on_event, clock=clock)
    finally:
        frames_q.put(_END)
        for w in workers:
            w.join()
    if failures:
        raise failures[0]

    ev = {e.kind: e for e in reversed(result.events)}
    frame_times = [e.timestamp for e in result.events if e.kind is EventKind.FRAME_OUT]
    run = RunLatency(sentence=-1, run=-1, words=len(words), frames=len(frame_times), samples=total_samples[0])
    run.words_waited = result.report.words_waited
    run.tts_latency = result.report.tts_latency
    if EventKind.FIRST_FRAME_OUT in ev and {"frame_in", "chunk_out", "audio_out"} <= marks.keys():
        first_out = ev[EventKind.FIRST_FRAME_OUT].timestamp
        run.handoff = marks["frame_in"] - first_out
        run.vocoder_latency = marks["chunk_out"] - marks["frame_in"]
        run.sink_handoff = marks["audio_out"] - marks["chunk_out"]
        run.total_latency = marks["audio_out"] - ev[EventKind.FIRST_WORD_IN].timestamp
    if len(frame_times) > 1:
        run.mean_frame_time = (frame_times[-1] - frame_times[0]) / (len(frame_times) - 1)
    if len(result.frames):
        try:
            run.first_phoneme = first_phoneme_check(result.frames)
        except NoSpeechDetectedError:
            run.first_phoneme = None
    return run


def bench_latency(
    params: Params,
    engine_config: EngineConfig,
    vocoder_config: VocoderConfig,
    sentences: Sequence,
    bin_spec: BinSpec,
    runs: int = 1,
    progress: bool = True,
) -> LatencyReport:
    """Per-stage first-output latency over ``runs`` passes of ``sentences``."""
    if not sentences:
        raise EmptyInputError("no benchmark sentences")
    rows = []
    jobs = [(r, s) for r in range(runs) for s in range(len(sentences))]
    for r, s in tqdm(jobs, desc=f"bench m={engine_config.m} {vocoder_config.mode.value}", disable=not progress):
        words = _words_of(sentences[s])
        try:
            run = run_pipeline(params, engine_config, vocoder_config, bin_spec, words)
        except SpeakStreamError as exc:
            run = RunLatency(sentence=s, run=r, words=len(words), error=exc.code)
            logger.warning("sentence %d run %d failed: %s", s, r, exc)
        run.sentence, run.run = s, r
        rows.append(asdict(run))
    return LatencyReport(
        samples=pd.DataFrame(rows),
        m=engine_config.m,
        vocoder_mode=vocoder_config.mode.value,
        vocoder_frame_latency=vocoder_config.frame_latency,
    )


def latency_sweep(
    params: Params,
    engine_config: EngineConfig,
    vocoder_configs: Sequence[VocoderConfig],
    windows: Sequence[int],
    sentences: Sequence,
    bin_spec: BinSpec,
    runs: int = 1,
    progress: bool = True,
) -> pd.DataFrame:
    """One summary row per (window m, vocoder mode)."""
    rows = []
    for m in windows:
        engine = replace(engine_config, m=m, n=min(engine_config.n, m))
        for voc in vocoder_configs:
            report = bench_latency(params, engine, voc, sentences, bin_spec, runs=runs, progress=progress)
            stats = report.summary().set_index("stage")
            row = {"m": m, "vocoder": voc.mode.value, "frame_latency": report.vocoder_frame_latency}
            for stage in STAGES:
                name = stage.replace("_latency", "")
                row[f"{name}_mean_ms"] = stats.loc[stage, "mean_ms"]
                row[f"{name}_std_ms"] = stats.loc[stage, "std_ms"]
            row["projected_buffered_ms"] = report.projected_buffered_latency() * 1e3
            row["first_phoneme_fraction"] = report.first_phoneme_fraction
            row["failures"] = int(report.samples["error"].notna().sum())
            rows.append(row)
    return pd.DataFrame(rows)
