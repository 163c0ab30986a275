"""Dual-streaming inference: words in, dMel frames out.

Segment ``i`` is generated as soon as the words its text window needs have
arrived (``n(i-1)+m`` words) or, once the text length ``t`` is known, for
every remaining ``i <= ceil(t/n)``. Each segment prefills its text tokens
into the kv-cache, feeds SpeechBOS and decodes frames one step at a time
until the stop head says Eos; SpeechEOS is then written to the cache.
"""
from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Final, FrozenSet, Iterable, List, Optional, Tuple, Union

import numpy as np

from .corpus import silence_frame
from .errors import (
    EmptyInputError,
    InvalidConfigError,
    InvalidPhaseError,
    SegmentOverrunError,
)
from .interleave import Scheme, Token, TokenKind, segment_counts, text_window, word_tokens
from .kv_cache import KvCache
from .model import Params, Prediction, forward, generate_step
from .utils import frames_for_duration

logger = logging.getLogger(__name__)

DEFAULT_SILENCE_PROMPT: Final[float] = 0.300  # seconds


class Phase(str, Enum):
    AWAITING_TEXT = "AwaitingText"
    GENERATING = "Generating"
    FLUSHING = "Flushing"
    DONE = "Done"


_TRANSITIONS: Final[Dict[Phase, FrozenSet[Phase]]] = {
    Phase.AWAITING_TEXT: frozenset({Phase.GENERATING, Phase.FLUSHING}),
    Phase.GENERATING: frozenset({Phase.AWAITING_TEXT, Phase.FLUSHING}),
    Phase.FLUSHING: frozenset({Phase.GENERATING, Phase.DONE}),
    Phase.DONE: frozenset(),
}


class EventKind(str, Enum):
    FIRST_WORD_IN = "FirstWordIn"
    SEGMENT_START = "SegmentStart"
    FRAME_OUT = "FrameOut"
    SEGMENT_EOS = "SegmentEos"
    FIRST_FRAME_OUT = "FirstFrameOut"
    STREAM_DONE = "StreamDone"


@dataclass(frozen=True)
class EngineEvent:
    kind: EventKind
    timestamp: float
    segment: Optional[int] = None
    frame: Optional[np.ndarray] = None
    words_received: int = 0


@dataclass(frozen=True)
class EngineConfig:
    scheme: Scheme = Scheme.S1
    m: int = 3
    n: int = 1
    max_frames_per_segment: Optional[int] = None
    silence_prompt_frames: int = 12  # 300 ms at a 25 ms hop
    temperature: float = 0.0  # 0 = greedy
    seed: int = 0
    frames_per_char_base: int = 3
    max_chars_per_word: int = 5
    num_channels: Optional[int] = None
    num_bins: Optional[int] = None

    def validate(self) -> "EngineConfig":
        if self.scheme not in (Scheme.S1, Scheme.S2):
            raise InvalidConfigError(f"the engine streams S1 or S2, got {self.scheme}")
        return self.validate_limits()

    def validate_limits(self) -> "EngineConfig":
        """Checks shared by streaming and the non-streaming decode."""
        if self.m < 1 or not 1 <= self.n <= self.m:
            raise InvalidConfigError(f"need 1 <= n <= m, got m={self.m} n={self.n}")
        if self.max_frames_per_segment is not None and self.max_frames_per_segment < 1:
            raise InvalidConfigError("max_frames_per_segment must be >= 1")
        if self.silence_prompt_frames < 0:
            raise InvalidConfigError("silence_prompt_frames must be >= 0")
        if self.temperature < 0:
            raise InvalidConfigError("temperature must be >= 0")
        return self

    @property
    def frame_cap(self) -> int:
        if self.max_frames_per_segment is not None:
            return self.max_frames_per_segment
        return 20 * self.frames_per_char_base * self.m * self.max_chars_per_word

    @classmethod
    def with_prompt_duration(cls, seconds: float, hop: float, **kwargs) -> "EngineConfig":
        return cls(silence_prompt_frames=frames_for_duration(seconds, hop), **kwargs)


@dataclass
class EngineState:
    params: Params
    config: EngineConfig
    cache: KvCache
    phase: Phase = Phase.AWAITING_TEXT
    words: List[str] = field(default_factory=list)
    total: Optional[int] = None  # t, once end_of_text has been called
    segment: int = 1  # next segment to generate
    events: List[EngineEvent] = field(default_factory=list)
    frames: List[np.ndarray] = field(default_factory=list)
    listener: Optional[Callable[[EngineEvent], None]] = None
    poll: Optional[Callable[["EngineState"], None]] = None  # called after every frame
    clock: Callable[[], float] = time.perf_counter
    rng: Optional[np.random.Generator] = None

    @property
    def segments_expected(self) -> Optional[int]:
        if self.total is None:
            return None
        return segment_counts(self.config.scheme, self.config.m, self.config.n, self.total)[1]


def _log(state: EngineState, kind: EventKind, timestamp: Optional[float] = None, **kwargs) -> EngineEvent:
    event = EngineEvent(
        kind=kind,
        timestamp=state.clock() if timestamp is None else timestamp,
        words_received=len(state.words),
        **kwargs,
    )
    state.events.append(event)
    if state.listener is not None:
        state.listener(event)
    return event


def _set_phase(state: EngineState, phase: Phase) -> None:
    if phase is state.phase:
        return
    if phase not in _TRANSITIONS[state.phase]:
        raise InvalidPhaseError(f"cannot go from {state.phase.value} to {phase.value}")
    state.phase = phase


def start(params: Params, config: EngineConfig, clock: Callable[[], float] = time.perf_counter) -> EngineState:
    """Fresh engine with the silence prompt already in the kv-cache."""
    return _prepare(params, config.validate(), clock)


def _prepare(params: Params, config: EngineConfig, clock: Callable[[], float]) -> EngineState:
    model = params.config
    if config.num_channels is not None and config.num_channels != model.num_channels:
        raise InvalidConfigError(f"model has {model.num_channels} channels, engine expects {config.num_channels}")
    if config.num_bins is not None and config.num_bins != model.num_bins:
        raise InvalidConfigError(f"model has {model.num_bins} bins, engine expects {config.num_bins}")
    if config.silence_prompt_frames + 2 > model.max_positions:
        raise InvalidConfigError("silence prompt does not fit in max_positions")

    state = EngineState(
        params=params,
        config=config,
        cache=KvCache(model),
        clock=clock,
        rng=np.random.default_rng(config.seed) if config.temperature > 0 else None,
    )
    if config.silence_prompt_frames:
        silence = silence_frame(model.num_channels)
        prompt = [Token(TokenKind.SPEECH_BOS, 0)]
        prompt += [Token(TokenKind.SPEECH_FRAME, 0, frame=silence) for _ in range(config.silence_prompt_frames)]
        prompt.append(Token(TokenKind.SPEECH_EOS, 0))
        forward(params, prompt, state.cache)
    return state


def _ready(state: EngineState) -> bool:
    expected = state.segments_expected
    if expected is not None:
        return state.segment <= expected
    cfg = state.config
    return len(state.words) >= cfg.n * (state.segment - 1) + cfg.m


def _generate_segment(state: EngineState) -> None:
    cfg, params, i = state.config, state.params, state.segment
    t = state.total if state.total is not None else len(state.words)
    window = text_window(cfg.scheme, cfg.m, cfg.n, i, t)
    _set_phase(state, Phase.GENERATING)
    _log(state, EventKind.SEGMENT_START, segment=i)
    logger.debug("segment %d: words %s", i, list(window))

    text, _ = word_tokens(state.words, window, i)
    if text:
        forward(params, text, state.cache)
    last = Token(TokenKind.SPEECH_BOS, i)
    emitted = 0
    while True:
        pred: Prediction = generate_step(params, state.cache, last, cfg.temperature, state.rng)
        if pred.eos:
            break
        emitted += 1
        if emitted > cfg.frame_cap:
            raise SegmentOverrunError(i, cfg.frame_cap)
        state.frames.append(pred.frame)
        ts = state.clock()
        _log(state, EventKind.FRAME_OUT, timestamp=ts, segment=i, frame=pred.frame)
        if len(state.frames) == 1:
            _log(state, EventKind.FIRST_FRAME_OUT, timestamp=ts, segment=i, frame=pred.frame)
        last = Token(TokenKind.SPEECH_FRAME, i, frame=pred.frame)
        if state.poll is not None:
            state.poll(state)

    forward(params, [Token(TokenKind.SPEECH_EOS, i)], state.cache)
    _log(state, EventKind.SEGMENT_EOS, segment=i)
    logger.debug("segment %d: %d frames", i, emitted)
    state.segment += 1
    _set_phase(state, Phase.FLUSHING if state.total is not None else Phase.AWAITING_TEXT)


def _advance(state: EngineState) -> None:
    while _ready(state):
        _generate_segment(state)
    if state.total is not None:
        _set_phase(state, Phase.FLUSHING)
        _log(state, EventKind.STREAM_DONE)
        _set_phase(state, Phase.DONE)


def _since(state: EngineState, mark: int) -> List[EngineEvent]:
    return state.events[mark:]


def push_word(state: EngineState, word: str) -> List[EngineEvent]:
    """Buffer one word and generate every segment it unblocks.

    While a segment is being generated (a call from ``poll`` or a
    listener), the word is only buffered.
    """
    if state.phase is Phase.DONE or state.total is not None:
        raise InvalidPhaseError("text has already ended")
    mark = len(state.events)
    state.words.append(word)
    if len(state.words) == 1:
        _log(state, EventKind.FIRST_WORD_IN)
    if state.phase is Phase.GENERATING:
        return _since(state, mark)
    _advance(state)
    return _since(state, mark)


def end_of_text(state: EngineState) -> List[EngineEvent]:
    """Fix t and generate the remaining segments, then finish the stream."""
    if state.phase is Phase.DONE or state.total is not None:
        raise InvalidPhaseError("end_of_text was already called")
    if not state.words:
        raise EmptyInputError("no words were pushed")
    mark = len(state.events)
    state.total = len(state.words)
    if state.phase is Phase.GENERATING:
        return _since(state, mark)
    _set_phase(state, Phase.FLUSHING)
    _advance(state)
    return _since(state, mark)


def emitted_frames(state: EngineState) -> np.ndarray:
    if not state.frames:
        return np.zeros((0, state.params.config.num_channels), dtype=np.uint8)
    return np.vstack(state.frames).astype(np.uint8)


# ------------------------------- Drivers --------------------------------- #
@dataclass
class StreamReport:
    tts_latency: float  # FirstWordIn -> FirstFrameOut, seconds
    words_waited: int  # words received when the first frame came out
    frames_emitted: int
    segments: int
    segment_times: List[float]  # SegmentStart -> SegmentEos per segment

    @classmethod
    def from_events(cls, events: List[EngineEvent]) -> "StreamReport":
        first_in = next((e for e in events if e.kind is EventKind.FIRST_WORD_IN), None)
        first_out = next((e for e in events if e.kind is EventKind.FIRST_FRAME_OUT), None)
        starts = {e.segment: e.timestamp for e in events if e.kind is EventKind.SEGMENT_START}
        ends = {e.segment: e.timestamp for e in events if e.kind is EventKind.SEGMENT_EOS}
        latency = float("nan")
        if first_in is not None and first_out is not None:
            latency = first_out.timestamp - first_in.timestamp
        return cls(
            tts_latency=latency,
            words_waited=first_out.words_received if first_out is not None else 0,
            frames_emitted=sum(1 for e in events if e.kind is EventKind.FRAME_OUT),
            segments=len(ends),
            segment_times=[ends[i] - starts[i] for i in sorted(ends)],
        )


@dataclass
class StreamResult:
    frames: np.ndarray
    events: List[EngineEvent]
    report: StreamReport


WordSource = Iterable[Union[str, Tuple[float, str]]]
_END = object()


def run_offline(params: Params, config: EngineConfig, words: Iterable[str]) -> np.ndarray:
    """Frames with all text known up front; same forward calls as streaming."""
    state = start(params, config)
    state.words.extend(words)
    end_of_text(state)
    return emitted_frames(state)


def run_nonstreaming(params: Params, config: EngineConfig, words: Iterable[str]) -> np.ndarray:
    """Baseline decode: [TextBOS, all text, TextEOS, SpeechBOS] then frames until Eos.

    ``scheme``, ``m`` and ``n`` are ignored. Without ``max_frames_per_segment``
    the cap scales with the word count instead of the window.
    """
    words = list(words)
    if not words:
        raise EmptyInputError("no words to synthesize")
    state = _prepare(params, config.validate_limits(), time.perf_counter)
    state.words.extend(words)
    text, _ = word_tokens(words, range(len(words)), 1)
    forward(params, [Token(TokenKind.TEXT_BOS, 1)] + text + [Token(TokenKind.TEXT_EOS, 1)], state.cache)
    cap = config.max_frames_per_segment or 20 * config.frames_per_char_base * config.max_chars_per_word * len(words)
    last = Token(TokenKind.SPEECH_BOS, 1)
    while True:
        pred = generate_step(params, state.cache, last, config.temperature, state.rng)
        if pred.eos:
            break
        if len(state.frames) >= cap:
            raise SegmentOverrunError(1, cap)
        state.frames.append(pred.frame)
        last = Token(TokenKind.SPEECH_FRAME, 1, frame=pred.frame)
    logger.debug("non-streaming decode: %d words, %d frames", len(words), len(state.frames))
    return emitted_frames(state)


def run_stream(
    params: Params,
    config: EngineConfig,
    word_source: WordSource,
    listener: Optional[Callable[[EngineEvent], None]] = None,
    queue_size: int = 64,
    clock: Callable[[], float] = time.perf_counter,
) -> StreamResult:
    """Drive the engine from a timed word source running in its own thread.

    ``word_source`` yields words or ``(delay_seconds, word)`` pairs; the
    producer sleeps for the delay before handing the word over. Words that
    arrive while a segment is being generated are picked up between frames.
    """
    inbox: "queue.Queue[object]" = queue.Queue(maxsize=queue_size)
    failure: List[BaseException] = []

    def produce() -> None:
        try:
            for item in word_source:
                delay, word = item if isinstance(item, tuple) else (0.0, item)
                if delay > 0:
                    time.sleep(delay)
                inbox.put(word)
        except BaseException as exc:  # surfaced in the engine thread
            failure.append(exc)
        finally:
            inbox.put(_END)

    state = start(params, config, clock=clock)
    state.listener = listener

    def drain(st: EngineState) -> None:
        while True:
            try:
                item = inbox.get_nowait()
            except queue.Empty:
                return
            if item is _END:
                if failure:
                    raise failure[0]
                end_of_text(st)
                return
            push_word(st, str(item))

    state.poll = drain
    producer = threading.Thread(target=produce, name="word-source", daemon=True)
    producer.start()
    try:
        while state.phase is not Phase.DONE:
            item = inbox.get()
            if item is _END:
                if failure:
                    raise failure[0]
                end_of_text(state)
            else:
                push_word(state, str(item))
    finally:
        producer.join(timeout=1.0)
    return StreamResult(frames=emitted_frames(state), events=list(state.events), report=StreamReport.from_events(state.events))
