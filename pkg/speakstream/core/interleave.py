from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import Alignment, Utterance
from .errors import (
    AlignmentMismatchError,
    InvalidConfigError,
    InvalidInputError,
    MalformedSequenceError,
)
from .utils import ceil_div


class Scheme(str, Enum):
    S1 = "S1"
    S2 = "S2"
    NON_STREAMING = "NonStreaming"


@dataclass(frozen=True)
class InterleaveConfig:
    scheme: Scheme = Scheme.S1
    m: int = 3  # text window length, words
    n: int = 1  # speech hop length, words

    def validate(self) -> "InterleaveConfig":
        if not isinstance(self.scheme, Scheme):
            raise InvalidConfigError(f"unknown scheme {self.scheme!r}")
        if self.m < 1 or not 1 <= self.n <= self.m:
            raise InvalidConfigError(f"need m >= 1 and 1 <= n <= m, got m={self.m} n={self.n}")
        return self

    @property
    def label(self) -> str:
        return f"{self.scheme.value}(m={self.m},n={self.n})"


class TokenKind(str, Enum):
    TEXT_CHAR = "text_char"
    SEPARATOR = "separator"
    TEXT_BOS = "text_bos"
    TEXT_EOS = "text_eos"
    SPEECH_BOS = "speech_bos"
    SPEECH_EOS = "speech_eos"
    SPEECH_FRAME = "speech_frame"


@dataclass(frozen=True, eq=False)
class Token:
    kind: TokenKind
    segment_index: int = 1
    char: Optional[str] = None
    frame: Optional[np.ndarray] = None

    def describe(self) -> str:
        if self.kind is TokenKind.TEXT_CHAR:
            return f"{self.kind.value}:{self.char}"
        if self.kind is TokenKind.SPEECH_FRAME:
            return f"{self.kind.value}:" + ",".join(str(int(b)) for b in self.frame)
        return self.kind.value


@dataclass
class TokenSequence:
    tokens: List[Token]
    loss_mask: np.ndarray  # True where the NEXT token is a SpeechFrame or SpeechEOS
    word_offsets: Dict[int, int]  # token position -> source word index (0-based)

    def __len__(self) -> int:
        return len(self.tokens)

    def dump_lines(self) -> List[str]:
        """One line per token: kind, segment index, mask bit, payload."""
        lines = []
        for tok, bit in zip(self.tokens, self.loss_mask):
            payload = ""
            if tok.kind is TokenKind.TEXT_CHAR:
                payload = tok.char
            elif tok.kind is TokenKind.SPEECH_FRAME:
                payload = " ".join(str(int(b)) for b in tok.frame)
            lines.append(f"{tok.kind.value}\t{tok.segment_index}\t{int(bit)}\t{payload}")
        return lines


# ------------------------------ Segment math ----------------------------- #
def segment_counts(scheme: Scheme, m: int, n: int, t: int) -> Tuple[int, int]:
    """(text segments x, speech segments y) for t words."""
    InterleaveConfig(scheme, m, n).validate()
    if t < 1:
        raise InvalidInputError(f"word count must be >= 1, got {t}")
    if scheme is Scheme.NON_STREAMING:
        return 1, 1
    y = ceil_div(t, n)
    if scheme is Scheme.S1:
        return y, y
    x = ceil_div(t - m, n) + 1 if t > m else 1
    return x, y


def text_window(scheme: Scheme, m: int, n: int, i: int, t: int) -> range:
    """0-based word indices of text segment T_i (empty for trailing S2 segments)."""
    if scheme is Scheme.S1:
        return range(n * (i - 1), min(t, n * (i - 1) + m))
    if scheme is Scheme.S2:
        if i == 1:
            return range(0, min(t, m))
        return range(min(t, n * (i - 2) + m), min(t, n * (i - 1) + m))
    raise InvalidConfigError(f"{scheme} has no text windows")


def speech_window(n: int, i: int, t: int) -> range:
    """0-based word indices whose frames form speech segment A_i."""
    return range(n * (i - 1), min(t, n * i))


# ------------------------------ Construction ----------------------------- #
def word_tokens(words: Sequence[str], indices: Sequence[int], segment: int) -> Tuple[List[Token], List[Optional[int]]]:
    """Character expansion of ``words[indices]`` with one separator between words."""
    tokens: List[Token] = []
    owners: List[Optional[int]] = []
    for k, wi in enumerate(indices):
        if k:
            tokens.append(Token(TokenKind.SEPARATOR, segment))
            owners.append(None)
        for c in words[wi]:
            tokens.append(Token(TokenKind.TEXT_CHAR, segment, char=c))
            owners.append(wi)
    return tokens, owners


def _speech_tokens(
    frames: np.ndarray, alignment: Optional[Alignment], indices: Sequence[int], segment: int
) -> Tuple[List[Token], List[Optional[int]]]:
    tokens = [Token(TokenKind.SPEECH_BOS, segment)]
    owners: List[Optional[int]] = [None]
    if alignment is None:
        tokens += [Token(TokenKind.SPEECH_FRAME, segment, frame=f) for f in frames]
        owners += [None] * len(frames)
    else:
        for wi in indices:
            start, end = alignment.spans[wi]
            tokens += [Token(TokenKind.SPEECH_FRAME, segment, frame=f) for f in frames[start:end]]
            owners += [wi] * (end - start)
    tokens.append(Token(TokenKind.SPEECH_EOS, segment))
    owners.append(None)
    return tokens, owners


def _finish(tokens: List[Token], owners: List[Optional[int]]) -> TokenSequence:
    mask = np.zeros(len(tokens), dtype=bool)
    for p in range(len(tokens) - 1):
        mask[p] = tokens[p + 1].kind in (TokenKind.SPEECH_FRAME, TokenKind.SPEECH_EOS)
    offsets = {p: wi for p, wi in enumerate(owners) if wi is not None}
    return TokenSequence(tokens=tokens, loss_mask=mask, word_offsets=offsets)


def _check(words: Sequence[str], frames: np.ndarray, alignment: Alignment, m: int, n: int, scheme: Scheme) -> int:
    InterleaveConfig(scheme, m, n).validate()
    if len(words) == 0:
        raise AlignmentMismatchError("no words")
    if len(words) != len(alignment):
        raise AlignmentMismatchError(f"{len(words)} words but {len(alignment)} spans")
    alignment.validate(len(frames))
    return len(words)


def _build_interleaved(
    scheme: Scheme, words: Sequence[str], frames: np.ndarray, alignment: Alignment, m: int, n: int
) -> TokenSequence:
    t = _check(words, frames, alignment, m, n, scheme)
    x, y = segment_counts(scheme, m, n, t)
    tokens: List[Token] = []
    owners: List[Optional[int]] = []
    for i in range(1, y + 1):
        if i <= x:
            text, text_owners = word_tokens(words, text_window(scheme, m, n, i, t), i)
            tokens += text
            owners += text_owners
        speech, speech_owners = _speech_tokens(frames, alignment, speech_window(n, i, t), i)
        tokens += speech
        owners += speech_owners
    return _finish(tokens, owners)


def build_scheme1(words: Sequence[str], frames: np.ndarray, alignment: Alignment, m: int, n: int) -> TokenSequence:
    """[T_1, A_1, ..., T_x, A_x] with text windows repeated across segments."""
    return _build_interleaved(Scheme.S1, words, frames, alignment, m, n)


def build_scheme2(words: Sequence[str], frames: np.ndarray, alignment: Alignment, m: int, n: int) -> TokenSequence:
    """[T_1, A_1, ..., T_x, A_x, A_{x+1}, ..., A_y]; every word appears in one text segment."""
    return _build_interleaved(Scheme.S2, words, frames, alignment, m, n)


def build_nonstreaming(
    words: Sequence[str], frames: np.ndarray, alignment: Optional[Alignment] = None
) -> TokenSequence:
    """[TextBOS, text, TextEOS, SpeechBOS, all frames, SpeechEOS]."""
    if len(words) == 0:
        raise AlignmentMismatchError("no words")
    if len(frames) == 0:
        raise AlignmentMismatchError("words without frames")
    if alignment is not None:
        _check(words, frames, alignment, 1, 1, Scheme.NON_STREAMING)
    text, text_owners = word_tokens(words, range(len(words)), 1)
    tokens = [Token(TokenKind.TEXT_BOS, 1)] + text + [Token(TokenKind.TEXT_EOS, 1)]
    owners: List[Optional[int]] = [None] + text_owners + [None]
    speech, speech_owners = _speech_tokens(np.asarray(frames), alignment, range(len(words)), 1)
    return _finish(tokens + speech, owners + speech_owners)


def build_sequence(utt: Utterance, config: InterleaveConfig) -> TokenSequence:
    config.validate()
    if config.scheme is Scheme.S1:
        return build_scheme1(utt.words, utt.frames, utt.alignment, config.m, config.n)
    if config.scheme is Scheme.S2:
        return build_scheme2(utt.words, utt.frames, utt.alignment, config.m, config.n)
    return build_nonstreaming(utt.words, utt.frames, utt.alignment)


def strip_speech(seq: TokenSequence) -> np.ndarray:
    """All SpeechFrame payloads in order, BOS/EOS removed."""
    frames: List[np.ndarray] = []
    inside = False
    for p, tok in enumerate(seq.tokens):
        if tok.kind is TokenKind.SPEECH_BOS:
            if inside:
                raise MalformedSequenceError(f"nested SpeechBOS at position {p}")
            inside = True
        elif tok.kind is TokenKind.SPEECH_EOS:
            if not inside:
                raise MalformedSequenceError(f"SpeechEOS without SpeechBOS at position {p}")
            inside = False
        elif tok.kind is TokenKind.SPEECH_FRAME:
            if not inside:
                raise MalformedSequenceError(f"frame outside a speech segment at position {p}")
            frames.append(np.asarray(tok.frame))
        elif inside:
            raise MalformedSequenceError(f"{tok.kind.value} inside a speech segment at position {p}")
    if inside:
        raise MalformedSequenceError("speech segment is missing its SpeechEOS")
    if not frames:
        return np.zeros((0, 0), dtype=np.uint8)
    return np.vstack(frames).astype(np.uint8)
