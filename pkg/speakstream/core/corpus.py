from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Final, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg
import yaml

from .dmel import read_dump, write_dump
from .errors import (
    AlignmentMismatchError,
    EmptyInputError,
    FormatError,
    InvalidConfigError,
    InvalidInputError,
)

logger = logging.getLogger(__name__)

# Successor of the utterance's last character.
END_MARKER: Final[str] = "$"

# (character, next character or END_MARKER, is the last character of its word)
TemplateKey = Tuple[str, str, bool]


@dataclass(frozen=True)
class CorpusSpec:
    alphabet: str = "abcdefgh"
    frames_per_char_base: int = 3
    rate_jitter: int = 0
    context_depth: int = 1
    num_utterances: int = 2000
    words_per_utterance: Tuple[int, int] = (3, 8)
    chars_per_word: Tuple[int, int] = (2, 5)
    seed: int = 0
    num_channels: int = 80
    num_bins: int = 16

    def validate(self) -> "CorpusSpec":
        if len(self.alphabet) < 2 or len(set(self.alphabet)) != len(self.alphabet):
            raise InvalidConfigError("alphabet needs at least 2 distinct characters")
        if END_MARKER in self.alphabet or " " in self.alphabet:
            raise InvalidConfigError(f"alphabet may not contain {END_MARKER!r} or spaces")
        if self.rate_jitter < 0 or self.frames_per_char_base - self.rate_jitter < 1:
            raise InvalidConfigError("frames_per_char_base - rate_jitter must be >= 1")
        if self.context_depth != 1:
            raise InvalidConfigError("only context_depth=1 (next character) is supported")
        if self.num_utterances < 0:
            raise InvalidConfigError("num_utterances must be >= 0")
        for name in ("words_per_utterance", "chars_per_word"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise InvalidConfigError(f"{name} must satisfy 1 <= min <= max, got {(lo, hi)}")
        if self.num_bins < 2:
            raise InvalidConfigError("num_bins must be >= 2")
        return self

    @property
    def max_frames_per_char(self) -> int:
        return self.frames_per_char_base + self.rate_jitter


@dataclass(frozen=True)
class Alignment:
    """Per-word ``[start, end)`` frame spans."""

    spans: Tuple[Tuple[int, int], ...]

    def validate(self, total_frames: Optional[int] = None) -> "Alignment":
        if not self.spans:
            raise AlignmentMismatchError("alignment has no spans")
        cursor = 0
        for i, (start, end) in enumerate(self.spans):
            if start != cursor:
                raise AlignmentMismatchError(f"span {i} starts at {start}, expected {cursor}")
            if end <= start:
                raise AlignmentMismatchError(f"span {i} is empty: {(start, end)}")
            cursor = end
        if total_frames is not None and cursor != total_frames:
            raise AlignmentMismatchError(f"spans end at {cursor} but there are {total_frames} frames")
        return self

    @property
    def total_frames(self) -> int:
        return self.spans[-1][1] if self.spans else 0

    def __len__(self) -> int:
        return len(self.spans)

    @classmethod
    def from_intervals(cls, intervals: Sequence[Tuple[int, int]], total_frames: int) -> "Alignment":
        """Close the gaps of an external word alignment.

        Unassigned frames attach to the following word; frames after the
        last interval attach to the last word.
        """
        if not intervals:
            raise AlignmentMismatchError("no word intervals")
        spans: List[Tuple[int, int]] = []
        prev_end = 0
        for i, (start, end) in enumerate(intervals):
            if start < prev_end or end < start:
                raise AlignmentMismatchError(f"interval {i} {(start, end)} overlaps or is reversed")
            spans.append((prev_end, int(end)))
            prev_end = int(end)
        if prev_end > total_frames:
            raise AlignmentMismatchError(f"intervals end at {prev_end} beyond {total_frames} frames")
        spans[-1] = (spans[-1][0], int(total_frames))
        return cls(spans=tuple(spans)).validate(total_frames)


@dataclass
class Utterance:
    id: str
    words: List[str]
    frames: np.ndarray  # (num_frames, num_channels), uint8 bins
    alignment: Alignment

    def __post_init__(self) -> None:
        if len(self.words) != len(self.alignment):
            raise AlignmentMismatchError(
                f"{self.id}: {len(self.words)} words but {len(self.alignment)} spans"
            )
        self.alignment.validate(len(self.frames))

    @property
    def text(self) -> str:
        return " ".join(self.words)

    def word_frames(self, index: int) -> np.ndarray:
        start, end = self.alignment.spans[index]
        return self.frames[start:end]


# ------------------------------- Templates ------------------------------- #
def _is_prime(q: int) -> bool:
    if q < 2:
        return False
    return all(q % d for d in range(2, int(q ** 0.5) + 1))


def _paley(q: int) -> np.ndarray:
    residues = {(x * x) % q for x in range(1, q)}
    chi = np.array([0] + [1 if a in residues else -1 for a in range(1, q)])
    idx = np.arange(q)
    jacobsthal = chi[(idx[None, :] - idx[:, None]) % q]
    s = np.zeros((q + 1, q + 1), dtype=np.int64)
    s[0, 1:] = 1
    s[1:, 0] = -1
    s[1:, 1:] = jacobsthal
    return np.eye(q + 1, dtype=np.int64) + s


def hadamard(order: int) -> np.ndarray:
    """±1 Hadamard matrix whose first row is all ones.

    Sylvester for powers of two, Paley for q + 1 with q prime and
    q = 3 mod 4, and doubling of either.
    """
    if order < 1:
        raise InvalidConfigError(f"no Hadamard matrix of order {order}")
    if order & (order - 1) == 0:
        return scipy.linalg.hadamard(order).astype(np.int64)
    q = order - 1
    if _is_prime(q) and q % 4 == 3:
        return _paley(q)
    if order % 2 == 0:
        return np.kron(scipy.linalg.hadamard(2), hadamard(order // 2)).astype(np.int64)
    raise InvalidConfigError(f"no Hadamard construction for {order} channels")


@dataclass(frozen=True)
class TemplateTable:
    keys: Tuple[TemplateKey, ...]
    frames: np.ndarray  # (num_templates, num_channels), uint8
    index: Dict[TemplateKey, int] = field(repr=False)

    def frame(self, key: TemplateKey) -> np.ndarray:
        return self.frames[self.index[key]]


def template_keys(alphabet: str) -> List[TemplateKey]:
    keys: List[TemplateKey] = [(c, d, False) for c in alphabet for d in alphabet]
    keys += [(c, d, True) for c in alphabet for d in alphabet + END_MARKER]
    return keys


@lru_cache(maxsize=8)
def template_table(spec: CorpusSpec) -> TemplateTable:
    """Distinct corner points of the bin lattice, one per template key.

    Codewords are rows of a Hadamard matrix and their negations (all-ones
    rows excluded), so any two templates differ in at least half of the
    channels and none equals the all-zero silence frame.
    """
    spec.validate()
    h = hadamard(spec.num_channels)
    codewords = np.vstack([h[1:], -h[1:]])
    keys = template_keys(spec.alphabet)
    if len(keys) > len(codewords):
        raise InvalidConfigError(
            f"{len(keys)} templates needed for alphabet of {len(spec.alphabet)} "
            f"but {spec.num_channels} channels only give {len(codewords)}"
        )
    order = np.random.default_rng(spec.seed).permutation(len(codewords))[: len(keys)]
    chosen = codewords[order]
    frames = np.where(chosen > 0, spec.num_bins - 1, 0).astype(np.uint8)
    frames.setflags(write=False)
    return TemplateTable(keys=tuple(keys), frames=frames, index={k: i for i, k in enumerate(keys)})


def silence_frame(num_channels: int) -> np.ndarray:
    """The corpus silence frame: every channel at the lowest bin."""
    return np.zeros(num_channels, dtype=np.uint8)


# ------------------------------- Generation ------------------------------ #
def _random_words(spec: CorpusSpec, rng: np.random.Generator) -> List[str]:
    n_words = int(rng.integers(spec.words_per_utterance[0], spec.words_per_utterance[1] + 1))
    letters = list(spec.alphabet)
    words = []
    for _ in range(n_words):
        n_chars = int(rng.integers(spec.chars_per_word[0], spec.chars_per_word[1] + 1))
        words.append("".join(rng.choice(letters, size=n_chars)))
    return words


def render_words(words: Sequence[str], spec: CorpusSpec, rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, Alignment]:
    """Frames and exact alignment for a word list.

    Each character emits the template of (char, next char, word final),
    repeated ``frames_per_char_base`` +/- ``rate_jitter`` times. Words are
    contiguous; no silence is inserted between them.
    """
    table = template_table(spec)
    if not words:
        raise EmptyInputError("cannot render an empty word list")
    stream = [(c, wi, ci == len(w) - 1) for wi, w in enumerate(words) for ci, c in enumerate(w)]
    if not all(c in spec.alphabet for c, _, _ in stream):
        raise InvalidInputError(f"words {list(words)} use characters outside {spec.alphabet!r}")
    rows: List[np.ndarray] = []
    spans: List[Tuple[int, int]] = []
    start = 0
    cursor = 0
    for j, (c, wi, final) in enumerate(stream):
        nxt = stream[j + 1][0] if j + 1 < len(stream) else END_MARKER
        reps = spec.frames_per_char_base
        if spec.rate_jitter and rng is not None:
            reps += int(rng.integers(-spec.rate_jitter, spec.rate_jitter + 1))
        rows.append(np.repeat(table.frame((c, nxt, final))[None, :], reps, axis=0))
        cursor += reps
        if final:
            spans.append((start, cursor))
            start = cursor
    return np.vstack(rows), Alignment(spans=tuple(spans))


def generate_utterance(spec: CorpusSpec, index: int) -> Utterance:
    rng = np.random.default_rng([spec.seed, index])
    words = _random_words(spec, rng)
    frames, alignment = render_words(words, spec, rng)
    return Utterance(id=f"utt-{index:06d}", words=words, frames=frames, alignment=alignment)


def generate_corpus(spec: CorpusSpec, workers: int = 1) -> List[Utterance]:
    """Deterministic synthetic corpus; output does not depend on ``workers``."""
    spec.validate()
    template_table(spec)
    indices = range(spec.num_utterances)
    if workers <= 1:
        corpus = [generate_utterance(spec, i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            corpus = list(pool.map(lambda i: generate_utterance(spec, i), indices))
    logger.info("generated %d utterances (%d frames)", len(corpus), sum(len(u.frames) for u in corpus))
    return corpus


# --------------------------------- Oracle -------------------------------- #
def oracle_decode(frames: np.ndarray, spec: CorpusSpec) -> str:
    """Maximum-likelihood text of a frame sequence under the corpus model.

    Dynamic programming over runs of one template each, with L1 distance
    between frames and templates as the cost. Consecutive templates must
    chain (the next character of one is the character of the following)
    and the last template must end the utterance. Run lengths outside
    ``base +/- jitter`` are allowed but pay a per-frame duration penalty so
    that generated speech with slightly wrong durations still decodes.
    """
    x = np.asarray(frames)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInputError("no frames to decode")
    table = template_table(spec)
    if x.shape[1] != spec.num_channels:
        raise InvalidInputError(f"expected {spec.num_channels} channels, got {x.shape[1]}")

    alphabet = spec.alphabet
    n_frames, n_templates = x.shape[0], len(table.keys)
    char_of = np.array([alphabet.index(c) for c, _, _ in table.keys])
    next_of = np.array([alphabet.index(d) if d != END_MARKER else -1 for _, d, _ in table.keys])
    feeds = [np.flatnonzero(next_of == a) for a in range(len(alphabet))]
    ends = np.flatnonzero(next_of == -1)

    cost = np.abs(x[:, None, :].astype(np.int64) - table.frames[None, :, :].astype(np.int64)).sum(-1)
    cum = np.vstack([np.zeros((1, n_templates), dtype=np.int64), np.cumsum(cost, axis=0)])

    lo = spec.frames_per_char_base - spec.rate_jitter
    hi = spec.frames_per_char_base + spec.rate_jitter
    penalty = spec.num_channels * (spec.num_bins - 1) / 4.0
    lengths = range(1, 2 * hi + 1)

    best = np.full((n_frames + 1, n_templates), np.inf)
    back_len = np.zeros((n_frames + 1, n_templates), dtype=np.int64)
    back_prev = np.full((n_frames + 1, n_templates), -1, dtype=np.int64)
    for i in range(n_frames):
        if i == 0:
            entry = np.zeros(len(alphabet))
            entry_arg = np.full(len(alphabet), -1)
        else:
            entry = np.full(len(alphabet), np.inf)
            entry_arg = np.full(len(alphabet), -1)
            for a, group in enumerate(feeds):
                k = group[np.argmin(best[i, group])]
                entry[a], entry_arg[a] = best[i, k], k
        if not np.isfinite(entry).any():
            continue
        for length in lengths:
            j = i + length
            if j > n_frames:
                break
            deviation = max(0, lo - length, length - hi)
            cand = entry[char_of] + (cum[j] - cum[i]) + penalty * deviation
            better = cand < best[j]
            best[j, better] = cand[better]
            back_len[j, better] = length
            back_prev[j, better] = entry_arg[char_of][better]

    last = ends[np.argmin(best[n_frames, ends])]
    if not np.isfinite(best[n_frames, last]):
        raise InvalidInputError("frames cannot be segmented into templates")
    path: List[int] = []
    j, t = n_frames, int(last)
    while j > 0:
        path.append(t)
        j, t = j - int(back_len[j, t]), int(back_prev[j, t])
    path.reverse()

    out: List[str] = []
    for pos, t in enumerate(path):
        c, _, final = table.keys[t]
        out.append(c)
        if final and pos != len(path) - 1:
            out.append(" ")
    return "".join(out)


# ------------------------------ Persistence ------------------------------ #
def write_alignment(path: Union[str, Path], words: Sequence[str], alignment: Alignment) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump({"words": list(words), "spans": [list(s) for s in alignment.spans]}, f)


def read_alignment(path: Union[str, Path], total_frames: Optional[int] = None) -> Tuple[List[str], Alignment]:
    """Read the alignment interchange format.

    Either exact ``spans`` covering every frame, or external ``intervals``
    (with optional gaps) plus ``total_frames``.
    """
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict) or "words" not in data:
        raise FormatError(f"{path}: expected a mapping with 'words'")
    words = [str(w) for w in data["words"]]
    if "spans" in data:
        alignment = Alignment(spans=tuple((int(s), int(e)) for s, e in data["spans"]))
        alignment.validate(total_frames)
    elif "intervals" in data:
        total = int(data.get("total_frames", total_frames if total_frames is not None else -1))
        if total < 0:
            raise FormatError(f"{path}: intervals need total_frames")
        alignment = Alignment.from_intervals([(int(s), int(e)) for s, e in data["intervals"]], total)
    else:
        raise FormatError(f"{path}: expected 'spans' or 'intervals'")
    if len(words) != len(alignment):
        raise AlignmentMismatchError(f"{path}: {len(words)} words but {len(alignment)} spans")
    return words, alignment


def write_manifest(
    path: Union[str, Path],
    corpus: Sequence[Utterance],
    frames_dir: Union[str, Path],
    num_bins: int,
    hop: float,
) -> None:
    """One JSON record per utterance; frames go to one dump file each."""
    path, frames_dir = Path(path), Path(frames_dir)
    frames_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for utt in corpus:
        dump = frames_dir / f"{utt.id}.dmel"
        write_dump(dump, utt.frames, num_bins=num_bins, hop=hop)
        records.append(
            {
                "id": utt.id,
                "words": list(utt.words),
                "frames": str(dump.relative_to(path.parent) if dump.is_relative_to(path.parent) else dump),
                "spans": [list(s) for s in utt.alignment.spans],
            }
        )
    pd.DataFrame(records, columns=["id", "words", "frames", "spans"]).to_json(
        path, orient="records", lines=True, force_ascii=False
    )


def read_manifest(path: Union[str, Path]) -> List[Utterance]:
    path = Path(path)
    df = pd.read_json(path, lines=True, dtype=False)
    missing = {"id", "words", "frames", "spans"} - set(df.columns)
    if missing:
        raise FormatError(f"{path}: manifest lacks columns {sorted(missing)}")
    corpus = []
    for row in df.itertuples(index=False):
        dump_path = Path(row.frames)
        if not dump_path.is_absolute():
            dump_path = path.parent / dump_path
        dump = read_dump(dump_path)
        alignment = Alignment(spans=tuple((int(s), int(e)) for s, e in row.spans))
        corpus.append(Utterance(id=str(row.id), words=list(row.words), frames=dump.frames, alignment=alignment))
    return corpus
