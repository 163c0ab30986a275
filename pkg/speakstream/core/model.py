"""Decoder-only transformer over interleaved text/dMel tokens.

Text symbols are looked up in one embedding table. A speech frame is
embedded as the sum over channels of that channel's bin embedding. The
output side is factorized: one ``num_bins``-way head per channel plus a
two-way stop head (Continue / Eos).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, Final, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (
    CacheDesyncError,
    EmptyInputError,
    EmptyLossError,
    InvalidConfigError,
    InvalidTokenError,
    NumericalError,
)
from .interleave import Token, TokenKind, TokenSequence
from .kv_cache import KvCache

logger = logging.getLogger(__name__)

# Symbol ids of the text embedding table; characters follow the specials.
TEXT_BOS_ID: Final[int] = 0
TEXT_EOS_ID: Final[int] = 1
SEPARATOR_ID: Final[int] = 2
SPEECH_BOS_ID: Final[int] = 3
SPEECH_EOS_ID: Final[int] = 4
NUM_SPECIALS: Final[int] = 5

STOP_CONTINUE: Final[int] = 0
STOP_EOS: Final[int] = 1

_SPECIAL_IDS: Final[Dict[TokenKind, int]] = {
    TokenKind.TEXT_BOS: TEXT_BOS_ID,
    TokenKind.TEXT_EOS: TEXT_EOS_ID,
    TokenKind.SEPARATOR: SEPARATOR_ID,
    TokenKind.SPEECH_BOS: SPEECH_BOS_ID,
    TokenKind.SPEECH_EOS: SPEECH_EOS_ID,
}


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    model_dim: int = 128
    num_heads: int = 4
    ffn_dim: int = 512
    max_positions: int = 1024
    alphabet: str = "abcdefgh"
    num_channels: int = 80
    num_bins: int = 16
    dtype: str = "float32"

    def validate(self) -> "ModelConfig":
        for name in ("num_layers", "model_dim", "num_heads", "ffn_dim", "max_positions", "num_channels", "num_bins"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.model_dim % self.num_heads:
            raise InvalidConfigError(f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}")
        if not self.alphabet or len(set(self.alphabet)) != len(self.alphabet):
            raise InvalidConfigError("alphabet must be non-empty with distinct characters")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        return self

    @property
    def vocab(self) -> int:
        return NUM_SPECIALS + len(self.alphabet)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def char_id(self, char: str) -> int:
        idx = self.alphabet.find(char)
        if len(char) != 1 or idx < 0:
            raise InvalidTokenError(f"character {char!r} is not in the alphabet {self.alphabet!r}")
        return NUM_SPECIALS + idx


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    D, F, C, B = config.model_dim, config.ffn_dim, config.num_channels, config.num_bins
    shapes: Dict[str, Tuple[int, ...]] = {
        "text_embedding": (config.vocab, D),
        "bin_embedding": (C, B, D),
        "position_embedding": (config.max_positions, D),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}"
        shapes.update(
            {
                f"{p}.ln1.weight": (D,),
                f"{p}.ln1.bias": (D,),
                f"{p}.attn.q.weight": (D, D),
                f"{p}.attn.q.bias": (D,),
                f"{p}.attn.k.weight": (D, D),
                f"{p}.attn.k.bias": (D,),
                f"{p}.attn.v.weight": (D, D),
                f"{p}.attn.v.bias": (D,),
                f"{p}.attn.out.weight": (D, D),
                f"{p}.attn.out.bias": (D,),
                f"{p}.ln2.weight": (D,),
                f"{p}.ln2.bias": (D,),
                f"{p}.ffn.up.weight": (D, F),
                f"{p}.ffn.up.bias": (F,),
                f"{p}.ffn.down.weight": (F, D),
                f"{p}.ffn.down.bias": (D,),
            }
        )
    shapes.update(
        {
            "final_ln.weight": (D,),
            "final_ln.bias": (D,),
            "channel_head.weight": (D, C * B),
            "channel_head.bias": (C * B,),
            "stop_head.weight": (D, 2),
            "stop_head.bias": (2,),
        }
    )
    return shapes


@dataclass
class Params:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    @property
    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def validate(self) -> "Params":
        self.config.validate()
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise InvalidConfigError(f"parameter names differ: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise InvalidConfigError(f"{name}: shape {self.tensors[name].shape} != {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise NumericalError(f"{name} holds non-finite values")
        return self

    def astype(self, dtype: str) -> "Params":
        config = replace(self.config, dtype=dtype)
        return Params(config, {k: v.astype(config.np_dtype) for k, v in self.tensors.items()})

    def copy(self) -> "Params":
        return Params(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(config: ModelConfig, seed: int = 0) -> Params:
    """Normal(0, 0.02) weights, zero biases, unit layer-norm gains."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        elif ".ln" in name or name.startswith("final_ln"):
            arr = np.ones(shape)
        else:
            arr = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = arr.astype(config.np_dtype)
    return Params(config, tensors)


# ------------------------------- Encoding -------------------------------- #
@dataclass
class EncodedBatch:
    ids: np.ndarray  # (N, T) text-table row per token
    bins: np.ndarray  # (N, T, C) bin per channel, 0 for non-frame tokens
    is_frame: np.ndarray  # (N, T) 1.0 where the token is a SpeechFrame
    lengths: np.ndarray  # (N,)
    channel_targets: np.ndarray  # (N, T, C)
    channel_weights: np.ndarray  # (N, T)
    stop_targets: np.ndarray  # (N, T)
    stop_weights: np.ndarray  # (N, T)


def _tokens_of(seq: Union[TokenSequence, Sequence[Token]]) -> List[Token]:
    return list(seq.tokens) if isinstance(seq, TokenSequence) else list(seq)


def _mask_of(seq: Union[TokenSequence, Sequence[Token]], tokens: List[Token]) -> np.ndarray:
    if isinstance(seq, TokenSequence):
        return np.asarray(seq.loss_mask, dtype=bool)
    mask = np.zeros(len(tokens), dtype=bool)
    for p in range(len(tokens) - 1):
        mask[p] = tokens[p + 1].kind in (TokenKind.SPEECH_FRAME, TokenKind.SPEECH_EOS)
    return mask


def encode_tokens(tokens: Sequence[Token], config: ModelConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(ids, bins, is_frame) of one token list; raises InvalidToken on out-of-range input."""
    T, C = len(tokens), config.num_channels
    ids = np.zeros(T, dtype=np.int64)
    bins = np.zeros((T, C), dtype=np.int64)
    is_frame = np.zeros(T, dtype=bool)
    for p, tok in enumerate(tokens):
        if tok.kind is TokenKind.SPEECH_FRAME:
            frame = np.asarray(tok.frame)
            if frame.shape != (C,):
                raise InvalidTokenError(f"position {p}: frame of shape {frame.shape}, expected ({C},)")
            if frame.min() < 0 or frame.max() >= config.num_bins:
                raise InvalidTokenError(f"position {p}: bins outside [0, {config.num_bins})")
            bins[p] = frame
            is_frame[p] = True
        elif tok.kind is TokenKind.TEXT_CHAR:
            ids[p] = config.char_id(tok.char)
        else:
            ids[p] = _SPECIAL_IDS[tok.kind]
    return ids, bins, is_frame


def encode_batch(seqs: Sequence[Union[TokenSequence, Sequence[Token]]], config: ModelConfig) -> EncodedBatch:
    """Right-padded batch with per-sequence loss weights.

    The channel term of a sequence is averaged over its positions whose
    target is a frame; the stop term over all of its masked positions.
    """
    token_lists = [_tokens_of(s) for s in seqs]
    N = len(token_lists)
    T = max((len(t) for t in token_lists), default=0)
    C = config.num_channels
    dtype = config.np_dtype
    batch = EncodedBatch(
        ids=np.zeros((N, T), dtype=np.int64),
        bins=np.zeros((N, T, C), dtype=np.int64),
        is_frame=np.zeros((N, T), dtype=dtype),
        lengths=np.array([len(t) for t in token_lists], dtype=np.int64),
        channel_targets=np.zeros((N, T, C), dtype=np.int64),
        channel_weights=np.zeros((N, T), dtype=dtype),
        stop_targets=np.zeros((N, T), dtype=np.int64),
        stop_weights=np.zeros((N, T), dtype=dtype),
    )
    for n, (seq, tokens) in enumerate(zip(seqs, token_lists)):
        L = len(tokens)
        ids, bins, is_frame = encode_tokens(tokens, config)
        batch.ids[n, :L], batch.bins[n, :L], batch.is_frame[n, :L] = ids, bins, is_frame
        mask = _mask_of(seq, tokens)
        frame_pos = [p for p in range(L - 1) if mask[p] and tokens[p + 1].kind is TokenKind.SPEECH_FRAME]
        masked = np.flatnonzero(mask[:L])
        if masked.size:
            batch.stop_weights[n, masked] = 1.0 / masked.size
        for p in masked:
            if p + 1 < L and tokens[p + 1].kind is TokenKind.SPEECH_EOS:
                batch.stop_targets[n, p] = STOP_EOS
        if frame_pos:
            batch.channel_weights[n, frame_pos] = 1.0 / len(frame_pos)
            for p in frame_pos:
                batch.channel_targets[n, p] = bins[p + 1]
    return batch


# -------------------------------- Network -------------------------------- #
@dataclass
class Logits:
    channel: np.ndarray  # (T, C, B)
    stop: np.ndarray  # (T, 2)

    def __len__(self) -> int:
        return int(self.stop.shape[0])


@dataclass(frozen=True)
class Prediction:
    """One decoding step: either the next frame or end of segment."""

    eos: bool
    frame: Optional[np.ndarray] = None


def _leaves(params: Params, requires_grad: bool) -> Dict[str, Tensor]:
    make = ad.parameter if requires_grad else ad.constant
    return {name: make(arr) for name, arr in params.tensors.items()}


def _embed(p: Dict[str, Tensor], config: ModelConfig, ids: np.ndarray, bins: np.ndarray, is_frame: np.ndarray, start: int) -> Tensor:
    T = ids.shape[1]
    if start + T > config.max_positions:
        raise InvalidTokenError(f"sequence reaches position {start + T - 1}, max_positions={config.max_positions}")
    f = np.asarray(is_frame, dtype=config.np_dtype)[..., None]
    text = ad.take_rows(p["text_embedding"], ids)
    frames = ad.sum_gather(p["bin_embedding"], bins)
    positions = ad.take_rows(p["position_embedding"], np.arange(start, start + T))
    return text * (1.0 - f) + frames * f + positions


def _attention(p: Dict[str, Tensor], config: ModelConfig, layer: int, x: Tensor, cache: Optional[KvCache]) -> Tensor:
    N, T, D = x.shape
    H, dh = config.num_heads, config.head_dim
    pre = f"layers.{layer}.attn"

    def heads(name: str) -> Tensor:
        y = x @ p[f"{pre}.{name}.weight"] + p[f"{pre}.{name}.bias"]
        return y.reshape(N, T, H, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    past = 0
    if cache is not None:
        past_k, past_v = cache.past(layer)
        past = past_k.shape[1]
        cache.write(layer, k.data[0], v.data[0])
        k = ad.concat([ad.constant(past_k[None]), k], axis=2)
        v = ad.concat([ad.constant(past_v[None]), v], axis=2)

    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    causal = np.arange(past + T)[None, :] <= (past + np.arange(T))[:, None]
    ctx = ad.matmul(ad.softmax(scores, causal), v).transpose(0, 2, 1, 3).reshape(N, T, D)
    return ctx @ p[f"{pre}.out.weight"] + p[f"{pre}.out.bias"]


def _block(p: Dict[str, Tensor], config: ModelConfig, layer: int, x: Tensor, cache: Optional[KvCache]) -> Tensor:
    pre = f"layers.{layer}"
    x = x + _attention(p, config, layer, ad.layer_norm(x, p[f"{pre}.ln1.weight"], p[f"{pre}.ln1.bias"]), cache)
    h = ad.layer_norm(x, p[f"{pre}.ln2.weight"], p[f"{pre}.ln2.bias"])
    h = (h @ p[f"{pre}.ffn.up.weight"] + p[f"{pre}.ffn.up.bias"]).gelu()
    return x + (h @ p[f"{pre}.ffn.down.weight"] + p[f"{pre}.ffn.down.bias"])


def _run(
    p: Dict[str, Tensor],
    config: ModelConfig,
    ids: np.ndarray,
    bins: np.ndarray,
    is_frame: np.ndarray,
    cache: Optional[KvCache] = None,
) -> Tuple[Tensor, Tensor]:
    """(channel logits (N, T, C, B), stop logits (N, T, 2))."""
    N, T = ids.shape
    start = 0
    if cache is not None:
        if N != 1:
            raise CacheDesyncError("a kv-cache serves exactly one sequence")
        cache.check(config, T)
        start = cache.length
    x = _embed(p, config, ids, bins, is_frame, start)
    for layer in range(config.num_layers):
        x = _block(p, config, layer, x, cache)
    x = ad.layer_norm(x, p["final_ln.weight"], p["final_ln.bias"])
    channel = (x @ p["channel_head.weight"] + p["channel_head.bias"]).reshape(N, T, config.num_channels, config.num_bins)
    stop = x @ p["stop_head.weight"] + p["stop_head.bias"]
    if cache is not None:
        cache.commit(T)
    return channel, stop


def _loss_tensor(channel: Tensor, stop: Tensor, batch: EncodedBatch) -> Tensor:
    """Sum over sequences of each sequence's normalized loss."""
    C = channel.shape[2]
    channel_w = np.broadcast_to(batch.channel_weights[..., None], batch.channel_weights.shape + (C,))
    return ad.cross_entropy(channel, batch.channel_targets, channel_w) + ad.cross_entropy(
        stop, batch.stop_targets, batch.stop_weights
    )


def embed(params: Params, seq: Union[TokenSequence, Sequence[Token]]) -> np.ndarray:
    """Input embedding (T, D) of a sequence starting at position 0."""
    config = params.config
    ids, bins, is_frame = encode_tokens(_tokens_of(seq), config)
    out = _embed(_leaves(params, False), config, ids[None], bins[None], is_frame[None], 0)
    return out.data[0]


def forward(params: Params, seq: Union[TokenSequence, Sequence[Token]], cache: Optional[KvCache] = None) -> Logits:
    """Logits for every position of ``seq``.

    With a cache, ``seq`` continues the cached prefix and the cache is
    extended in place.
    """
    config = params.config
    tokens = _tokens_of(seq)
    if not tokens:
        raise EmptyInputError("forward needs at least one token")
    ids, bins, is_frame = encode_tokens(tokens, config)
    channel, stop = _run(_leaves(params, False), config, ids[None], bins[None], is_frame[None], cache)
    return Logits(channel=channel.data[0], stop=stop.data[0])


def loss(logits: Logits, seq: Union[TokenSequence, Sequence[Token]], config: Optional[ModelConfig] = None) -> float:
    tokens = _tokens_of(seq)
    if len(tokens) != len(logits):
        raise InvalidTokenError(f"{len(logits)} logit rows for {len(tokens)} tokens")
    C, B = logits.channel.shape[1:]
    if config is None:
        config = ModelConfig(num_channels=C, num_bins=B, alphabet=_alphabet_of(tokens), dtype=logits.stop.dtype.name)
    batch = encode_batch([seq], config)
    if not batch.stop_weights.any():
        raise EmptyLossError("sequence has no speech targets")
    total = _loss_tensor(ad.constant(logits.channel[None]), ad.constant(logits.stop[None]), batch)
    return float(total.data)


def _alphabet_of(tokens: Sequence[Token]) -> str:
    chars = sorted({t.char for t in tokens if t.kind is TokenKind.TEXT_CHAR})
    return "".join(chars) or "a"


@dataclass
class GradResult:
    loss: float
    grads: Dict[str, np.ndarray]


def _microbatch_grad(params: Params, seqs: Sequence[TokenSequence]) -> Tuple[float, Dict[str, np.ndarray]]:
    config = params.config
    batch = encode_batch(seqs, config)
    if (batch.stop_weights.sum(axis=1) == 0).any():
        raise EmptyLossError("a sequence in the batch has no speech targets")
    leaves = _leaves(params, True)
    channel, stop = _run(leaves, config, batch.ids, batch.bins, batch.is_frame)
    total = _loss_tensor(channel, stop, batch)
    total.backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in leaves.items()}
    return float(total.data), grads


def grad(params: Params, batch: Sequence[TokenSequence], workers: int = 1, microbatch: int = 4) -> GradResult:
    """Mean batch loss and its gradient for every parameter.

    The batch is cut into fixed microbatches whose gradients are summed in
    order, so the result does not depend on ``workers``.
    """
    if not batch:
        raise EmptyInputError("empty batch")
    chunks = [list(batch[i : i + microbatch]) for i in range(0, len(batch), max(1, microbatch))]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _microbatch_grad(params, c), chunks))
    else:
        parts = [_microbatch_grad(params, c) for c in chunks]

    total_loss = 0.0
    grads = {name: np.zeros_like(arr) for name, arr in params.tensors.items()}
    for part_loss, part_grads in parts:
        total_loss += part_loss
        for name, g in part_grads.items():
            grads[name] += g
    scale = 1.0 / len(batch)
    mean_loss = total_loss * scale
    if not math.isfinite(mean_loss):
        raise NumericalError(f"non-finite loss {mean_loss}")
    for g in grads.values():
        g *= scale
    return GradResult(loss=mean_loss, grads=grads)


# -------------------------------- Decoding ------------------------------- #
def _sample(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``logits`` (rows x K)."""
    probs = np.exp(ad.log_softmax(logits.astype(np.float64) / temperature))
    u = rng.random(probs.shape[0])
    picks = (np.cumsum(probs, axis=-1) < u[:, None]).sum(axis=-1)
    return np.minimum(picks, probs.shape[-1] - 1)


def generate_step(
    params: Params,
    cache: KvCache,
    last_token: Token,
    temperature: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Prediction:
    """Feed ``last_token`` and predict what follows it.

    Greedy by default: the stop head's argmax decides Eos, otherwise each
    channel's argmax bin forms the frame. ``temperature > 0`` samples both
    heads with ``rng``.
    """
    if cache.length == 0:
        raise CacheDesyncError("generate_step needs a warm cache")
    logits = forward(params, [last_token], cache)
    stop, channel = logits.stop[-1], logits.channel[-1]
    if temperature > 0:
        if rng is None:
            raise InvalidConfigError("temperature sampling needs a seeded generator")
        if _sample(stop[None], temperature, rng)[0] == STOP_EOS:
            return Prediction(eos=True)
        return Prediction(eos=False, frame=_sample(channel, temperature, rng).astype(np.uint8))
    if int(np.argmax(stop)) == STOP_EOS:
        return Prediction(eos=True)
    return Prediction(eos=False, frame=np.argmax(channel, axis=-1).astype(np.uint8))
