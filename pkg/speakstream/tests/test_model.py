import math
from dataclasses import replace

import numpy as np
import pytest

from speakstream.core.errors import (
    CacheDesyncError,
    EmptyInputError,
    EmptyLossError,
    InvalidConfigError,
    InvalidTokenError,
    NumericalError,
)
from speakstream.core.gradcheck import TINY_MODEL, random_batch
from speakstream.core.interleave import Token, TokenKind
from speakstream.core.kv_cache import KvCache
from speakstream.core.model import (
    NUM_SPECIALS,
    Logits,
    ModelConfig,
    embed,
    forward,
    generate_step,
    grad,
    init_params,
    loss,
)

CONFIG = replace(TINY_MODEL, dtype="float64")


@pytest.fixture
def params():
    return init_params(CONFIG, seed=3)


@pytest.fixture
def batch():
    return random_batch(CONFIG, np.random.default_rng(5), count=4)


def frame_token(values, segment=1):
    return Token(TokenKind.SPEECH_FRAME, segment, frame=np.asarray(values, dtype=np.uint8))


def test_uniform_logits_give_channel_and_stop_entropy(batch):
    seq = batch[0]
    T, C, B = len(seq), CONFIG.num_channels, CONFIG.num_bins
    logits = Logits(channel=np.zeros((T, C, B)), stop=np.zeros((T, 2)))
    assert math.isclose(loss(logits, seq, CONFIG), C * math.log(B) + math.log(2), rel_tol=1e-12)


def test_loss_without_speech_targets():
    tokens = [Token(TokenKind.TEXT_CHAR, char="a"), Token(TokenKind.SEPARATOR)]
    logits = Logits(channel=np.zeros((2, 4, 4)), stop=np.zeros((2, 2)))
    with pytest.raises(EmptyLossError):
        loss(logits, tokens, CONFIG)


def test_forward_rejects_empty_input(params):
    with pytest.raises(EmptyInputError):
        forward(params, [])


def test_cached_decoding_matches_full_forward(params, batch):
    tokens = batch[0].tokens
    full = forward(params, tokens)
    cache = KvCache(CONFIG)
    parts = [forward(params, tokens[:5], cache)]
    parts += [forward(params, [tok], cache) for tok in tokens[5:]]
    assert len(cache) == len(tokens)
    assert np.allclose(np.concatenate([p.channel for p in parts]), full.channel, atol=1e-10)
    assert np.allclose(np.concatenate([p.stop for p in parts]), full.stop, atol=1e-10)


@pytest.mark.parametrize("dtype,tol", [("float64", 1e-10), ("float32", 1e-5)])
def test_cache_matches_full_forward_on_random_splits(dtype, tol):
    config = replace(TINY_MODEL, dtype=dtype)
    params = init_params(config, seed=11)
    rng = np.random.default_rng(12)
    for seq in random_batch(config, rng, count=100):
        tokens = seq.tokens
        full = forward(params, tokens)
        split = int(rng.integers(1, len(tokens)))
        middle = int(rng.integers(split + 1, len(tokens) + 1))
        cache = KvCache(config)
        parts = [forward(params, tokens[:split], cache), forward(params, tokens[split:middle], cache)]
        parts += [forward(params, [tok], cache) for tok in tokens[middle:]]
        assert len(cache) == len(tokens)
        assert np.allclose(np.concatenate([p.channel for p in parts]), full.channel, rtol=tol, atol=tol)
        assert np.allclose(np.concatenate([p.stop for p in parts]), full.stop, rtol=tol, atol=tol)


def test_logits_do_not_depend_on_later_tokens(params, batch):
    tokens = list(batch[0].tokens)
    p = len(tokens) // 2
    changed = tokens[: p + 1] + [Token(TokenKind.TEXT_CHAR, char="d")] * (len(tokens) - p - 1)
    a, b = forward(params, tokens), forward(params, changed)
    assert np.allclose(a.channel[: p + 1], b.channel[: p + 1], atol=1e-12)
    assert np.allclose(a.stop[: p + 1], b.stop[: p + 1], atol=1e-12)


def test_frame_embedding_sums_channel_bins(params):
    bins = [1, 0, 3, 2]
    out = embed(params, [frame_token(bins), Token(TokenKind.TEXT_CHAR, char="c")])
    expected = sum(params["bin_embedding"][c, b] for c, b in enumerate(bins)) + params["position_embedding"][0]
    assert np.allclose(out[0], expected)
    text = params["text_embedding"][NUM_SPECIALS + 2] + params["position_embedding"][1]
    assert np.allclose(out[1], text)


def test_invalid_tokens(params):
    with pytest.raises(InvalidTokenError):
        forward(params, [Token(TokenKind.TEXT_CHAR, char="z")])
    with pytest.raises(InvalidTokenError):
        forward(params, [frame_token([0, 0, 4, 0])])
    with pytest.raises(InvalidTokenError):
        forward(params, [frame_token([0, 0, 0])])
    with pytest.raises(InvalidTokenError):
        forward(params, [Token(TokenKind.SEPARATOR)] * (CONFIG.max_positions + 1))


def test_cache_overflow_and_desync(params):
    cache = KvCache(CONFIG)
    forward(params, [Token(TokenKind.SEPARATOR)] * CONFIG.max_positions, cache)
    with pytest.raises(InvalidTokenError):
        forward(params, [Token(TokenKind.SEPARATOR)], cache)
    other = KvCache(replace(CONFIG, max_positions=64))
    with pytest.raises(CacheDesyncError):
        forward(params, [Token(TokenKind.SEPARATOR)], other)


def test_generate_step_needs_warm_cache(params):
    with pytest.raises(CacheDesyncError):
        generate_step(params, KvCache(CONFIG), Token(TokenKind.SPEECH_BOS))


def test_stop_head_decides_eos(params):
    rigged = params.copy()
    rigged.tensors["stop_head.weight"][:] = 0.0
    rigged.tensors["stop_head.bias"][:] = [0.1, 5.0]
    cache = KvCache(CONFIG)
    forward(rigged, [Token(TokenKind.TEXT_CHAR, char="a")], cache)
    assert generate_step(rigged, cache, Token(TokenKind.SPEECH_BOS)).eos

    rigged.tensors["stop_head.bias"][:] = [5.0, -5.0]
    pred = generate_step(rigged, cache, frame_token([0, 1, 2, 3]))
    assert not pred.eos
    assert pred.frame.shape == (CONFIG.num_channels,) and pred.frame.dtype == np.uint8
    assert len(cache) == 3


def test_sampling_is_reproducible_for_a_seed(params):
    def run(seed):
        cache = KvCache(CONFIG)
        forward(params, [Token(TokenKind.TEXT_CHAR, char="b")], cache)
        rng = np.random.default_rng(seed)
        last, out = Token(TokenKind.SPEECH_BOS), []
        for _ in range(6):
            pred = generate_step(params, cache, last, temperature=1.0, rng=rng)
            if pred.eos:
                out.append(None)
                last = Token(TokenKind.SPEECH_EOS)
            else:
                out.append(pred.frame.tolist())
                last = frame_token(pred.frame)
        return out

    assert run(11) == run(11)
    cache = KvCache(CONFIG)
    forward(params, [Token(TokenKind.SPEECH_BOS)], cache)
    with pytest.raises(InvalidConfigError):
        generate_step(params, cache, Token(TokenKind.SPEECH_BOS), temperature=0.5)


def test_unused_parameters_get_zero_gradient(params, batch):
    result = grad(params, batch)
    # interleaved sequences never contain TextBOS / TextEOS
    assert not result.grads["text_embedding"][0].any()
    assert not result.grads["text_embedding"][1].any()
    longest = max(len(s) for s in batch)
    assert not result.grads["position_embedding"][longest:].any()
    assert result.grads["channel_head.weight"].any()


def test_gradient_does_not_depend_on_worker_count(params, batch):
    serial = grad(params, batch, workers=1, microbatch=1)
    threaded = grad(params, batch, workers=3, microbatch=1)
    assert serial.loss == threaded.loss
    for name in params.names():
        assert np.array_equal(serial.grads[name], threaded.grads[name])
    chunked = grad(params, batch, microbatch=4)
    assert math.isclose(chunked.loss, serial.loss, rel_tol=1e-12)


def test_grad_reports_non_finite_loss(params, batch):
    broken = params.copy()
    broken.tensors["channel_head.bias"][:] = np.inf
    with np.errstate(all="ignore"), pytest.raises(NumericalError):
        grad(broken, batch)


def test_config_and_param_validation(params):
    with pytest.raises(InvalidConfigError):
        ModelConfig(model_dim=10, num_heads=4).validate()
    bad = params.copy()
    bad.tensors["stop_head.bias"] = np.zeros(3)
    with pytest.raises(InvalidConfigError):
        bad.validate()
    assert params.num_parameters == sum(a.size for a in params.tensors.values())
