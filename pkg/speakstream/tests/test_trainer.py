import math

import numpy as np
import pandas as pd
import pytest

import speakstream.core.trainer as trainer
from speakstream.core import checkpoint
from speakstream.core.corpus import CorpusSpec, generate_corpus
from speakstream.core.engine import EngineConfig
from speakstream.core.errors import EmptyInputError, InvalidConfigError, InvalidInputError, NumericalError
from speakstream.core.interleave import InterleaveConfig, Scheme
from speakstream.core.model import GradResult, ModelConfig, init_params
from speakstream.core.trainer import (
    GROUND_TRUTH,
    TrainConfig,
    clip_by_global_norm,
    config_pool,
    evaluate,
    global_norm,
    lr_at,
    train,
    update_lr,
)

SPEC = CorpusSpec(
    alphabet="ab", num_channels=8, num_bins=4, words_per_utterance=(2, 3), chars_per_word=(1, 2), num_utterances=6
)
MODEL = ModelConfig(
    num_layers=1, model_dim=16, num_heads=2, ffn_dim=32, max_positions=256, alphabet="ab", num_channels=8, num_bins=4
)
FAST = TrainConfig(steps=5, batch=2, warmup_steps=1, log_every=0)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SPEC)


def test_learning_rate_schedule():
    config = TrainConfig(steps=100, warmup_steps=10, peak_lr=1e-3)
    assert lr_at(config, 0) == 0.0
    assert math.isclose(lr_at(config, 5), 5e-4)
    assert math.isclose(lr_at(config, 10), 1e-3)
    assert math.isclose(lr_at(config, 55), 5e-4)
    assert math.isclose(lr_at(config, 100), 0.0, abs_tol=1e-15)
    with pytest.raises(InvalidInputError):
        lr_at(config, 101)


def test_no_update_runs_at_zero_rate(corpus):
    config = TrainConfig(steps=100, warmup_steps=10, peak_lr=1e-3)
    rates = [update_lr(config, s) for s in range(config.steps)]
    assert math.isclose(rates[0], 1e-4)
    assert math.isclose(rates[9], 1e-3)
    assert 0.0 < rates[-1] < 1e-5
    assert all(b <= a for a, b in zip(rates[9:], rates[10:]))

    cold = TrainConfig(steps=4, warmup_steps=0, peak_lr=1e-3)
    assert all(update_lr(cold, s) > 0 for s in range(4))

    trace = train(corpus, MODEL, FAST, progress=False).trace
    assert (trace["lr"] > 0).all()


def test_clipping_bounds_the_global_norm():
    rng = np.random.default_rng(0)
    grads = {"a": rng.normal(size=(4, 3)) * 10, "b": rng.normal(size=7) * 10}
    before, after = clip_by_global_norm(grads, 1.0)
    assert before > 1.0
    assert after <= 1.0 + 1e-6
    assert math.isclose(global_norm(grads), after)

    small = {"a": np.full(3, 0.1)}
    assert clip_by_global_norm(small, 1.0)[0] == clip_by_global_norm(small, 1.0)[1]


def test_config_pool_covers_every_window_and_hop():
    pool = config_pool(3)
    assert len(pool) == 12
    assert InterleaveConfig(Scheme.S2, 3, 2) in pool
    assert all(1 <= c.n <= c.m <= 3 for c in pool)


def test_train_config_validation():
    with pytest.raises(InvalidConfigError):
        TrainConfig(steps=5, warmup_steps=10).validate()
    with pytest.raises(InvalidConfigError):
        TrainConfig(peak_lr=0.0).validate()
    with pytest.raises(InvalidConfigError):
        TrainConfig(interleave=InterleaveConfig(Scheme.S1, 1, 2)).validate()
    with pytest.raises(EmptyInputError):
        train([], MODEL, FAST, progress=False)


def test_training_is_deterministic(corpus, tmp_path):
    a = train(corpus, MODEL, FAST, out_dir=tmp_path, progress=False)
    b = train(corpus, MODEL, FAST, progress=False)
    for name in a.params.names():
        assert np.array_equal(a.params[name], b.params[name])
    assert a.trace["loss"].tolist() == b.trace["loss"].tolist()
    assert list(a.trace.columns) == ["step", "lr", "loss", "grad_norm", "clipped_norm"]
    assert (a.trace["clipped_norm"] <= FAST.grad_clip + 1e-6).all()

    saved = checkpoint.load(tmp_path / "model.ckpt")
    assert saved.metadata["steps_done"] == 5
    assert np.array_equal(saved.params["stop_head.bias"], a.params["stop_head.bias"])
    assert len(pd.read_csv(tmp_path / "loss_trace.csv")) == 5


def test_mixed_configs_and_dev_loss(corpus):
    config = TrainConfig(steps=4, batch=2, warmup_steps=1, log_every=0, mix_configs=True, eval_every=2)
    result = train(corpus, MODEL, config, dev_corpus=corpus[:2], progress=False)
    assert result.trace["dev_loss"].notna().sum() == 2


def test_numerical_error_reports_the_step(corpus, monkeypatch):
    real_grad = trainer.grad
    calls = []

    def flaky(params, seqs, **kwargs):
        result = real_grad(params, seqs, **kwargs)
        calls.append(1)
        if len(calls) == 3:
            return GradResult(result.loss, {k: np.full_like(g, np.nan) for k, g in result.grads.items()})
        return result

    monkeypatch.setattr(trainer, "grad", flaky)
    with np.errstate(all="ignore"), pytest.raises(NumericalError) as info:
        train(corpus, MODEL, FAST, progress=False)
    assert info.value.step == 2


def test_ground_truth_scores_zero(corpus):
    params = train(corpus, MODEL, FAST, progress=False).params
    configs = [
        InterleaveConfig(Scheme.S1, 2, 1),
        InterleaveConfig(Scheme.S2, 2, 2),
        InterleaveConfig(Scheme.NON_STREAMING, 1, 1),
    ]
    engine = EngineConfig(silence_prompt_frames=0, max_frames_per_segment=5)
    result = evaluate(params, corpus[:3], configs, SPEC, engine_defaults=engine, progress=False)

    table = result.table.set_index("scheme", drop=False)
    assert list(result.table.columns) == ["scheme", "m", "n", "cer", "utterances", "failures"]
    truth = table.loc[GROUND_TRUTH]
    assert (truth["cer"], truth["m"], truth["n"], truth["utterances"]) == (0.0, 0, 0, 3)
    streamed = result.table[result.table["scheme"] != GROUND_TRUTH]
    assert set(streamed["scheme"]) == {"S1", "S2", "NonStreaming"}
    assert ((streamed["utterances"] + streamed["failures"]) == 3).all()
    assert len(result.per_utterance) == 12
    assert "invalid_config" not in set(result.per_utterance["error"].dropna())
    with pytest.raises(EmptyInputError):
        evaluate(params, [], configs, SPEC, progress=False)


def test_silent_output_counts_as_full_error(corpus):
    params = init_params(MODEL, seed=0)
    params.tensors["stop_head.weight"][:] = 0.0
    params.tensors["stop_head.bias"][:] = (-5.0, 5.0)
    configs = [InterleaveConfig(Scheme.S1, 2, 1), InterleaveConfig(Scheme.NON_STREAMING, 1, 1)]
    engine = EngineConfig(silence_prompt_frames=0)
    result = evaluate(params, corpus[:3], configs, SPEC, engine_defaults=engine, progress=False)

    streamed = result.table[result.table["scheme"] != GROUND_TRUTH]
    assert streamed["cer"].tolist() == [1.0, 1.0]
    assert streamed["utterances"].tolist() == [3, 3]
    assert streamed["failures"].tolist() == [0, 0]
    rows = result.per_utterance[result.per_utterance["scheme"] != GROUND_TRUTH]
    assert (rows["hypothesis"] == "").all()


def test_engine_failures_stay_out_of_the_mean(corpus):
    params = init_params(MODEL, seed=0)
    params.tensors["stop_head.weight"][:] = 0.0
    params.tensors["stop_head.bias"][:] = (5.0, -5.0)
    engine = EngineConfig(silence_prompt_frames=0, max_frames_per_segment=2)
    configs = [InterleaveConfig(Scheme.S2, 1, 1), InterleaveConfig(Scheme.NON_STREAMING, 1, 1)]
    result = evaluate(params, corpus[:2], configs, SPEC, engine_defaults=engine, progress=False)

    streamed = result.table[result.table["scheme"] != GROUND_TRUTH]
    assert streamed["utterances"].tolist() == [0, 0]
    assert streamed["failures"].tolist() == [2, 2]
    assert streamed["cer"].isna().all()
    rows = result.per_utterance[result.per_utterance["scheme"] != GROUND_TRUTH]
    assert set(rows["error"]) == {"segment_overrun"}
