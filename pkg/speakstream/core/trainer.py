from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import checkpoint as ckpt
from .corpus import CorpusSpec, Utterance, oracle_decode
from .engine import EngineConfig, run_nonstreaming, run_offline
from .errors import (
    EmptyInputError,
    InvalidConfigError,
    InvalidInputError,
    NumericalError,
    SpeakStreamError,
)
from .interleave import InterleaveConfig, Scheme, TokenSequence, build_sequence
from .metrics import cer
from .model import ModelConfig, Params, grad, init_params

logger = logging.getLogger(__name__)

GROUND_TRUTH = "GroundTruth"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch: int = 8  # utterances per step
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    grad_clip: float = 1.0
    seed: int = 0
    interleave: InterleaveConfig = InterleaveConfig()
    eval_every: int = 0  # 0 = no periodic dev loss
    log_every: int = 50
    mix_configs: bool = False
    workers: int = 1
    microbatch: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if not self.steps >= self.warmup_steps >= 0:
            raise InvalidConfigError(f"need steps >= warmup_steps >= 0, got {self.steps}, {self.warmup_steps}")
        if self.peak_lr <= 0 or self.grad_clip <= 0:
            raise InvalidConfigError("peak_lr and grad_clip must be positive")
        if self.batch < 1 or self.microbatch < 1 or self.workers < 1:
            raise InvalidConfigError("batch, microbatch and workers must be >= 1")
        self.interleave.validate()
        return self

    def record(self) -> Dict[str, Any]:
        out = asdict(self)
        out["interleave"] = {"scheme": self.interleave.scheme.value, "m": self.interleave.m, "n": self.interleave.n}
        return out


def lr_at(config: TrainConfig, step: int) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to 0 at ``steps``."""
    if not 0 <= step <= config.steps:
        raise InvalidInputError(f"step {step} outside [0, {config.steps}]")
    if step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    decay = config.steps - config.warmup_steps
    progress = (step - config.warmup_steps) / decay if decay else 0.0
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def update_lr(config: TrainConfig, step: int) -> float:
    """Rate of 0-based update ``step``.

    The schedule runs over ``steps + 1`` points and updates take points
    1..steps, so neither the first nor the last update is spent at rate 0.
    """
    return lr_at(replace(config, steps=config.steps + 1), step + 1)


def config_pool(max_window: int) -> List[InterleaveConfig]:
    """Every S1/S2 configuration with 1 <= n <= m <= max_window."""
    return [
        InterleaveConfig(scheme, m, n)
        for scheme in (Scheme.S1, Scheme.S2)
        for m in range(1, max_window + 1)
        for n in range(1, m + 1)
    ]


# ------------------------------- Optimizer ------------------------------- #
@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Params) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.tensors.items()},
            v={k: np.zeros_like(a) for k, a in params.tensors.items()},
        )


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[float, float]:
    """Scale ``grads`` in place; returns (norm before, norm after)."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
        return norm, global_norm(grads)
    return norm, norm


def adam_update(params: Params, grads: Dict[str, np.ndarray], state: AdamState, lr: float, config: TrainConfig) -> None:
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.tensors[name] -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(params.tensors[name].dtype)


# -------------------------------- Training ------------------------------- #
@dataclass
class TrainResult:
    params: Params
    trace: pd.DataFrame  # step, lr, loss, grad_norm, clipped_norm
    checkpoint: Optional[Path] = None
    metadata: Dict[str, Any] = field(default_factory=dict)


def _sequences(corpus: Sequence[Utterance], config: TrainConfig, rng: np.random.Generator, indices: np.ndarray) -> List[TokenSequence]:
    if not config.mix_configs:
        return [build_sequence(corpus[i], config.interleave) for i in indices]
    pool = config_pool(config.interleave.m)
    return [build_sequence(corpus[i], pool[int(rng.integers(len(pool)))]) for i in indices]


def _batch_order(num_items: int, batch: int, steps: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Fixed sequence of batches: epochs of seeded permutations."""
    order: List[int] = []
    while len(order) < steps * batch:
        order.extend(rng.permutation(num_items).tolist())
    return [np.array(order[s * batch : (s + 1) * batch]) for s in range(steps)]


def train(
    corpus: Sequence[Utterance],
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    dev_corpus: Optional[Sequence[Utterance]] = None,
    progress: bool = True,
) -> TrainResult:
    """Adam with warmup + cosine schedule and global-norm clipping.

    Batches are drawn in a fixed order from ``config.seed``, so two runs
    with the same inputs produce identical parameters.
    """
    if not corpus:
        raise EmptyInputError("training corpus is empty")
    config.validate()
    model_config.validate()

    params = init_params(model_config, seed=config.seed)
    adam = AdamState.zeros(params)
    rng = np.random.default_rng(config.seed)
    batches = _batch_order(len(corpus), config.batch, config.steps, rng)
    mix_rng = np.random.default_rng([config.seed, 1])
    logger.info(
        "training %d params on %d utterances, %s, %d steps",
        params.num_parameters, len(corpus), config.interleave.label, config.steps,
    )

    rows = []
    bar = tqdm(range(config.steps), desc="train", disable=not progress)
    for step in bar:
        seqs = _sequences(corpus, config, mix_rng, batches[step])
        try:
            result = grad(params, seqs, workers=config.workers, microbatch=config.microbatch)
        except NumericalError as exc:
            raise NumericalError(str(exc), step=step) from exc
        norm, clipped = clip_by_global_norm(result.grads, config.grad_clip)
        lr = update_lr(config, step)
        adam_update(params, result.grads, adam, lr, config)
        if not all(np.all(np.isfinite(a)) for a in params.tensors.values()):
            raise NumericalError("parameters became non-finite", step=step)
        rows.append({"step": step, "lr": lr, "loss": result.loss, "grad_norm": norm, "clipped_norm": clipped})
        bar.set_postfix(loss=f"{result.loss:.4f}")
        if config.log_every and step % config.log_every == 0:
            logger.info("step %d | loss %.4f | lr %.2e | grad_norm %.3f", step, result.loss, lr, norm)
        if dev_corpus and config.eval_every and (step + 1) % config.eval_every == 0:
            dev = dev_loss(params, dev_corpus, config.interleave)
            rows[-1]["dev_loss"] = dev
            logger.info("step %d | dev loss %.4f", step, dev)

    trace = pd.DataFrame(rows)
    metadata = {
        "train": config.record(),
        "adam": {"beta1": config.beta1, "beta2": config.beta2, "eps": config.eps},
        "steps_done": config.steps,
        "final_loss": float(trace["loss"].iloc[-1]) if len(trace) else None,
    }
    path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "model.ckpt"
        ckpt.save(path, params, metadata)
        trace.to_csv(out / "loss_trace.csv", index=False)
        logger.info("checkpoint written to %s", path)
    return TrainResult(params=params, trace=trace, checkpoint=path, metadata=metadata)


def dev_loss(params: Params, corpus: Sequence[Utterance], interleave: InterleaveConfig, limit: int = 64) -> float:
    seqs = [build_sequence(u, interleave) for u in list(corpus)[:limit]]
    return grad(params, seqs).loss


# ------------------------------- Evaluation ------------------------------ #
@dataclass
class EvalResult:
    table: pd.DataFrame  # scheme, m, n, cer, utterances, failures
    per_utterance: pd.DataFrame  # scheme, m, n, id, reference, hypothesis, cer, error

    def grid(self) -> pd.DataFrame:
        """Mean CER with rows = window m and columns = (hop n, scheme)."""
        streamed = self.table[self.table["scheme"] != GROUND_TRUTH]
        return streamed.pivot_table(index="m", columns=["n", "scheme"], values="cer")


def _score(params: Params, engine: EngineConfig, spec: CorpusSpec, utt: Utterance) -> Dict[str, Any]:
    """Engine failures are recorded and left out of the mean; frames the
    oracle cannot read (none at all, or no valid segmentation) score as an
    empty hypothesis."""
    row: Dict[str, Any] = {"id": utt.id, "reference": utt.text, "hypothesis": None, "cer": np.nan, "error": None}
    try:
        if engine.scheme is Scheme.NON_STREAMING:
            frames = run_nonstreaming(params, engine, utt.words)
        else:
            frames = run_offline(params, engine, utt.words)
    except SpeakStreamError as exc:
        row["error"] = exc.code
        logger.debug("%s failed under %s(m=%d,n=%d): %s", utt.id, engine.scheme.value, engine.m, engine.n, exc)
        return row
    try:
        hyp = oracle_decode(frames, spec)
    except (EmptyInputError, InvalidInputError) as exc:
        logger.debug("%s: unreadable output (%s), scored as silence", utt.id, exc)
        hyp = ""
    row.update(hypothesis=hyp, cer=cer(utt.text, hyp))
    return row


def evaluate(
    params: Params,
    dev_corpus: Sequence[Utterance],
    configs: Sequence[InterleaveConfig],
    corpus_spec: CorpusSpec,
    engine_defaults: Optional[EngineConfig] = None,
    workers: int = 1,
    progress: bool = True,
) -> EvalResult:
    """Mean CER of streamed synthesis for each (scheme, m, n).

    Frames come from the engine with all text known up front (identical to
    streaming under greedy decoding) and are read back by the corpus oracle.
    NonStreaming configurations use the single-segment baseline decode.
    A GroundTruth row scores the reference frames the same way.
    """
    if not dev_corpus:
        raise EmptyInputError("dev corpus is empty")
    base = engine_defaults or EngineConfig(silence_prompt_frames=0)
    rows: List[Dict[str, Any]] = []

    for utt in dev_corpus:
        hyp = oracle_decode(utt.frames, corpus_spec)
        rows.append(
            {"scheme": GROUND_TRUTH, "m": 0, "n": 0, "id": utt.id, "reference": utt.text,
             "hypothesis": hyp, "cer": cer(utt.text, hyp), "error": None}
        )

    for cfg in tqdm(configs, desc="eval", disable=not progress):
        cfg.validate()
        engine = EngineConfig(
            scheme=cfg.scheme,
            m=cfg.m,
            n=cfg.n,
            max_frames_per_segment=base.max_frames_per_segment,
            silence_prompt_frames=base.silence_prompt_frames,
            temperature=base.temperature,
            seed=base.seed,
            frames_per_char_base=corpus_spec.max_frames_per_char,
            max_chars_per_word=corpus_spec.chars_per_word[1],
        )
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                scored = list(pool.map(lambda u: _score(params, engine, corpus_spec, u), dev_corpus))
        else:
            scored = [_score(params, engine, corpus_spec, u) for u in dev_corpus]
        for row in scored:
            row.update(scheme=cfg.scheme.value, m=cfg.m, n=cfg.n)
        rows.extend(scored)
        ok = [r["cer"] for r in scored if r["error"] is None]
        logger.info("%s: CER %.4f over %d utterances (%d failed)", cfg.label, np.mean(ok) if ok else np.nan, len(ok), len(scored) - len(ok))

    per = pd.DataFrame(rows, columns=["scheme", "m", "n", "id", "reference", "hypothesis", "cer", "error"])
    per = per.sort_values(["scheme", "m", "n", "id"], kind="stable").reset_index(drop=True)
    table = (
        per.groupby(["scheme", "m", "n"], sort=False)
        .agg(cer=("cer", "mean"), utterances=("cer", "count"), failures=("error", lambda e: int(e.notna().sum())))
        .reset_index()
    )
    return EvalResult(table=table, per_utterance=per)
