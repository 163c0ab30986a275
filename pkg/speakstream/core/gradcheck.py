"""Finite-difference check of the model's analytic gradients."""
from __future__ import annotations

import logging
from dataclasses import replace
from typing import List, Optional

import numpy as np
import pandas as pd

from .corpus import Alignment, Utterance
from .interleave import InterleaveConfig, Scheme, TokenSequence, build_sequence
from .model import ModelConfig, Params, grad, init_params

logger = logging.getLogger(__name__)

TINY_MODEL = ModelConfig(
    num_layers=2, model_dim=16, num_heads=2, ffn_dim=32, max_positions=128, alphabet="abcd", num_channels=4, num_bins=4
)


def random_batch(config: ModelConfig, rng: np.random.Generator, count: int = 2, words: int = 3) -> List[TokenSequence]:
    """Interleaved sequences over random words and random frames."""
    seqs = []
    for k in range(count):
        ws = ["".join(rng.choice(list(config.alphabet), size=int(rng.integers(1, 4)))) for _ in range(words)]
        lengths = rng.integers(1, 4, size=words)
        ends = np.cumsum(lengths)
        spans = tuple((int(e - l), int(e)) for e, l in zip(ends, lengths))
        frames = rng.integers(0, config.num_bins, size=(int(ends[-1]), config.num_channels)).astype(np.uint8)
        utt = Utterance(id=f"rand-{k}", words=ws, frames=frames, alignment=Alignment(spans))
        seqs.append(build_sequence(utt, InterleaveConfig(Scheme.S1, m=2, n=1)))
    return seqs


def _loss64(params: Params, batch: List[TokenSequence]) -> float:
    return grad(params, batch).loss


def grad_check(
    params: Optional[Params] = None,
    batch: Optional[List[TokenSequence]] = None,
    dtype: str = "float64",
    probes: int = 6,
    seed: int = 0,
    floor: float = 1e-2,
) -> pd.DataFrame:
    """Max relative error per parameter between analytic and numeric gradients.

    The numeric side always uses float64 central differences (step 1e-5 for
    a float64 check, 1e-3 for float32). ``probes`` random entries are
    checked per tensor; the relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(replace(TINY_MODEL, dtype="float64"), seed=seed)
        # move gains and biases off their init values
        for name, arr in params.tensors.items():
            if ".ln" in name or name.startswith("final_ln") or name.endswith(".bias"):
                arr += rng.normal(0.0, 0.1, size=arr.shape)
    if batch is None:
        batch = random_batch(params.config, rng)

    analytic = grad(params.astype(dtype), batch).grads
    ref = params.astype("float64")
    step = 1e-5 if dtype == "float64" else 1e-3

    rows = []
    for name in ref.names():
        arr = ref.tensors[name]
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        worst = 0.0
        for idx in picks:
            old = flat[idx]
            flat[idx] = old + step
            up = _loss64(ref, batch)
            flat[idx] = old - step
            down = _loss64(ref, batch)
            flat[idx] = old
            numeric = (up - down) / (2 * step)
            a = float(analytic[name].reshape(-1)[idx])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
        rows.append({"parameter": name, "dtype": dtype, "probes": len(picks), "max_rel_error": worst})
    report = pd.DataFrame(rows)
    logger.info("%s gradient check: max relative error %.3e", dtype, report["max_rel_error"].max())
    return report
