from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import click
import librosa
import numpy as np
import pandas as pd
import soundfile as sf

# Ensure package import works when CWD != repo root
_THIS_DIR = os.path.dirname(__file__)
_REPO_ROOT = os.path.abspath(os.path.join(_THIS_DIR, "..", ".."))
if _REPO_ROOT not in sys.path:
    sys.path.insert(0, _REPO_ROOT)

import config as project_config  # noqa: E402
from speakstream.app.settings import Settings  # noqa: E402
from speakstream.core import bench, checkpoint, plots  # noqa: E402
from speakstream.core.corpus import generate_corpus, read_manifest, write_manifest  # noqa: E402
from speakstream.core.dmel import BinSpec, dequantize, discretize, fit_bin_spec, mel_spectrogram, write_dump  # noqa: E402
from speakstream.core.engine import EngineConfig, run_offline, run_stream  # noqa: E402
from speakstream.core.errors import EmptyInputError, InvalidConfigError, SpeakStreamError  # noqa: E402
from speakstream.core.gradcheck import grad_check  # noqa: E402
from speakstream.core.interleave import InterleaveConfig, Scheme, build_sequence  # noqa: E402
from speakstream.core.trainer import config_pool, evaluate, train  # noqa: E402
from speakstream.core.utils import ms  # noqa: E402
from speakstream.core.vocoder import VocoderMode, synthesize, write_wav  # noqa: E402

logger = logging.getLogger("speakstream")

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"


class Context:
    def __init__(self, settings: Settings, out_dir: Path, quiet: bool):
        self.settings = settings
        self.out_dir = out_dir
        self.quiet = quiet

    def path(self, *parts: str) -> Path:
        p = self.out_dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


def _parse_config(value: str) -> InterleaveConfig:
    """``S1:3:1`` -> InterleaveConfig(S1, m=3, n=1)."""
    try:
        scheme, m, n = value.split(":")
        return InterleaveConfig(Scheme(scheme), int(m), int(n)).validate()
    except ValueError as exc:
        raise InvalidConfigError(f"bad configuration {value!r}, expected SCHEME:m:n") from exc


def _bins(ctx: Context, path: Optional[str]) -> BinSpec:
    if path:
        return BinSpec.load(path)
    default = ctx.out_dir / "bins.yaml"
    return BinSpec.load(default) if default.exists() else ctx.settings.bins


def _read_text(text: Optional[str], input_path: Optional[str]) -> List[str]:
    if text is None:
        raw = Path(input_path).read_text(encoding="utf-8") if input_path and input_path != "-" else sys.stdin.read()
    else:
        raw = text
    words = raw.split()
    if not words:
        raise EmptyInputError("no words to synthesize")
    return words


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None, help="YAML configuration file.")
@click.option("--seed", type=int, default=None, help="Override every seed.")
@click.option("--out-dir", type=click.Path(file_okay=False), default="runs", show_default=True)
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.option("-q", "--quiet", is_flag=True, help="No progress bars.")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], seed: Optional[int], out_dir: str, verbose: bool, quiet: bool) -> None:
    """Streaming text-to-speech toolkit: corpus, training, synthesis and latency."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    cfg = project_config.load(config_path) if config_path else project_config.CFG
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ctx.obj = Context(Settings.from_config(cfg, seed=seed), out, quiet)


@cli.command("gen-corpus")
@click.option("--num", type=int, default=None, help="Training utterances (default from config).")
@click.option("--dev", type=int, default=None, help="Dev utterances (default from config).")
@click.option("--workers", type=int, default=1, show_default=True)
@click.pass_obj
def gen_corpus(ctx: Context, num: Optional[int], dev: Optional[int], workers: int) -> None:
    """Generate the synthetic corpus with exact word alignments."""
    s = ctx.settings
    num = s.corpus.num_utterances if num is None else num
    dev = s.dev_utterances if dev is None else dev
    utts = generate_corpus(replace(s.corpus, num_utterances=num + dev), workers=workers)
    write_manifest(ctx.path("corpus", "train.jsonl"), utts[:num], ctx.out_dir / "corpus" / "frames", s.bins.num_bins, s.mel.hop)
    write_manifest(ctx.path("corpus", "dev.jsonl"), utts[num:], ctx.out_dir / "corpus" / "frames", s.bins.num_bins, s.mel.hop)
    s.bins.save(ctx.path("bins.yaml"))
    click.echo(f"{num} train + {dev} dev utterances -> {ctx.out_dir / 'corpus'}")


@cli.command("fit-bins")
@click.argument("audio", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dump/--no-dump", default=False, help="Also write one dMel dump per file.")
@click.pass_obj
def fit_bins(ctx: Context, audio: Sequence[str], dump: bool) -> None:
    """Fit the global bin range on audio files and optionally quantize them."""
    s = ctx.settings
    mels = []
    for path in audio:
        wave, sr = sf.read(path, dtype="float64", always_2d=True)
        mono = wave.mean(axis=1)
        if sr != s.mel.sample_rate:
            mono = librosa.resample(mono, orig_sr=sr, target_sr=s.mel.sample_rate)
        mels.append(mel_spectrogram(mono, s.mel.sample_rate, s.mel))
    spec = fit_bin_spec(mels, s.bins.num_bins)
    spec.save(ctx.path("bins.yaml"))
    click.echo(f"bins: {spec.num_bins} over [{spec.lo:.3f}, {spec.hi:.3f}] -> {ctx.out_dir / 'bins.yaml'}")
    if dump:
        for path, mel in zip(audio, mels):
            target = ctx.path("dmel", Path(path).stem + ".dmel")
            write_dump(target, discretize(mel, spec), spec.num_bins, s.mel.hop)


@cli.command("interleave")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--index", type=int, default=0, show_default=True)
@click.option("--scheme", type=click.Choice([s.value for s in Scheme]), default="S1", show_default=True)
@click.option("-m", "m", type=int, default=3, show_default=True)
@click.option("-n", "n", type=int, default=1, show_default=True)
@click.pass_obj
def interleave_cmd(ctx: Context, manifest: str, index: int, scheme: str, m: int, n: int) -> None:
    """Print the token sequence of one utterance: kind, segment, mask, payload."""
    corpus = read_manifest(manifest)
    if not 0 <= index < len(corpus):
        raise EmptyInputError(f"manifest has {len(corpus)} utterances, no index {index}")
    seq = build_sequence(corpus[index], InterleaveConfig(Scheme(scheme), m, n))
    click.echo("\n".join(seq.dump_lines()))


@cli.command("train")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--dev-manifest", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--scheme", type=click.Choice(["S1", "S2", "NonStreaming"]), default=None)
@click.option("-m", "m", type=int, default=None)
@click.option("-n", "n", type=int, default=None)
@click.option("--plots/--no-plots", "make_plots", default=False, help="Also write HTML figures.")
@click.pass_obj
def train_cmd(ctx: Context, manifest, dev_manifest, steps, scheme, m, n, make_plots) -> None:
    """Train a model on one interleaving configuration."""
    s = ctx.settings
    corpus = read_manifest(manifest or ctx.out_dir / "corpus" / "train.jsonl")
    dev_path = dev_manifest or ctx.out_dir / "corpus" / "dev.jsonl"
    dev = read_manifest(dev_path) if Path(dev_path).exists() else None
    cfg = s.train
    il = cfg.interleave
    il = InterleaveConfig(Scheme(scheme) if scheme else il.scheme, m or il.m, n or il.n).validate()
    cfg = replace(cfg, interleave=il, steps=steps if steps is not None else cfg.steps)
    if cfg.warmup_steps > cfg.steps:
        cfg = replace(cfg, warmup_steps=cfg.steps // 10)
    result = train(corpus, s.model, cfg, out_dir=ctx.out_dir, dev_corpus=dev, progress=not ctx.quiet)
    if make_plots:
        plots.loss_curve(result.trace).write_html(ctx.path("loss.html"))
    last = result.trace.iloc[-1]
    click.echo(f"{il.label}: final loss {last['loss']:.4f} -> {result.checkpoint}")


@cli.command("eval")
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None, help="Dev manifest.")
@click.option("--config", "configs", multiple=True, help="SCHEME:m:n, repeatable.")
@click.option("--grid", is_flag=True, help="Every S1/S2 configuration up to eval.max_window.")
@click.option("--limit", type=int, default=None, help="Use the first N dev utterances.")
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--plots/--no-plots", "make_plots", default=False, help="Also write HTML figures.")
@click.pass_obj
def eval_cmd(ctx: Context, ckpt_path, manifest, configs, grid, limit, workers, make_plots) -> None:
    """CER of streamed synthesis per (scheme, m, n), read back by the corpus oracle."""
    s = ctx.settings
    params = checkpoint.load(ckpt_path or ctx.out_dir / "model.ckpt").params
    dev = read_manifest(manifest or ctx.out_dir / "corpus" / "dev.jsonl")[:limit]
    if grid:
        chosen = config_pool(s.eval_max_window)
    elif configs:
        chosen = [_parse_config(c) for c in configs]
    else:
        chosen = [InterleaveConfig(Scheme.S1, 3, 1), InterleaveConfig(Scheme.S1, 1, 1), InterleaveConfig(Scheme.S2, 3, 2), InterleaveConfig(Scheme.S1, 3, 2)]
    engine = replace(s.engine, silence_prompt_frames=s.eval_silence_prompt_frames)
    result = evaluate(params, dev, chosen, s.corpus, engine_defaults=engine, workers=workers, progress=not ctx.quiet)
    result.table.to_csv(ctx.path("cer_table.csv"), index=False)
    result.per_utterance.to_csv(ctx.path("cer_per_utterance.csv"), index=False)
    pivot = result.grid()
    pivot.to_csv(ctx.path("cer_grid.csv"))
    if make_plots:
        plots.cer_grid(pivot).write_html(ctx.path("cer_grid.html"))
    click.echo(result.table.to_string(index=False))


@cli.command("synth")
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--text", default=None, help="Text to speak (default: --input or stdin).")
@click.option("--input", "input_path", default=None, help="Text file, '-' for stdin.")
@click.option("--delay", type=float, default=0.0, show_default=True, help="Seconds between words.")
@click.option("--offline", is_flag=True, help="Give the engine all words up front.")
@click.option("--wav", default=None, help="Audio output path, '-' for raw PCM on stdout.")
@click.option("--bins", "bins_path", default=None, help="Bin specification YAML.")
@click.option("--plots/--no-plots", "make_plots", default=False, help="Also write HTML figures.")
@click.pass_obj
def synth(ctx: Context, ckpt_path, text, input_path, delay, offline, wav, bins_path, make_plots) -> None:
    """Synthesize text word by word; writes frames, latency report and audio."""
    s = ctx.settings
    params = checkpoint.load(ckpt_path or ctx.out_dir / "model.ckpt").params
    words = _read_text(text, input_path)
    engine: EngineConfig = s.engine
    if offline:
        frames = run_offline(params, engine, words)
        report = None
    else:
        result = run_stream(params, engine, [(delay, w) for w in words])
        frames, report = result.frames, result.report
    spec = _bins(ctx, bins_path)
    write_dump(ctx.path("synth", "frames.dmel"), frames, spec.num_bins, s.mel.hop)
    if report is not None:
        pd.DataFrame(
            [{"tts_latency": report.tts_latency, "words_waited": report.words_waited,
              "frames": report.frames_emitted, "segments": report.segments}]
        ).to_csv(ctx.path("synth", "latency.csv"), index=False)
        pd.DataFrame({"segment": range(1, len(report.segment_times) + 1), "seconds": report.segment_times}).to_csv(
            ctx.path("synth", "segments.csv"), index=False
        )
        click.echo(f"first frame after {ms(report.tts_latency)} ({report.words_waited} words), {report.frames_emitted} frames", err=wav == "-")
    if len(frames):
        audio = synthesize(dequantize(frames, spec).frames, s.vocoder)
        write_wav(wav or ctx.path("synth", "audio.wav"), audio, s.vocoder.sample_rate)
    if make_plots:
        plots.dmel_spectrogram(frames, s.mel.hop).write_html(ctx.path("synth", "dmel.html"))


@cli.command("grad-check")
@click.option("--probes", type=int, default=6, show_default=True)
@click.pass_obj
def grad_check_cmd(ctx: Context, probes: int) -> None:
    """Analytic vs finite-difference gradients on a 2-layer, 16-dim model."""
    seed = ctx.settings.train.seed
    report = pd.concat([grad_check(dtype=d, probes=probes, seed=seed) for d in ("float64", "float32")], ignore_index=True)
    report.to_csv(ctx.path("grad_check.csv"), index=False)
    worst = report.groupby("dtype")["max_rel_error"].max()
    click.echo(report.to_string(index=False))
    click.echo(f"max relative error: float64 {worst['float64']:.2e} (< 1e-6), float32 {worst['float32']:.2e} (< 1e-3)")
    if worst["float64"] >= 1e-6 or worst["float32"] >= 1e-3:
        raise click.ClickException("gradient check failed")


@cli.command("bench-latency")
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None, help="Sentences come from this manifest.")
@click.option("--window", "windows", type=int, multiple=True, help="Text window m, repeatable.")
@click.option("--runs", type=int, default=None)
@click.option("--sentences", "num_sentences", type=int, default=None)
@click.option("--bins", "bins_path", default=None)
@click.option("--plots/--no-plots", "make_plots", default=False, help="Also write HTML figures.")
@click.pass_obj
def bench_latency_cmd(ctx: Context, ckpt_path, manifest, windows, runs, num_sentences, bins_path, make_plots) -> None:
    """First-output latency of the engine -> vocoder pipeline, both vocoder modes."""
    s = ctx.settings
    params = checkpoint.load(ckpt_path or ctx.out_dir / "model.ckpt").params
    corpus = read_manifest(manifest or ctx.out_dir / "corpus" / "dev.jsonl")
    count = num_sentences or int(s.bench.get("sentences", 25))
    rng = np.random.default_rng(s.train.seed)
    picks = rng.choice(len(corpus), size=min(count, len(corpus)), replace=False)
    sentences = [corpus[int(i)].words for i in sorted(picks)]
    windows = list(windows) or [int(w) for w in s.bench.get("windows", [s.engine.m])]
    vocoders = [replace(s.vocoder, mode=VocoderMode.STREAMING), replace(s.vocoder, mode=VocoderMode.BUFFERED)]
    sweep = bench.latency_sweep(
        params, s.engine, vocoders, windows, sentences, _bins(ctx, bins_path),
        runs=runs or int(s.bench.get("runs", 1)), progress=not ctx.quiet,
    )
    sweep.to_csv(ctx.path("latency_summary.csv"), index=False)
    if make_plots:
        plots.latency_bars(sweep).write_html(ctx.path("latency.html"))
    cols = ["m", "vocoder", "frame_latency", "tts_mean_ms", "vocoder_mean_ms", "total_mean_ms", "projected_buffered_ms", "first_phoneme_fraction"]
    click.echo(sweep[cols].to_string(index=False, float_format=lambda v: f"{v:.1f}"))


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except SpeakStreamError as exc:
        click.echo(json.dumps({"error": exc.code, "message": str(exc)}), err=True)
        return 2
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.exception("unexpected failure")
        click.echo(json.dumps({"error": "internal_error", "message": str(exc)}), err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
