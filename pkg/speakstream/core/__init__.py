from .corpus import CorpusSpec, Utterance, generate_corpus, oracle_decode
from .dmel import BinSpec, MelConfig, dequantize, discretize, fit_bin_spec, mel_spectrogram
from .engine import EngineConfig, run_nonstreaming, run_offline, run_stream
from .interleave import InterleaveConfig, Scheme, build_sequence, strip_speech
from .metrics import cer, wer
from .model import ModelConfig, Params, forward, generate_step, grad, init_params, loss
from .trainer import TrainConfig, evaluate, train
from .vocoder import VocoderConfig, VocoderMode, synthesize

__all__ = [
	"CorpusSpec",
	"Utterance",
	"generate_corpus",
	"oracle_decode",
	"BinSpec",
	"MelConfig",
	"dequantize",
	"discretize",
	"fit_bin_spec",
	"mel_spectrogram",
	"EngineConfig",
	"run_nonstreaming",
	"run_offline",
	"run_stream",
	"InterleaveConfig",
	"Scheme",
	"build_sequence",
	"strip_speech",
	"cer",
	"wer",
	"ModelConfig",
	"Params",
	"forward",
	"generate_step",
	"grad",
	"init_params",
	"loss",
	"TrainConfig",
	"evaluate",
	"train",
	"VocoderConfig",
	"VocoderMode",
	"synthesize",
]
