"""Context-aware prosody modelling for multi-speaker audiobook synthesis."""
from .checkpoint import Bundle, load_checkpoint, save_checkpoint
from .corpus import GeneratorSpec, generate_synthetic_corpus, split_corpus
from .inference import synthesize_book, synthesize_with_context
from .metrics import ProsodyScores, evaluate_run
from .model import ContextTTS, ModelConfig
from .training import TrainConfig, build_bundle, train

__version__ = "0.1.0"

__all__ = [
    "Bundle", "ContextTTS", "GeneratorSpec", "ModelConfig", "ProsodyScores", "TrainConfig", "build_bundle",
    "evaluate_run", "generate_synthetic_corpus", "load_checkpoint", "save_checkpoint", "split_corpus",
    "synthesize_book", "synthesize_with_context", "train",
]
