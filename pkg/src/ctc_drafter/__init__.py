"""Speculative decoding with a CTC-trained draft module, on a small numpy transformer."""

from .bench import compute_beta, compute_gamma, run_benchmark
from .ctc import collapse, collapsed_prefix_marginals, ctc_log_prob, min_alignment_length
from .decoding import DecodeConfig, generate, generate_autoregressive
from .models import BaseModel, DraftModule, KVCache, ModelConfig, Vocab

__all__ = [
    "BaseModel", "DecodeConfig", "DraftModule", "KVCache", "ModelConfig", "Vocab",
    "collapse", "collapsed_prefix_marginals", "compute_beta", "compute_gamma", "ctc_log_prob",
    "generate", "generate_autoregressive", "min_alignment_length", "run_benchmark",
]
