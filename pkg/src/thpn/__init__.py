"""Retrieval-guided pointer-network dialogue models on a small numpy autodiff core."""

from .corpus import (Dialogue, KBTriple, SyntheticConfig, Turn, Vocabulary, build_context,
                     build_vocab, extract_qa_pairs, generate_synthetic, load_dialogues, parse_babi,
                     serialize_babi, tokenize)
from .metrics import MetricsReport, bleu, compute_report, entity_f1, per_response_accuracy
from .model import THPN, Example, Hyperparams, Provenance
from .numerics import ConfigurationError, DimensionError, RngState, Tensor
from .retrieval import RetrievalConfig, build_repository, retrieve
from .training import (CheckpointError, evaluate, load_checkpoint, prepare_examples,
                       save_checkpoint, train)

__version__ = "0.1.0"
