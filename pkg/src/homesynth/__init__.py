"""Context-aware synthesis of smart-home behavior sequences.

Pipeline: segment raw behavior logs, compress them semantically, mine
transition hints, prompt a chat-completions endpoint, then filter the
synthetic output with a two-stage reconstruction-loss test.
"""

from .core import (
    Behavior,
    BehaviorSequence,
    ContextTransition,
    ContractError,
    Dataset,
    DeviceCatalog,
    Origin,
    TransitionKind,
    load_catalog,
    parse_behavior_log,
    validate_against_catalog,
)
from .segment import PairRule, SplitConfig, semantic_check, split
from .seqmodel import ModelConfig, SeqAutoencoder, Vocab, reconstruction_loss, train_autoencoder
from .compress import CompressionResult, compress, cosine_similarity, sequence_embedding
from .graph import BehaviorGraph, HintSet, build_graph, hints_to_json, top_k_hints, transition_matrix
from .synth import LlmClient, LlmClientConfig, PromptBundle, assemble_prompt, parse_response, synthesize
from .filtering import FilterResult, OutlierPartition, detect_outliers, evaluate_outliers, percentile, run_filter
from .evaluate import AdMetrics, RankMetrics, ad_evaluate, next_action_predictor, rank_metrics
from .simulate import HouseholdProfile, MockLlmClient, default_profile, generate_corpus, mock_llm
from .config import RunConfig, load_config
from .pipeline import run_pipeline

__version__ = "0.1.0"
