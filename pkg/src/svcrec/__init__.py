"""svcrec: evolution-aware service recommendation at desk scale.

Trie-guided constrained decoding with deduplication, rank-one editing of a
toy autoregressive model's key-value projection, tf-idf retrieval prompts,
and an evaluation/analysis harness for ranking metrics and decoding
diagnostics.
"""

__version__ = "0.1.0"

from .analysis import (
    DecodeTrace,
    TraceStep,
    parse_service_sequence,
    probability_cost,
    step_entropy,
    tradeoff_report,
    validity_rate,
)
from .decoder import (
    DecodeResult,
    DecoderConfig,
    DecoderState,
    allowed_set,
    decode,
    masked_distribution,
    step,
    unconstrained_greedy,
)
from .editor import (
    EditConfig,
    EditReport,
    EditRequest,
    KeyCovariance,
    apply_edit,
    compute_key,
    estimate_covariance,
    optimize_value,
    rank_one_update,
    value_objective,
)
from .errors import DecodeError, EditError, LexiconError, SvcRecError, TrainError
from .evaluation import (
    EvalRecord,
    EvolutionScenario,
    Segment,
    SplitPlan,
    ap_at_k,
    build_evolution_scenario,
    chronological_split,
    map_at_k,
    precision_at_k,
    recall_at_k,
)
from .lexicon import (
    Lexicon,
    ServiceEntry,
    TokenTrie,
    Tokenizer,
    build_tokenizer,
    build_trie,
)
from .model import (
    ModelConfig,
    ToyLM,
    TrainCorpus,
    TrainHyper,
    corpus_loss,
    loss_and_grads,
    train_toy,
)
from .retrieval import (
    CorpusRecord,
    PromptBundle,
    TfidfEmbedder,
    build_prompt,
    cosine_sim,
    load_corpus,
    top_k,
)
