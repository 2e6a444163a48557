"""Nested named entity recognition with per-type CRF taggers.

Train one {O, B, I} conditional random field per entity type over frozen
per-token features (precomputed embeddings or hashed sparse features),
aggregate the per-type predictions into possibly overlapping typed spans,
tune training hyperparameters with GP-based Bayesian optimization, and score
with strict span-based and token-based micro-averaged P/R/F1.
"""

from .bayesopt import (
    AcquisitionConfig,
    GpSurrogate,
    HyperPoint,
    HyperSpace,
    Trial,
    expected_improvement,
    gp_fit,
    gp_predict,
    kernel_eval,
    propose_next,
    tune,
)
from .corpus import (
    BioTag,
    CorpusParseError,
    CorpusStats,
    PLASMA_ENTITY_TYPES,
    Sentence,
    Span,
    SpanValidationError,
    corpus_stats,
    decode_bio,
    encode_bio,
    parse_corpus,
    read_corpus,
    split_corpus,
    write_corpus,
)
from .crf import (
    CrfModel,
    CrfTagger,
    TrainConfig,
    TrainReport,
    TrainingDivergedError,
    log_partition,
    nll_and_gradient,
    sequence_score,
    train_model,
    viterbi_decode,
)
from .evaluation import (
    Counts,
    EvalReport,
    evaluate_bundle,
    micro_average,
    span_counts,
    token_counts,
)
from .features import (
    EmbeddingLookup,
    FeatureMatrix,
    FeaturizerSpec,
    HashedFeatureConfig,
    HashedFeatureEncoder,
    hash_features,
    load_embeddings,
    write_embeddings,
)
from .nesting import (
    ModelBundle,
    NestedEntityRecognizer,
    load_bundle,
    predict_nested,
    save_bundle,
    train_bundle,
    train_per_type,
)

__version__ = "0.1.0"

__all__ = [
    "AcquisitionConfig",
    "BioTag",
    "Counts",
    "CorpusParseError",
    "CorpusStats",
    "CrfModel",
    "CrfTagger",
    "EmbeddingLookup",
    "EvalReport",
    "FeatureMatrix",
    "FeaturizerSpec",
    "GpSurrogate",
    "HashedFeatureConfig",
    "HashedFeatureEncoder",
    "HyperPoint",
    "HyperSpace",
    "ModelBundle",
    "NestedEntityRecognizer",
    "PLASMA_ENTITY_TYPES",
    "Sentence",
    "Span",
    "SpanValidationError",
    "TrainConfig",
    "TrainReport",
    "TrainingDivergedError",
    "Trial",
    "corpus_stats",
    "decode_bio",
    "encode_bio",
    "evaluate_bundle",
    "expected_improvement",
    "gp_fit",
    "gp_predict",
    "hash_features",
    "kernel_eval",
    "load_bundle",
    "load_embeddings",
    "log_partition",
    "micro_average",
    "nll_and_gradient",
    "parse_corpus",
    "predict_nested",
    "propose_next",
    "read_corpus",
    "save_bundle",
    "sequence_score",
    "span_counts",
    "split_corpus",
    "token_counts",
    "train_bundle",
    "train_model",
    "train_per_type",
    "tune",
    "viterbi_decode",
    "write_corpus",
    "write_embeddings",
]
