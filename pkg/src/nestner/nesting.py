"""Entity-specific specialization: one CRF per entity type, union aggregation.

Every entity type gets its own {O, B, I} tagger trained on that type's BIO
projection of the corpus; nested output falls out of taking the union of the
per-type predictions, since spans of different types may freely overlap.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from joblib import Parallel, delayed
from sklearn.base import BaseEstimator

from .corpus import Sentence, Span, corpus_entity_types, decode_bio, encode_bio
from .crf import (
    CrfModel,
    TrainConfig,
    TrainReport,
    load_model,
    save_model,
    train_model,
    viterbi_decode,
)
from .evaluation import EvalReport, evaluate_bundle
from .features import (
    FeatureMatrix,
    FeaturizerMismatchError,
    FeaturizerSpec,
    HashedFeatureEncoder,
    fnv1a_64,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def derive_seed(seed: int, etype: str) -> int:
    """Per-type seed: run seed plus a stable hash of the type name."""
    return (seed + fnv1a_64(etype.encode("utf-8"))) % 2**32


def type_slug(etype: str) -> str:
    """Filesystem-safe name for one entity type."""
    slug = re.sub(r"[^a-z0-9]+", "-", etype.lower()).strip("-")
    return slug or "entity"


@dataclass
class ModelBundle:
    """One trained CRF per entity type plus the shared featurizer descriptor."""

    models: dict[str, CrfModel]
    featurizer: FeaturizerSpec
    configs: dict[str, TrainConfig] = field(default_factory=dict)
    reports: dict[str, TrainReport] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.models:
            raise ValueError("bundle must contain at least one entity type")
        for etype, model in self.models.items():
            if model.dim != self.featurizer.dim:
                raise FeaturizerMismatchError(
                    f"model for {etype!r} has dim {model.dim}, "
                    f"featurizer descriptor says {self.featurizer.dim}"
                )

    @property
    def types(self) -> list[str]:
        return list(self.models)


def train_per_type(
    train: Sequence[Sentence],
    val: Sequence[Sentence],
    etype: str,
    features: Mapping[str, FeatureMatrix],
    cfg: TrainConfig,
) -> tuple[CrfModel, TrainReport]:
    """Train one type's tagger on the per-type BIO projections of the splits."""
    train_pairs = [(features[s.id], encode_bio(s, etype)) for s in train]
    val_pairs = [(features[s.id], encode_bio(s, etype)) for s in val]
    return train_model(train_pairs, val_pairs, cfg)


def predict_nested(
    bundle: ModelBundle, sentence: Sentence, feats: FeatureMatrix
) -> set[Span]:
    """Decode every per-type model and return the union of the predicted spans."""
    if feats.dim != bundle.featurizer.dim:
        raise FeaturizerMismatchError(
            f"features have dim {feats.dim}, bundle expects {bundle.featurizer.dim}"
        )
    if feats.n_tokens != len(sentence):
        raise ValueError(
            f"sentence {sentence.id!r}: {feats.n_tokens} feature rows for "
            f"{len(sentence)} tokens"
        )
    predicted: set[Span] = set()
    for etype, model in bundle.models.items():
        tags = viterbi_decode(model, feats)
        predicted |= decode_bio(tags, etype)
    return predicted


def train_bundle(
    train: Sequence[Sentence],
    val: Sequence[Sentence],
    types: Sequence[str],
    features: Mapping[str, FeatureMatrix],
    cfgs: Mapping[str, TrainConfig] | TrainConfig,
    featurizer: FeaturizerSpec | None = None,
    n_jobs: int = 1,
) -> ModelBundle:
    """Train one model per type, independently (optionally in parallel).

    When `cfgs` is a single TrainConfig it is broadcast to every type with a
    per-type derived seed; an explicit per-type mapping is used verbatim.
    `featurizer` defaults to a bare embeddings descriptor of the feature
    dimension when not given.
    """
    if not types:
        raise ValueError("no entity types to train")
    if isinstance(cfgs, TrainConfig):
        per_type = {
            etype: TrainConfig(
                learning_rate=cfgs.learning_rate,
                batch_size=cfgs.batch_size,
                weight_decay=cfgs.weight_decay,
                epochs=cfgs.epochs,
                seed=derive_seed(cfgs.seed, etype),
            )
            for etype in types
        }
    else:
        per_type = {etype: cfgs[etype] for etype in types}
    if featurizer is None:
        dim = next(iter(features.values())).dim
        featurizer = FeaturizerSpec(kind="embeddings", dim=dim)

    jobs = (
        delayed(train_per_type)(train, val, etype, features, per_type[etype])
        for etype in types
    )
    results = Parallel(n_jobs=n_jobs)(jobs)
    models = {}
    reports = {}
    for etype, (model, report) in zip(types, results):
        models[etype] = model
        reports[etype] = report
        logger.info(
            "trained %r: best epoch %d, val span F1 %.4f",
            etype,
            report.best_epoch,
            report.epoch_val_f1[report.best_epoch],
        )
    return ModelBundle(models=models, featurizer=featurizer,
                       configs=per_type, reports=reports)


def save_bundle(bundle: ModelBundle, directory: str | Path) -> None:
    """Write one `<type-slug>.model` file per type plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for etype in bundle.types:
        slug = type_slug(etype)
        if f"{slug}.model" in files.values():
            raise ValueError(f"entity types collide on slug {slug!r}")
        files[etype] = f"{slug}.model"
        save_model(
            bundle.models[etype],
            directory / files[etype],
            etype=etype,
            featurizer=bundle.featurizer,
        )
    manifest = {
        "format": "nestner-bundle",
        "version": 1,
        "types": bundle.types,
        "featurizer": bundle.featurizer.to_dict(),
        "configs": {t: c.to_dict() for t, c in bundle.configs.items()},
        "files": files,
    }
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_bundle(directory: str | Path) -> ModelBundle:
    """Inverse of :func:`save_bundle` (training reports are not persisted)."""
    directory = Path(directory)
    with open(directory / MANIFEST_NAME, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "nestner-bundle" or manifest.get("version") != 1:
        raise ValueError(f"not a recognized bundle directory: {directory}")
    featurizer = FeaturizerSpec.from_dict(manifest["featurizer"])
    models = {}
    for etype in manifest["types"]:
        model, stored_type, stored_spec = load_model(directory / manifest["files"][etype])
        if stored_type is not None and stored_type != etype:
            raise ValueError(
                f"model file for {etype!r} claims entity type {stored_type!r}"
            )
        if stored_spec is not None and stored_spec != featurizer:
            raise FeaturizerMismatchError(
                f"model file for {etype!r} disagrees with the bundle featurizer"
            )
        models[etype] = model
    configs = {
        t: TrainConfig.from_dict(c) for t, c in manifest.get("configs", {}).items()
    }
    return ModelBundle(models=models, featurizer=featurizer, configs=configs)


class NestedEntityRecognizer(BaseEstimator):
    """Estimator facade over the per-type bundle.

    `fit` trains one tagger per entity type on sentences carrying gold spans;
    `predict` returns one (possibly overlapping) span set per sentence. The
    featurizer is any object with `spec` and `transform(sentences)`, such as
    `HashedFeatureEncoder` or `EmbeddingLookup`.
    """

    def __init__(self, types: Sequence[str] | None = None, featurizer=None,
                 learning_rate: float = 0.05, batch_size: int = 16,
                 weight_decay: float = 0.01, epochs: int = 15, seed: int = 0,
                 configs: Mapping[str, TrainConfig] | None = None,
                 n_jobs: int = 1) -> None:
        self.types = types
        self.featurizer = featurizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.seed = seed
        self.configs = configs
        self.n_jobs = n_jobs

    def _featurizer(self):
        return self.featurizer if self.featurizer is not None else HashedFeatureEncoder()

    def fit(self, X: Sequence[Sentence], y=None,
            validation: Sequence[Sentence] = ()) -> "NestedEntityRecognizer":
        featurizer = self._featurizer()
        types = list(self.types) if self.types else corpus_entity_types(X)
        if not types:
            raise ValueError("no entity types found in the training data")
        features = featurizer.transform(list(X) + list(validation))
        if self.configs:
            cfgs: Mapping[str, TrainConfig] | TrainConfig = dict(self.configs)
        else:
            cfgs = TrainConfig(
                learning_rate=self.learning_rate,
                batch_size=self.batch_size,
                weight_decay=self.weight_decay,
                epochs=self.epochs,
                seed=self.seed,
            )
        self.bundle_ = train_bundle(
            list(X), list(validation), types, features, cfgs,
            featurizer=featurizer.spec, n_jobs=self.n_jobs,
        )
        return self

    def predict(self, X: Sequence[Sentence]) -> list[set[Span]]:
        features = self._featurizer().transform(X)
        return [predict_nested(self.bundle_, s, features[s.id]) for s in X]

    def evaluate(self, X: Sequence[Sentence]) -> EvalReport:
        """Both-scheme evaluation of `predict` against the gold spans in X."""
        features = self._featurizer().transform(X)
        return evaluate_bundle(self.bundle_, list(X), features)
