"""Linear-chain CRF over the {O, B, I} alphabet.

Scoring, exact decoding and exact maximum-likelihood training for a CRF whose
emission scores are a linear map of per-token feature vectors:

    score(y | x) = S[y_1] + sum_t e_t[y_t] + sum_{t>=2} T[y_{t-1}, y_t] + F[y_n]

with e_t = W x_t + b. Start and transition masks add a -1e9 penalty to
structurally invalid paths (a sequence cannot start with I, and I cannot
follow O), which keeps log-sum-exp finite while making masked paths
numerically irrelevant. The negative log-likelihood is convex in all
parameters, so training starts from zeros and needs no random init.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator

from .corpus import BioTag, bio_runs
from .evaluation import Counts
from .features import FeatureMatrix, FeaturizerSpec

logger = logging.getLogger(__name__)

N_LABELS = 3  # O, B, I (indices match corpus.BioTag)
MASK_PENALTY = -1e9

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, epoch: int) -> None:
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


def default_transition_mask() -> np.ndarray:
    """Forbidden label transitions (True = forbidden): only O -> I."""
    mask = np.zeros((N_LABELS, N_LABELS), dtype=bool)
    mask[BioTag.O, BioTag.I] = True
    return mask


def default_start_mask() -> np.ndarray:
    """Forbidden start labels (True = forbidden): a sequence cannot start with I."""
    mask = np.zeros(N_LABELS, dtype=bool)
    mask[BioTag.I] = True
    return mask


@dataclass
class CrfModel:
    """Parameters of one per-type CRF.

    emit_weights : (3, d) linear emission map over feature vectors
    emit_bias    : (3,) emission bias
    transitions  : (3, 3) label-to-label scores, rows = from, cols = to
    start, end   : (3,) boundary scores
    trans_mask, start_mask : boolean masks of forbidden entries
    """

    emit_weights: np.ndarray
    emit_bias: np.ndarray
    transitions: np.ndarray
    start: np.ndarray
    end: np.ndarray
    trans_mask: np.ndarray = field(default_factory=default_transition_mask)
    start_mask: np.ndarray = field(default_factory=default_start_mask)

    @classmethod
    def zeros(cls, dim: int) -> "CrfModel":
        return cls(
            emit_weights=np.zeros((N_LABELS, dim)),
            emit_bias=np.zeros(N_LABELS),
            transitions=np.zeros((N_LABELS, N_LABELS)),
            start=np.zeros(N_LABELS),
            end=np.zeros(N_LABELS),
        )

    @property
    def dim(self) -> int:
        return self.emit_weights.shape[1]

    def copy(self) -> "CrfModel":
        return CrfModel(
            emit_weights=self.emit_weights.copy(),
            emit_bias=self.emit_bias.copy(),
            transitions=self.transitions.copy(),
            start=self.start.copy(),
            end=self.end.copy(),
            trans_mask=self.trans_mask.copy(),
            start_mask=self.start_mask.copy(),
        )

    def masked_scores(self) -> tuple[np.ndarray, np.ndarray]:
        """(start, transitions) with the mask penalty applied."""
        start = self.start + np.where(self.start_mask, MASK_PENALTY, 0.0)
        trans = self.transitions + np.where(self.trans_mask, MASK_PENALTY, 0.0)
        return start, trans

    def check_finite(self) -> None:
        for name in ("emit_weights", "emit_bias", "transitions", "start", "end"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in parameter {name!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters (the quantities exposed to the tuner).

    Defaults suit the frozen-featurizer linear head trained here; rates in
    the 1e-5 range only make sense when fine-tuning a deep encoder.
    """

    learning_rate: float = 0.05
    batch_size: int = 16
    weight_decay: float = 0.01
    epochs: int = 15
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(
            learning_rate=float(data["learning_rate"]),
            batch_size=int(data["batch_size"]),
            weight_decay=float(data["weight_decay"]),
            epochs=int(data.get("epochs", 15)),
            seed=int(data.get("seed", 0)),
        )


@dataclass
class TrainReport:
    """Per-epoch training trace; `best_epoch` is the returned checkpoint."""

    epoch_nll: list[float]
    epoch_val_f1: list[float]
    best_epoch: int


@dataclass
class CrfGradients:
    """Gradients matching CrfModel's trainable arrays."""

    emit_weights: np.ndarray
    emit_bias: np.ndarray
    transitions: np.ndarray
    start: np.ndarray
    end: np.ndarray


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    """Plain log-sum-exp; inputs are finite by construction (masks are -1e9)."""
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _batch_emissions(
    model: CrfModel, feats_list: Sequence[FeatureMatrix]
) -> tuple[list[np.ndarray], sparse.csr_matrix | None]:
    """Emission matrices for many sentences with one stacked matmul.

    Returns the per-sentence (n, 3) emission arrays and, when the features
    are sparse, the stacked design matrix (reused for the weight gradient).
    """
    weights_t = np.ascontiguousarray(model.emit_weights.T)
    if any(sparse.issparse(f.rows) for f in feats_list):
        stacked = sparse.vstack([f.rows for f in feats_list], format="csr")
        scores = stacked @ weights_t + model.emit_bias
        offsets = np.cumsum([0] + [f.n_tokens for f in feats_list])
        return (
            [scores[offsets[i] : offsets[i + 1]] for i in range(len(feats_list))],
            stacked,
        )
    return [f.rows @ weights_t + model.emit_bias for f in feats_list], None


def emission_scores(model: CrfModel, feats: FeatureMatrix) -> np.ndarray:
    """(n, 3) emission score matrix e_t = W x_t + b, dense or sparse input."""
    return _batch_emissions(model, [feats])[0][0]


def _tags_to_indices(tags: Sequence[BioTag | int]) -> np.ndarray:
    return np.asarray([int(t) for t in tags], dtype=np.intp)


def _path_score(
    emissions: np.ndarray, start: np.ndarray, trans: np.ndarray, end: np.ndarray,
    y: np.ndarray,
) -> float:
    n = emissions.shape[0]
    score = start[y[0]] + emissions[np.arange(n), y].sum() + end[y[-1]]
    if n > 1:
        score += trans[y[:-1], y[1:]].sum()
    return float(score)


def sequence_score(model: CrfModel, feats: FeatureMatrix, tags: Sequence[BioTag | int]) -> float:
    """Unnormalized path score of one tag sequence (mask penalties included)."""
    y = _tags_to_indices(tags)
    n = feats.n_tokens
    if len(y) != n:
        raise ValueError(f"tag length {len(y)} != token count {n}")
    if n < 1:
        raise ValueError("empty sequence")
    start, trans = model.masked_scores()
    return _path_score(emission_scores(model, feats), start, trans, model.end, y)


def log_partition(model: CrfModel, feats: FeatureMatrix) -> float:
    """log sum over all 3^n tag sequences of exp(score), by the forward pass."""
    if feats.n_tokens < 1:
        raise ValueError("empty sequence")
    start, trans = model.masked_scores()
    emissions = emission_scores(model, feats)
    alpha = start + emissions[0]
    for t in range(1, emissions.shape[0]):
        alpha = emissions[t] + _logsumexp(alpha[:, None] + trans, axis=0)
    return float(_logsumexp(alpha + model.end, axis=0))


def _viterbi_path(
    emissions: np.ndarray, start: np.ndarray, trans: np.ndarray, end: np.ndarray
) -> list[int]:
    n = emissions.shape[0]
    score = start + emissions[0]
    backptr = np.zeros((n, N_LABELS), dtype=np.intp)
    for t in range(1, n):
        candidates = score[:, None] + trans
        backptr[t] = np.argmax(candidates, axis=0)  # first max = lowest index
        score = emissions[t] + candidates[backptr[t], np.arange(N_LABELS)]
    best = int(np.argmax(score + end))
    path = [best]
    for t in range(n - 1, 0, -1):
        path.append(int(backptr[t, path[-1]]))
    path.reverse()
    return path


def viterbi_decode(model: CrfModel, feats: FeatureMatrix) -> list[BioTag]:
    """Exact argmax tag sequence; ties resolve to the lowest label index."""
    if feats.n_tokens < 1:
        raise ValueError("empty sequence")
    start, trans = model.masked_scores()
    emissions = emission_scores(model, feats)
    return [BioTag(i) for i in _viterbi_path(emissions, start, trans, model.end)]


def _forward_backward_scores(
    emissions: np.ndarray, start: np.ndarray, trans: np.ndarray, end: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    n = emissions.shape[0]
    alpha = np.empty((n, N_LABELS))
    alpha[0] = start + emissions[0]
    for t in range(1, n):
        alpha[t] = emissions[t] + _logsumexp(alpha[t - 1][:, None] + trans, axis=0)

    beta = np.empty((n, N_LABELS))
    beta[n - 1] = end
    for t in range(n - 2, -1, -1):
        beta[t] = _logsumexp(trans + (emissions[t + 1] + beta[t + 1])[None, :], axis=1)

    log_z = float(_logsumexp(alpha[n - 1] + end, axis=0))
    node = np.exp(alpha + beta - log_z)
    edge = np.empty((max(n - 1, 0), N_LABELS, N_LABELS))
    for t in range(1, n):
        edge[t - 1] = np.exp(
            alpha[t - 1][:, None] + trans + (emissions[t] + beta[t])[None, :] - log_z
        )
    return node, edge, log_z


def forward_backward(
    model: CrfModel, feats: FeatureMatrix
) -> tuple[np.ndarray, np.ndarray, float]:
    """Posterior marginals: (n, 3) node, (n-1, 3, 3) edge, and log Z."""
    if feats.n_tokens < 1:
        raise ValueError("empty sequence")
    start, trans = model.masked_scores()
    emissions = emission_scores(model, feats)
    return _forward_backward_scores(emissions, start, trans, model.end)


def nll_and_gradient(
    model: CrfModel,
    batch: Sequence[tuple[FeatureMatrix, Sequence[BioTag | int]]],
) -> tuple[float, CrfGradients]:
    """Mean negative log-likelihood over a batch with analytic gradients.

    Gradients are expected-minus-observed sufficient statistics from
    forward-backward marginals. Weight decay is decoupled (applied in the
    optimizer step) and therefore not part of this loss. Per-sequence terms
    accumulate in batch order, so results are reproducible.
    """
    if not batch:
        raise ValueError("empty batch")
    model.check_finite()
    feats_list = []
    golds = []
    for feats, tags in batch:
        y = _tags_to_indices(tags)
        if len(y) != feats.n_tokens:
            raise ValueError(
                f"sentence {feats.sentence_id!r}: tag length {len(y)} != "
                f"token count {feats.n_tokens}"
            )
        if feats.n_tokens < 1:
            raise ValueError("empty sequence")
        feats_list.append(feats)
        golds.append(y)

    start, trans = model.masked_scores()
    emissions_list, stacked = _batch_emissions(model, feats_list)

    grad_bias = np.zeros(N_LABELS)
    grad_trans = np.zeros((N_LABELS, N_LABELS))
    grad_start = np.zeros(N_LABELS)
    grad_end = np.zeros(N_LABELS)
    residuals = []
    total = 0.0
    for feats, y, emissions in zip(feats_list, golds, emissions_list):
        n = emissions.shape[0]
        node, edge, log_z = _forward_backward_scores(emissions, start, trans, model.end)
        total += log_z - _path_score(emissions, start, trans, model.end, y)

        residual = node  # becomes expected - observed in place
        residual[np.arange(n), y] -= 1.0
        residuals.append(residual)
        grad_bias += residual.sum(axis=0)
        grad_start += residual[0]
        grad_end += residual[n - 1]
        if n > 1:
            trans_grad = edge.sum(axis=0)
            np.subtract.at(trans_grad, (y[:-1], y[1:]), 1.0)
            grad_trans += trans_grad

    k = len(batch)
    residual_stack = np.vstack(residuals)
    if stacked is not None:
        grad_weights = np.asarray(stacked.T @ residual_stack).T
    else:
        design = np.vstack([f.rows for f in feats_list])
        grad_weights = (design.T @ residual_stack).T
    return total / k, CrfGradients(
        emit_weights=grad_weights / k,
        emit_bias=grad_bias / k,
        transitions=grad_trans / k,
        start=grad_start / k,
        end=grad_end / k,
    )


class _AdamW:
    """AdamW with decoupled weight decay on a named subset of parameters.

    The emission-weight update is restricted to columns whose gradient has
    ever been nonzero; untouched columns have zero moments and zero weight,
    so skipping them reproduces the dense update exactly while keeping the
    per-step cost proportional to the active vocabulary.
    """

    def __init__(self, model: CrfModel, lr: float, weight_decay: float,
                 decayed: tuple[str, ...] = ("emit_weights", "transitions")) -> None:
        self.model = model
        self.lr = lr
        self.weight_decay = weight_decay
        self.decayed = decayed
        self.step_count = 0
        tracked = self._params() + ("emit_weights",)
        self.m = {name: np.zeros_like(getattr(model, name)) for name in tracked}
        self.v = {name: np.zeros_like(getattr(model, name)) for name in tracked}
        self._active = np.zeros(model.dim, dtype=bool)
        self._active_idx = np.empty(0, dtype=np.intp)

    @staticmethod
    def _params() -> tuple[str, ...]:
        return ("emit_bias", "transitions", "start", "end")

    def _update(self, param: np.ndarray, grad: np.ndarray,
                m: np.ndarray, v: np.ndarray, decay: bool) -> None:
        bc1 = 1.0 - ADAM_BETA1**self.step_count
        bc2 = 1.0 - ADAM_BETA2**self.step_count
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * np.square(grad)
        param -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if decay and self.weight_decay > 0.0:
            param -= self.lr * self.weight_decay * param

    def step(self, grads: CrfGradients) -> None:
        self.step_count += 1
        for name in self._params():
            self._update(
                getattr(self.model, name), getattr(grads, name),
                self.m[name], self.v[name], decay=name in self.decayed,
            )
        touched = np.any(grads.emit_weights != 0.0, axis=0)
        if np.any(touched & ~self._active):
            self._active |= touched
            self._active_idx = np.flatnonzero(self._active)
        idx = self._active_idx
        if idx.size:
            weights = self.model.emit_weights[:, idx]
            m = self.m["emit_weights"][:, idx]
            v = self.v["emit_weights"][:, idx]
            self._update(weights, grads.emit_weights[:, idx], m, v, decay=False)
            self.model.emit_weights[:, idx] = weights
            self.m["emit_weights"][:, idx] = m
            self.v["emit_weights"][:, idx] = v
        if "emit_weights" in self.decayed and self.weight_decay > 0.0:
            self.model.emit_weights *= 1.0 - self.lr * self.weight_decay


def _micro_span_f1(
    pairs: Iterable[tuple[Sequence[BioTag], Sequence[BioTag]]]
) -> float:
    """Micro strict-span F1 between gold and predicted tag sequences."""
    counts = Counts()
    for gold_tags, pred_tags in pairs:
        gold = set(bio_runs(gold_tags))
        pred = set(bio_runs(pred_tags))
        tp = len(gold & pred)
        counts = counts + Counts(tp=tp, fp=len(pred) - tp, fn=len(gold) - tp)
    return counts.f1


def train_model(
    train: Sequence[tuple[FeatureMatrix, Sequence[BioTag | int]]],
    val: Sequence[tuple[FeatureMatrix, Sequence[BioTag | int]]],
    cfg: TrainConfig,
) -> tuple[CrfModel, TrainReport]:
    """Mini-batch AdamW training with best-validation checkpoint selection.

    Data are shuffled every epoch with a generator seeded by ``cfg.seed``;
    the result is a deterministic function of (inputs, cfg). The returned
    model is the checkpoint of the epoch with the highest validation span
    F1 (earliest epoch on ties). With no validation data the final epoch
    is returned instead.
    """
    if not train:
        raise ValueError("empty training set")
    model = CrfModel.zeros(train[0][0].dim)
    optimizer = _AdamW(model, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    epoch_nll: list[float] = []
    epoch_f1: list[float] = []
    best_f1 = -1.0
    best_epoch = 0
    best_model = model.copy()

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        loss_sum = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train[i] for i in order[lo : lo + cfg.batch_size]]
            loss, grads = nll_and_gradient(model, batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            loss_sum += loss * len(batch)
            optimizer.step(grads)
        epoch_nll.append(loss_sum / len(train))

        if val:
            start, trans = model.masked_scores()
            emissions_list, _ = _batch_emissions(model, [f for f, _ in val])
            f1 = _micro_span_f1(
                (tags, _viterbi_path(em, start, trans, model.end))
                for (_, tags), em in zip(val, emissions_list)
            )
        else:
            f1 = 0.0
        epoch_f1.append(f1)
        if f1 > best_f1 or not val:
            best_f1 = f1
            best_epoch = epoch
            best_model = model.copy()

    return best_model, TrainReport(epoch_nll, epoch_f1, best_epoch)


def save_model(
    model: CrfModel,
    path: str | Path,
    etype: str | None = None,
    featurizer: FeaturizerSpec | None = None,
) -> None:
    """Write a model as a JSON document; floats keep full round-trip precision."""
    doc = {
        "format": "nestner-crf",
        "version": 1,
        "dim": model.dim,
        "n_labels": N_LABELS,
        "entity_type": etype,
        "featurizer": featurizer.to_dict() if featurizer else None,
        "params": {
            "emit_weights": model.emit_weights.ravel().tolist(),
            "emit_bias": model.emit_bias.tolist(),
            "transitions": model.transitions.ravel().tolist(),
            "start": model.start.tolist(),
            "end": model.end.tolist(),
        },
        "masks": {
            "transitions": model.trans_mask.ravel().astype(int).tolist(),
            "start": model.start_mask.astype(int).tolist(),
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_model(path: str | Path) -> tuple[CrfModel, str | None, FeaturizerSpec | None]:
    """Inverse of :func:`save_model`; scores reproduce bit-identically."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "nestner-crf" or doc.get("version") != 1:
        raise ValueError(f"not a recognized model file: {path}")
    dim = int(doc["dim"])
    params = doc["params"]
    model = CrfModel(
        emit_weights=np.asarray(params["emit_weights"], dtype=np.float64).reshape(N_LABELS, dim),
        emit_bias=np.asarray(params["emit_bias"], dtype=np.float64),
        transitions=np.asarray(params["transitions"], dtype=np.float64).reshape(N_LABELS, N_LABELS),
        start=np.asarray(params["start"], dtype=np.float64),
        end=np.asarray(params["end"], dtype=np.float64),
        trans_mask=np.asarray(doc["masks"]["transitions"], dtype=bool).reshape(N_LABELS, N_LABELS),
        start_mask=np.asarray(doc["masks"]["start"], dtype=bool),
    )
    featurizer = doc.get("featurizer")
    spec = FeaturizerSpec.from_dict(featurizer) if featurizer else None
    return model, doc.get("entity_type"), spec


class CrfTagger(BaseEstimator):
    """Estimator-style wrapper: one {O, B, I} sequence labeler.

    Parameters mirror `TrainConfig`. `fit` accepts parallel lists of feature
    matrices and tag sequences, plus an optional validation pair used for
    checkpoint selection.
    """

    def __init__(self, learning_rate: float = 0.05, batch_size: int = 16,
                 weight_decay: float = 0.01, epochs: int = 15, seed: int = 0) -> None:
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            seed=self.seed,
        )

    def fit(self, X: Sequence[FeatureMatrix], y: Sequence[Sequence[BioTag]],
            X_val: Sequence[FeatureMatrix] = (), y_val: Sequence[Sequence[BioTag]] = ()):
        if len(X) != len(y):
            raise ValueError("X and y have different lengths")
        self.model_, self.report_ = train_model(
            list(zip(X, y)), list(zip(X_val, y_val)), self._config()
        )
        return self

    def predict(self, X: Sequence[FeatureMatrix]) -> list[list[BioTag]]:
        return [viterbi_decode(self.model_, feats) for feats in X]

    def score(self, X: Sequence[FeatureMatrix], y: Sequence[Sequence[BioTag]]) -> float:
        """Micro strict-span F1 against gold tag sequences."""
        return _micro_span_f1(zip(y, self.predict(X)))
