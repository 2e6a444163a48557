"""Per-token feature vectors for the CRF: hashed sparse features and NNEV files.

Two interchangeable featurizers are provided. `HashedFeatureEncoder` derives
deterministic sparse features from the tokens alone (no external model), and
`EmbeddingLookup` serves precomputed dense vectors loaded from an NNEV file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator, TransformerMixin

from .corpus import Sentence

NNEV_MAGIC = b"NNEV"
NNEV_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


class NnevError(ValueError):
    """Base class for NNEV embedding-file errors."""


class NnevFormatError(NnevError):
    """Bad magic bytes, unsupported version, or a truncated file."""


class MissingEmbeddingError(NnevError):
    """A corpus sentence id has no record in the embedding file."""


class EmbeddingAlignmentError(NnevError):
    """Stored row count disagrees with the sentence's token count."""


class FeaturizerMismatchError(ValueError):
    """Features do not match the descriptor a model was trained with."""


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a hash of a byte string."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return h


@dataclass(frozen=True)
class FeaturizerSpec:
    """Serializable descriptor identifying how feature matrices were produced."""

    kind: str  # "hashed" or "embeddings"
    dim: int
    window: int | None = None
    affix_lengths: tuple[int, ...] | None = None

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind, "dim": self.dim}
        if self.kind == "hashed":
            out["window"] = self.window
            out["affix_lengths"] = list(self.affix_lengths or ())
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "FeaturizerSpec":
        return cls(
            kind=data["kind"],
            dim=int(data["dim"]),
            window=data.get("window"),
            affix_lengths=tuple(data["affix_lengths"]) if data.get("affix_lengths") else None,
        )


@dataclass
class FeatureMatrix:
    """Per-token feature rows for one sentence, dense or CSR-sparse."""

    sentence_id: str
    rows: np.ndarray | sparse.csr_matrix

    def __post_init__(self) -> None:
        if sparse.issparse(self.rows):
            values = self.rows.data
        else:
            self.rows = np.asarray(self.rows, dtype=np.float64)
            if self.rows.ndim != 2:
                raise ValueError("feature rows must be a 2-d matrix")
            values = self.rows
        if values.size and not np.all(np.isfinite(values)):
            raise ValueError(f"non-finite feature values for sentence {self.sentence_id!r}")

    @property
    def n_tokens(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def to_dense(self) -> np.ndarray:
        if sparse.issparse(self.rows):
            return np.asarray(self.rows.todense(), dtype=np.float64)
        return self.rows


@dataclass(frozen=True)
class HashedFeatureConfig:
    """Settings for the hashing featurizer.

    `dim` must be a power of two (>= 2**10) so hashed indices can be masked,
    and `window` is the radius of neighbor-token context features.
    """

    dim: int = 2**18
    window: int = 2
    affix_lengths: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self) -> None:
        if self.dim < 2**10 or self.dim & (self.dim - 1) != 0:
            raise ValueError(f"dim must be a power of two >= 1024, got {self.dim}")
        if self.window < 0:
            raise ValueError(f"window must be >= 0, got {self.window}")

    @property
    def spec(self) -> FeaturizerSpec:
        return FeaturizerSpec(
            kind="hashed", dim=self.dim, window=self.window,
            affix_lengths=tuple(self.affix_lengths),
        )


def word_shape(token: str) -> str:
    """Collapse a token to its shape: letters to x/X, digits to 9, rest kept."""
    out = []
    for ch in token:
        if ch.isalpha():
            out.append("X" if ch.isupper() else "x")
        elif ch.isdigit():
            out.append("9")
        else:
            out.append(ch)
    return "".join(out)


def _token_feature_strings(tokens: Sequence[str], i: int, cfg: HashedFeatureConfig) -> list[str]:
    token = tokens[i]
    low = token.lower()
    feats = [f"w={low}@0", f"shape={word_shape(token)}@0"]
    for k in sorted(cfg.affix_lengths):
        if len(low) >= k:
            feats.append(f"prefix{k}={low[:k]}@0")
            feats.append(f"suffix{k}={low[-k:]}@0")
    if token.isdigit():
        feats.append("digit=1@0")
    if token.isupper():
        feats.append("upper=1@0")
    for off in range(-cfg.window, cfg.window + 1):
        if off == 0:
            continue
        j = i + off
        if 0 <= j < len(tokens):
            value = tokens[j].lower()
        else:
            value = "<s>" if j < 0 else "</s>"
        feats.append(f"w={value}@{off}")
    return feats


def hashed_index_value(feature: str, dim: int) -> tuple[int, float]:
    """Signed-hash a feature string into (column index, +1/-1).

    The index is the hash modulo `dim` (a power of two); the sign comes from
    the next hash bit above the ones consumed by the modulus.
    """
    h = fnv1a_64(feature.encode("utf-8"))
    index = h & (dim - 1)
    sign_bit = (h >> (dim.bit_length() - 1)) & 1
    return index, 1.0 if sign_bit == 0 else -1.0


def hash_features(sentence: Sentence, cfg: HashedFeatureConfig | None = None) -> FeatureMatrix:
    """Deterministic sparse featurization of one sentence.

    Emits, per token: lowercased identity, word shape, prefixes/suffixes of
    the configured lengths, digit/uppercase flags, and windowed neighbor
    identities. Colliding indices accumulate.
    """
    cfg = cfg or HashedFeatureConfig()
    rows, cols, data = [], [], []
    for i in range(len(sentence)):
        for feat in _token_feature_strings(sentence.tokens, i, cfg):
            index, value = hashed_index_value(feat, cfg.dim)
            rows.append(i)
            cols.append(index)
            data.append(value)
    matrix = sparse.coo_matrix(
        (data, (rows, cols)), shape=(len(sentence), cfg.dim), dtype=np.float64
    ).tocsr()
    return FeatureMatrix(sentence.id, matrix)


def write_embeddings(
    out: IO[bytes] | str | Path,
    records: Iterable[tuple[str, np.ndarray]] | Mapping[str, np.ndarray],
) -> None:
    """Write (sentence id, row matrix) records as an NNEV file.

    Rows are stored as little-endian float32; all matrices must share one
    dimension, which becomes the header dimension.
    """
    if isinstance(out, (str, Path)):
        with open(out, "wb") as fh:
            write_embeddings(fh, records)
        return
    if isinstance(records, Mapping):
        records = list(records.items())
    else:
        records = list(records)
    if not records:
        raise ValueError("cannot write an empty embedding file")
    dims = {np.asarray(m).shape[1] for _, m in records}
    if len(dims) != 1:
        raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")
    dim = dims.pop()
    out.write(NNEV_MAGIC)
    out.write(struct.pack("<III", NNEV_VERSION, dim, len(records)))
    for sid, matrix in records:
        sid_bytes = sid.encode("utf-8")
        if len(sid_bytes) > 0xFFFF:
            raise ValueError(f"sentence id too long: {sid!r}")
        matrix = np.ascontiguousarray(matrix, dtype="<f4")
        out.write(struct.pack("<H", len(sid_bytes)))
        out.write(sid_bytes)
        out.write(struct.pack("<I", matrix.shape[0]))
        out.write(matrix.tobytes())


def _read_exact(fh: IO[bytes], n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise NnevFormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def read_nnev(source: IO[bytes] | str | Path) -> tuple[int, list[tuple[str, np.ndarray]]]:
    """Read an NNEV file into (dimension, [(sentence id, float32 matrix), ...])."""
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return read_nnev(fh)
    magic = _read_exact(source, 4)
    if magic != NNEV_MAGIC:
        raise NnevFormatError(f"bad magic bytes {magic!r}, expected {NNEV_MAGIC!r}")
    version, dim, count = struct.unpack("<III", _read_exact(source, 12))
    if version != NNEV_VERSION:
        raise NnevFormatError(f"unsupported version {version}, expected {NNEV_VERSION}")
    records = []
    for _ in range(count):
        (id_len,) = struct.unpack("<H", _read_exact(source, 2))
        sid = _read_exact(source, id_len).decode("utf-8")
        (n_tokens,) = struct.unpack("<I", _read_exact(source, 4))
        raw = _read_exact(source, n_tokens * dim * 4)
        matrix = np.frombuffer(raw, dtype="<f4").reshape(n_tokens, dim).copy()
        records.append((sid, matrix))
    return dim, records


def load_embeddings(
    source: IO[bytes] | str | Path, corpus: Sequence[Sentence]
) -> dict[str, FeatureMatrix]:
    """Load NNEV embeddings for a corpus, validating id coverage and alignment.

    Raises
    ------
    NnevFormatError
        On magic/version mismatch or truncation.
    MissingEmbeddingError
        When a corpus sentence id is absent from the file.
    EmbeddingAlignmentError
        When a stored row count differs from the sentence token count.
    """
    _, records = read_nnev(source)
    by_id = {sid: matrix for sid, matrix in records}
    out = {}
    for sentence in corpus:
        if sentence.id not in by_id:
            raise MissingEmbeddingError(
                f"sentence {sentence.id!r} not present in the embedding file"
            )
        matrix = by_id[sentence.id]
        if matrix.shape[0] != len(sentence):
            raise EmbeddingAlignmentError(
                f"sentence {sentence.id!r}: file has {matrix.shape[0]} rows, "
                f"corpus has {len(sentence)} tokens"
            )
        out[sentence.id] = FeatureMatrix(sentence.id, matrix.astype(np.float64))
    return out


class HashedFeatureEncoder(TransformerMixin, BaseEstimator):
    """Stateless sentence-to-sparse-features transformer (see `hash_features`)."""

    def __init__(self, dim: int = 2**18, window: int = 2,
                 affix_lengths: tuple[int, ...] = (1, 2, 3)) -> None:
        self.dim = dim
        self.window = window
        self.affix_lengths = affix_lengths

    def _config(self) -> HashedFeatureConfig:
        return HashedFeatureConfig(self.dim, self.window, tuple(self.affix_lengths))

    @property
    def spec(self) -> FeaturizerSpec:
        return self._config().spec

    def fit(self, X: Sequence[Sentence], y=None) -> "HashedFeatureEncoder":
        self._config()  # validate parameters
        return self

    def transform(self, X: Sequence[Sentence]) -> dict[str, FeatureMatrix]:
        cfg = self._config()
        return {s.id: hash_features(s, cfg) for s in X}


class EmbeddingLookup(TransformerMixin, BaseEstimator):
    """Featurizer serving precomputed dense vectors keyed by sentence id."""

    def __init__(self, matrices: Mapping[str, FeatureMatrix]) -> None:
        self.matrices = matrices
        dims = {m.dim for m in matrices.values()}
        if len(dims) != 1:
            raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")
        self._dim = dims.pop()

    @classmethod
    def from_file(cls, path: str | Path, corpus: Sequence[Sentence]) -> "EmbeddingLookup":
        return cls(load_embeddings(path, corpus))

    @property
    def spec(self) -> FeaturizerSpec:
        return FeaturizerSpec(kind="embeddings", dim=self._dim)

    def fit(self, X: Sequence[Sentence], y=None) -> "EmbeddingLookup":
        return self

    def transform(self, X: Sequence[Sentence]) -> dict[str, FeatureMatrix]:
        out = {}
        for sentence in X:
            if sentence.id not in self.matrices:
                raise MissingEmbeddingError(
                    f"sentence {sentence.id!r} has no loaded embedding"
                )
            matrix = self.matrices[sentence.id]
            if matrix.n_tokens != len(sentence):
                raise EmbeddingAlignmentError(
                    f"sentence {sentence.id!r}: embedding has {matrix.n_tokens} rows, "
                    f"sentence has {len(sentence)} tokens"
                )
            out[sentence.id] = matrix
        return out
