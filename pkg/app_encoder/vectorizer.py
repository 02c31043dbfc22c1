"""
Frozen TF-IDF step encoder

Tokenisation and n-gram counting come from scikit-learn's CountVectorizer
(lowercase, tokens of >= 2 word characters). Feature selection is done
here: the top `max_features` n-grams by document frequency, ties broken
lexicographically, then

    idf = ln((1 + N) / (1 + df)) + 1

and every row is l2-normalised. The fitted model is immutable and
identified by the sha256 of its manifest.
"""

import json
import math
import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from sklearn.feature_extraction.text import CountVectorizer
from sklearn.preprocessing import normalize

from common.config import config_from_dict, config_to_dict, require
from common.errors import RejectedInputError
from common.file_parser import dumps_canonical, read_json, write_json
from common.trace_model import warning_labels
from app_stepview.adapter import FIELDS, StepViewTrajectory

TOKEN_PATTERN = r"(?u)\b\w\w+\b"


@dataclass(frozen=True)
class EncoderConfig:
    ngram_min: int = 1
    ngram_max: int = 2
    max_features: int = 4096
    min_df: int = 1
    sublinear_tf: bool = False
    norm: str = "l2"
    excluded_fields: Tuple[str, ...] = ()

    def validate(self) -> None:
        require(self.max_features >= 1, "max_features must be >= 1")
        require(1 <= self.ngram_min <= self.ngram_max, "ngram range must satisfy 1 <= min <= max")
        require(self.min_df >= 1, "min_df must be >= 1")
        require(self.norm == "l2", f"only l2 normalisation is supported, got {self.norm!r}")
        unknown = sorted(set(self.excluded_fields) - set(FIELDS))
        require(not unknown, f"unknown StepView fields in excluded_fields: {unknown}")

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "EncoderConfig":
        return config_from_dict(cls, payload)

    def to_dict(self) -> Dict[str, Any]:
        return config_to_dict(self)


MAIN_CONFIG = EncoderConfig()
PROBE_CONFIG = EncoderConfig(max_features=50000, min_df=2, sublinear_tf=True)


@dataclass(frozen=True)
class VectorizerModel:
    config: EncoderConfig
    n_documents: int
    vocabulary: Tuple[str, ...]
    document_frequency: Tuple[int, ...]
    idf: Tuple[float, ...]

    @property
    def dimension(self) -> int:
        return len(self.vocabulary)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "n_documents": self.n_documents,
            "features": [[t, df, w] for t, df, w in zip(self.vocabulary, self.document_frequency, self.idf)],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "VectorizerModel":
        try:
            features = payload["features"]
            return cls(
                config=EncoderConfig.from_dict(payload["config"]),
                n_documents=int(payload["n_documents"]),
                vocabulary=tuple(str(f[0]) for f in features),
                document_frequency=tuple(int(f[1]) for f in features),
                idf=tuple(float(f[2]) for f in features),
            )
        except (KeyError, IndexError, TypeError) as e:
            raise RejectedInputError(f"Malformed vectorizer artifact: {e}") from e

    @cached_property
    def hash(self) -> str:
        return hashlib.sha256(dumps_canonical(self.to_dict()).encode("utf-8")).hexdigest()

    @cached_property
    def _counter(self) -> CountVectorizer:
        return _count_vectorizer(self.config, vocabulary={t: i for i, t in enumerate(self.vocabulary)})

    @cached_property
    def _idf_diag(self) -> sp.csr_matrix:
        return sp.diags(np.asarray(self.idf, dtype=np.float64), format="csr")


def _count_vectorizer(config: EncoderConfig, vocabulary=None) -> CountVectorizer:
    return CountVectorizer(
        lowercase=True,
        token_pattern=TOKEN_PATTERN,
        ngram_range=(config.ngram_min, config.ngram_max),
        vocabulary=vocabulary,
        dtype=np.float64,
    )


def fit_vectorizer(texts: Sequence[str], config: EncoderConfig = MAIN_CONFIG) -> VectorizerModel:
    """Fit on training-split step texts only; the result never changes afterwards"""
    config.validate()
    texts = list(texts)
    if not texts:
        raise RejectedInputError("Cannot fit a vectorizer on an empty corpus")

    counter = _count_vectorizer(config)
    try:
        counts = counter.fit_transform(texts)
    except ValueError as e:
        # sklearn refuses corpora with no tokens at all
        raise RejectedInputError(f"Vectorizer corpus has no usable tokens: {e}") from e
    names = counter.get_feature_names_out()
    df = np.asarray((counts > 0).sum(axis=0)).ravel().astype(np.int64)

    eligible = [(int(d), str(t)) for t, d in zip(names, df) if d >= config.min_df]
    eligible.sort(key=lambda x: (-x[0], x[1]))
    kept = sorted(eligible[:config.max_features], key=lambda x: x[1])
    if not kept:
        raise RejectedInputError(f"No feature reaches min_df={config.min_df}")

    n = len(texts)
    model = VectorizerModel(
        config=config,
        n_documents=n,
        vocabulary=tuple(t for _, t in kept),
        document_frequency=tuple(d for d, _ in kept),
        idf=tuple(math.log((1.0 + n) / (1.0 + d)) + 1.0 for d, _ in kept),
    )
    logging.info(
        "[Encoder] Fitted vectorizer | documents=%s | candidates=%s | features=%s | hash=%s",
        n, len(names), model.dimension, model.hash[:12],
    )
    return model


def fit_probe_vectorizer(texts: Sequence[str], config: EncoderConfig = PROBE_CONFIG) -> VectorizerModel:
    return fit_vectorizer(texts, config)


def encode_texts(model: VectorizerModel, texts: Sequence[str]) -> sp.csr_matrix:
    """(n, d) sparse l2-normalised TF-IDF rows; all-OOV texts map to zero rows"""
    counts = model._counter.transform(list(texts)).tocsr().astype(np.float64)
    if model.config.sublinear_tf:
        counts.data = 1.0 + np.log(counts.data)
    weighted = counts @ model._idf_diag
    return normalize(weighted, norm="l2", copy=False).tocsr()


def encode_step(model: VectorizerModel, text: str) -> sp.csr_matrix:
    return encode_texts(model, [text])


def save_vectorizer(path: str, model: VectorizerModel) -> None:
    write_json(path, model.to_dict())


def load_vectorizer(path: str) -> VectorizerModel:
    try:
        payload = read_json(path)
    except json.JSONDecodeError as e:
        raise RejectedInputError(f"Vectorizer file {path} is not valid JSON: {e}") from e
    return VectorizerModel.from_dict(payload)


def encode_trajectory(model: VectorizerModel, trajectory: StepViewTrajectory) -> sp.csr_matrix:
    """(T, d) step encodings, honouring the model's excluded StepView fields"""
    return encode_texts(model, trajectory.texts(exclude=model.config.excluded_fields))


@dataclass(frozen=True, eq=False)
class EncodedTrajectory:
    """Step encodings of one trajectory, tagged with the vectorizer that produced them"""
    trajectory_id: str
    task_id: str
    outcome: int
    features: sp.csr_matrix
    vectorizer_hash: str
    # explicit prefix labels; set only by the permuted-label control
    labels: Optional[Tuple[int, ...]] = None

    @property
    def length(self) -> int:
        return self.features.shape[0]

    def prefix_labels(self, horizon: int) -> Tuple[int, ...]:
        if self.labels is not None:
            return self.labels
        return warning_labels(self.length, self.outcome, horizon)


def encode_corpus(model: VectorizerModel, trajectories: Sequence[StepViewTrajectory]) -> List[EncodedTrajectory]:
    return [
        EncodedTrajectory(t.trajectory_id, t.task_id, t.outcome, encode_trajectory(model, t), model.hash)
        for t in trajectories
    ]
