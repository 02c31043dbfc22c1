"""
Confound controls and supervised prefix probes

Each control fits on train-split prefixes only and reports pooled AP / ROC
on the evaluation split, using the same warning labels as the monitor.
No control reads a stored monitor; the scrambled control trains its own.

    t_only           position features [t, t^2, ln(1+t), sqrt(t)]
    t_plus_T_oracle  position features plus the final length T (future information)
    task_prior       task id and whitelisted step-1 metadata, one-hot
    tfidf_lr         TF-IDF of the concatenated prefix text, logistic probe
    pooled_mlp       mean-pooled step TF-IDF, GELU MLP trained with diffcore
    scrambled        monitor trained and evaluated on step-order-scrambled prefixes
"""

import math
import logging
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from sklearn.feature_extraction import DictVectorizer
from sklearn.preprocessing import StandardScaler

from common import diffcore as dc
from common.config import DEFAULT_SEED, config_from_dict, config_to_dict, require
from common.errors import RejectedInputError
from common.metrics import auroc, average_precision
from common.trace_model import scramble_order, warning_labels
from app_encoder.vectorizer import (
    EncodedTrajectory,
    EncoderConfig,
    encode_corpus,
    encode_texts,
    encode_trajectory,
    fit_probe_vectorizer,
    fit_vectorizer,
)
from app_monitor.model import MonitorConfig, score_prefix
from app_monitor.training import train_monitor
from app_stepview.adapter import StepViewTrajectory

from .logistic import fit_logistic

CONTROL_KINDS = ("t_only", "t_plus_T_oracle", "task_prior", "tfidf_lr", "pooled_mlp", "scrambled")


@dataclass(frozen=True)
class ControlConfig:
    horizon: int = 3
    C: float = 0.5
    balanced: bool = True
    metadata_whitelist: Tuple[str, ...] = ()
    mlp_hidden: int = 128
    mlp_epochs: int = 20
    mlp_batch_size: int = 256
    mlp_learning_rate: float = 1e-3
    mlp_weight_decay: float = 1e-4
    scramble_seed: int = 0
    seed: int = DEFAULT_SEED

    def validate(self) -> None:
        require(self.horizon >= 1, "horizon must be >= 1")
        require(self.C > 0, "C must be > 0")
        require(self.mlp_hidden >= 1, "mlp_hidden must be >= 1")
        require(self.mlp_epochs >= 1, "mlp_epochs must be >= 1")
        require(self.mlp_batch_size >= 1, "mlp_batch_size must be >= 1")
        require(self.mlp_learning_rate > 0, "mlp_learning_rate must be > 0")

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ControlConfig":
        return config_from_dict(cls, payload)

    def to_dict(self) -> Dict[str, Any]:
        return config_to_dict(self)


def position_features(t: int) -> np.ndarray:
    if t < 1:
        raise RejectedInputError(f"Prefix index must be >= 1, got {t}")
    return np.array([t, t * t, math.log1p(t), math.sqrt(t)], dtype=np.float64)


def prefix_labels(trajectories: Sequence[StepViewTrajectory], horizon: int) -> np.ndarray:
    return np.asarray(
        [p for traj in trajectories for p in warning_labels(traj.length, traj.outcome, horizon)], dtype=np.int64,
    )


def _ranking(labels: np.ndarray, scores: np.ndarray) -> Dict[str, Any]:
    return {
        "n": int(labels.size),
        "positive_rate": float(labels.mean()),
        "auprc": average_precision(labels, scores),
        "auroc": auroc(labels, scores),
    }


# ----------------------------------------------------------------------------
# Feature builders: (train trajectories, eval trajectories) -> (X_train, X_eval)
# ----------------------------------------------------------------------------

def _position_matrix(trajectories: Sequence[StepViewTrajectory], with_length: bool) -> np.ndarray:
    rows = []
    for traj in trajectories:
        for t in range(1, traj.length + 1):
            row = position_features(t)
            rows.append(np.r_[row, traj.length] if with_length else row)
    return np.vstack(rows)


def _scaled(train: np.ndarray, evaluation: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    scaler = StandardScaler().fit(train)
    return scaler.transform(train), scaler.transform(evaluation)


def _task_tokens(traj: StepViewTrajectory, whitelist: Sequence[str]) -> Dict[str, float]:
    tokens = {f"task={traj.task_id}": 1.0}
    if traj.records:
        for line in traj.records[0].metadata_lines:
            key = line.split("=", 1)[0]
            if not whitelist or key in whitelist:
                tokens[f"meta:{line}"] = 1.0
    return tokens


def _task_matrix(train, evaluation, config: ControlConfig):
    vec = DictVectorizer(sparse=True)

    def rows(trajectories):
        return [_task_tokens(traj, config.metadata_whitelist) for traj in trajectories for _ in range(traj.length)]

    return vec.fit_transform(rows(train)).tocsr(), vec.transform(rows(evaluation)).tocsr()


def prefix_texts(traj: StepViewTrajectory) -> List[str]:
    steps = traj.texts()
    return [" \n ".join(steps[:t]) for t in range(1, len(steps) + 1)]


def _tfidf_matrix(train, evaluation, config: ControlConfig):
    train_texts = [x for traj in train for x in prefix_texts(traj)]
    vectorizer = fit_probe_vectorizer(train_texts)
    eval_texts = [x for traj in evaluation for x in prefix_texts(traj)]
    return encode_texts(vectorizer, train_texts), encode_texts(vectorizer, eval_texts)


def pooled_steps(features: sp.csr_matrix) -> sp.csr_matrix:
    """Row t is the mean of step rows 1..t"""
    T = features.shape[0]
    weights = np.tril(np.ones((T, T))) / np.arange(1, T + 1)[:, None]
    return (sp.csr_matrix(weights) @ features).tocsr()


def _logistic_control(builder: Callable, train, evaluation, config: ControlConfig) -> np.ndarray:
    X_train, X_eval = builder(train, evaluation, config)
    model = fit_logistic(X_train, prefix_labels(train, config.horizon), config.C, config.balanced, config.seed)
    return model.predict_proba(X_eval)


# ----------------------------------------------------------------------------
# Pooled StepView MLP
# ----------------------------------------------------------------------------

def _mlp_forward(params: Mapping[str, dc.Tensor], X: sp.csr_matrix) -> dc.Tensor:
    hidden = dc.gelu(dc.add(dc.sparse_matmul(X, params["W1"]), params["b1"]))
    logits = dc.add(dc.matmul(hidden, params["w2"]), params["b2"])
    return dc.reshape(dc.sigmoid(logits), (-1,))


def train_pooled_mlp(X: sp.csr_matrix, labels: np.ndarray, config: ControlConfig) -> Dict[str, dc.Tensor]:
    rng = np.random.default_rng(config.seed)
    d, width = X.shape[1], config.mlp_hidden
    params = {
        "W1": dc.parameter(dc.uniform_init(rng, (d, width), d), "W1"),
        "b1": dc.parameter(np.zeros(width), "b1"),
        "w2": dc.parameter(dc.uniform_init(rng, (width, 1), width), "w2"),
        "b2": dc.parameter(np.zeros(1), "b2"),
    }
    optimizer = dc.AdamW(params, lr=config.mlp_learning_rate, weight_decay=config.mlp_weight_decay)
    for epoch in range(1, config.mlp_epochs + 1):
        order = rng.permutation(X.shape[0])
        total = 0.0
        for start in range(0, order.size, config.mlp_batch_size):
            idx = order[start:start + config.mlp_batch_size]
            optimizer.zero_grad()
            loss = dc.bce_prefix_loss(_mlp_forward(params, X[idx]), labels[idx].astype(np.float64))
            loss.backward()
            optimizer.step()
            total += loss.item() * idx.size
        logging.debug("[Probe] Pooled MLP epoch | epoch=%s | loss=%.5f", epoch, total / order.size)
    return params


def _pooled_mlp_scores(train, evaluation, config: ControlConfig) -> np.ndarray:
    vectorizer = fit_vectorizer([x for traj in train for x in traj.texts()], EncoderConfig())

    def pooled(trajectories):
        return sp.vstack([pooled_steps(encode_trajectory(vectorizer, traj)) for traj in trajectories]).tocsr()

    params = train_pooled_mlp(pooled(train), prefix_labels(train, config.horizon), config)
    return _mlp_forward(params, pooled(evaluation)).data


# ----------------------------------------------------------------------------
# Content-scrambled control
# ----------------------------------------------------------------------------

def scramble_stepview(traj: StepViewTrajectory, t: int, seed: int) -> StepViewTrajectory:
    """First t records in the same permutation `scramble_prefix` applies to raw steps"""
    if not 1 <= t <= traj.length:
        raise RejectedInputError(f"Prefix index {t} outside 1..{traj.length}")
    order = scramble_order(traj.trajectory_id, t, seed)
    return replace(traj, records=tuple(traj.records[int(i)] for i in order))


def _last_prefix_scores(model, vectorizer, trajectories, seed=None) -> np.ndarray:
    """s_t of every prefix; with a seed, prefix t is scored after scrambling its own t steps"""
    scores = []
    for traj in trajectories:
        if seed is None:
            encoded = encode_corpus(vectorizer, [traj])[0]
            scores.extend(score_prefix(model, encoded).scores)
            continue
        for t in range(1, traj.length + 1):
            encoded = encode_corpus(vectorizer, [scramble_stepview(traj, t, seed)])[0]
            scores.append(score_prefix(model, encoded).scores[-1])
    return np.asarray(scores)


def _train_main(splits: Mapping[str, Sequence[StepViewTrajectory]], monitor: MonitorConfig):
    vectorizer = fit_vectorizer([x for traj in splits["train"] for x in traj.texts()], EncoderConfig())
    encoded: Dict[str, List[EncodedTrajectory]] = {
        role: encode_corpus(vectorizer, splits[role]) for role in ("train", "calibration", "validation")
    }
    model, _ = train_monitor(encoded["train"], encoded["calibration"], encoded["validation"], monitor)
    return model, vectorizer


def scrambled_control(
    splits: Mapping[str, Sequence[StepViewTrajectory]],
    evaluation: Sequence[StepViewTrajectory],
    config: ControlConfig,
    monitor: MonitorConfig,
) -> Dict[str, Any]:
    """AP of the main recipe on original data vs. trained and evaluated on scrambled prefixes"""
    labels = prefix_labels(evaluation, config.horizon)
    model, vectorizer = _train_main(splits, monitor)
    original = _ranking(labels, _last_prefix_scores(model, vectorizer, evaluation))

    seed = config.scramble_seed
    scrambled_splits = {
        role: [scramble_stepview(traj, traj.length, seed) for traj in items] for role, items in splits.items()
    }
    s_model, s_vectorizer = _train_main(scrambled_splits, monitor)
    scrambled = _ranking(labels, _last_prefix_scores(s_model, s_vectorizer, evaluation, seed=seed))
    return {
        **scrambled,
        "auprc_original": original["auprc"],
        "auroc_original": original["auroc"],
        "auprc_gap": original["auprc"] - scrambled["auprc"],
    }


# ----------------------------------------------------------------------------
# Dispatch
# ----------------------------------------------------------------------------

_LOGISTIC_BUILDERS: Dict[str, Callable] = {
    "t_only": lambda tr, ev, cfg: _scaled(_position_matrix(tr, False), _position_matrix(ev, False)),
    "t_plus_T_oracle": lambda tr, ev, cfg: _scaled(_position_matrix(tr, True), _position_matrix(ev, True)),
    "task_prior": _task_matrix,
    "tfidf_lr": _tfidf_matrix,
}


def run_control(
    kind: str,
    splits: Mapping[str, Sequence[StepViewTrajectory]],
    evaluation: Sequence[StepViewTrajectory],
    config: ControlConfig = ControlConfig(),
    monitor: MonitorConfig = MonitorConfig(),
) -> Dict[str, Any]:
    """
    `splits` holds the fitting roles (train; calibration and validation for
    the scrambled control); `evaluation` is the held-out split
    """
    if kind not in CONTROL_KINDS:
        raise RejectedInputError(f"Unknown control {kind!r}; choose one of {CONTROL_KINDS}")
    config.validate()
    train = list(splits["train"])
    if not train or not evaluation:
        raise RejectedInputError("Controls need nonempty train and evaluation splits")

    if kind == "scrambled":
        row = scrambled_control(splits, evaluation, config, replace(monitor, horizon=config.horizon))
    elif kind == "pooled_mlp":
        row = _ranking(prefix_labels(evaluation, config.horizon), _pooled_mlp_scores(train, evaluation, config))
    else:
        scores = _logistic_control(_LOGISTIC_BUILDERS[kind], train, evaluation, config)
        row = _ranking(prefix_labels(evaluation, config.horizon), scores)
    row = {"kind": kind, **row}
    logging.info("[Probe] Control done | kind=%s | auprc=%.4f | auroc=%.4f", kind, row["auprc"], row["auroc"])
    return row
