"""
Joint training of the symbolizer and risk backend

    L = lambda_pred * L_pred + lambda_balance * L_balance

L_pred is the per-trajectory-normalised prefix BCE over a padded batch and
L_balance the symbol-balance regulariser pooled over the batch's real
steps. Labels are computed on the full trajectory and then both features and
labels are cut to the most recent `max_sequence_length` steps. The
checkpoint with the best pooled validation AUPRC is returned.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from common import diffcore as dc
from common.errors import RejectedInputError, UndefinedMetricError
from common.metrics import (
    TrajectoryScores,
    auroc,
    average_precision,
    ece,
    first_alert_diagnostics,
)
from app_encoder.vectorizer import EncodedTrajectory

from .model import MonitorConfig, MonitorModel, init_parameters, score_corpus, soft_symbol_marginal
from .thresholds import select_threshold


@dataclass(frozen=True)
class PreparedTrajectory:
    trajectory_id: str
    features: sp.csr_matrix
    labels: np.ndarray


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    pred_loss: float
    balance_loss: float
    validation_auprc: Optional[float]


@dataclass
class TrainReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_validation_auprc: float = float("-inf")
    best_checkpoint: str = ""
    calibration_f1_threshold: Optional[float] = None
    symbol_marginal: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epochs": [vars(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_validation_auprc": self.best_validation_auprc,
            "best_checkpoint": self.best_checkpoint,
            "calibration_f1_threshold": self.calibration_f1_threshold,
            "symbol_marginal": self.symbol_marginal,
        }


def prepare(encoded: EncodedTrajectory, config: MonitorConfig) -> PreparedTrajectory:
    labels = np.asarray(encoded.prefix_labels(config.horizon), dtype=np.float64)
    keep = config.max_sequence_length
    features = encoded.features.tocsr()
    if encoded.length > keep:
        features = features[-keep:]
        labels = labels[-keep:]
    return PreparedTrajectory(encoded.trajectory_id, features, labels)


def series_labels(encoded: Sequence[EncodedTrajectory], horizon: int) -> Dict[str, Tuple[int, ...]]:
    return {e.trajectory_id: e.prefix_labels(horizon) for e in encoded}


def risk_series(model: MonitorModel, encoded: Sequence[EncodedTrajectory]) -> List[TrajectoryScores]:
    outcome = {e.trajectory_id: e.outcome for e in encoded}
    return [TrajectoryScores(r.trajectory_id, outcome[r.trajectory_id], r.scores) for r in score_corpus(model, encoded)]


def pooled_arrays(series: Sequence[TrajectoryScores], labels: Mapping[str, Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    y = np.concatenate([np.asarray(labels[s.trajectory_id], dtype=np.int64) for s in series])
    s = np.concatenate([np.asarray(s.scores, dtype=np.float64) for s in series])
    return y, s


# ----------------------------------------------------------------------------
# Differentiable forward pass
# ----------------------------------------------------------------------------

def monitor_loss(
    params: Mapping[str, dc.Tensor],
    batch: Sequence[PreparedTrajectory],
    config: MonitorConfig,
    noise_rng: Optional[np.random.Generator] = None,
) -> Tuple[dc.Tensor, dc.Tensor, dc.Tensor]:
    """
    (total, L_pred, L_balance) for one padded batch

    With `noise_rng` the symbolizer samples Gumbel noise; without it the
    deterministic evaluation path is used (gradient checks rely on that).
    """
    if not batch:
        raise RejectedInputError("monitor_loss needs a nonempty batch")
    K = config.alphabet_size
    lengths = [b.features.shape[0] for b in batch]
    L = max(lengths)
    B = len(batch)

    X = sp.vstack([b.features for b in batch]).tocsr()
    hidden = dc.gelu(dc.sparse_matmul(X, params["sym.W1"]) + params["sym.b1"])
    logits = dc.matmul(hidden, params["sym.W2"]) + params["sym.b2"]
    if noise_rng is None:
        alpha = dc.gumbel_softmax(logits, config.gumbel_temperature, mode="deterministic")
    else:
        alpha = dc.gumbel_softmax(logits, config.gumbel_temperature, mode="sampled", rng=noise_rng)

    n_real = X.shape[0]
    gather = np.full((B, L), n_real, dtype=np.int64)
    mask = np.zeros((B, L))
    labels = np.zeros((B, L))
    offset = 0
    for i, b in enumerate(batch):
        n = lengths[i]
        gather[i, :n] = np.arange(offset, offset + n)
        mask[i, :n] = 1.0
        labels[i, :n] = b.labels
        offset += n
    # padded positions read a uniform symbol vector so the soft-FSM never sees zero mass
    padded = dc.concat([alpha, dc.constant(np.full((1, K), 1.0 / K))], axis=0)
    alpha_seq = dc.take(padded, gather)

    scores = []
    if config.backend == "gru":
        cell = {name: params[f"gru.{name}"] for name in dc.GRU_PARAM_NAMES}
        state = dc.constant(np.zeros((B, config.states)))
        for t in range(L):
            x = dc.gelu(dc.matmul(dc.take(alpha_seq, (slice(None), t)), params["gru.W_in"]))
            state = dc.gru_cell(x, state, cell)
            scores.append(dc.sigmoid(dc.matmul(state, params["head.w"]) + params["head.b"]))
    else:
        transitions = dc.softplus(params["fsm.T"])
        state = dc.mul(dc.constant(np.ones((B, 1))), dc.softmax(params["fsm.theta0"]))
        for t in range(L):
            state = dc.fsm_step(state, dc.take(alpha_seq, (slice(None), t)), transitions)
            scores.append(dc.sigmoid(dc.matmul(state, params["head.w"]) + params["head.b"]))

    pred = dc.bce_prefix_loss(dc.concat(scores, axis=1), labels, mask)
    balance = dc.balance_loss(alpha, config.beta)
    total = config.lambda_pred * pred + config.lambda_balance * balance
    return total, pred, balance


# ----------------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------------

def _check_inputs(sets: Sequence[Sequence[EncodedTrajectory]]) -> Tuple[int, str]:
    hashes = {e.vectorizer_hash for s in sets for e in s}
    widths = {e.features.shape[1] for s in sets for e in s}
    if len(hashes) != 1 or len(widths) != 1:
        raise RejectedInputError("All splits must be encoded by one vectorizer")
    return widths.pop(), hashes.pop()


def validation_auprc(model: MonitorModel, validation: Sequence[EncodedTrajectory]) -> float:
    series = risk_series(model, validation)
    y, s = pooled_arrays(series, series_labels(validation, model.config.horizon))
    return average_precision(y, s)


def train_monitor(
    train: Sequence[EncodedTrajectory],
    calibration: Sequence[EncodedTrajectory],
    validation: Sequence[EncodedTrajectory],
    config: MonitorConfig,
) -> Tuple[MonitorModel, TrainReport]:
    """Algorithm: AdamW over shuffled trajectory batches, best-validation-AUPRC checkpointing"""
    config.validate()
    if not train or not validation:
        raise RejectedInputError("train_monitor needs nonempty train and validation splits")
    input_dim, vectorizer_hash = _check_inputs([train, calibration, validation])

    val_labels = series_labels(validation, config.horizon)
    val_positive = sum(sum(v) for v in val_labels.values())
    val_total = sum(len(v) for v in val_labels.values())
    if val_positive == 0 or val_positive == val_total:
        raise UndefinedMetricError("Validation split has a single prefix class; AUPRC is undefined")

    rng = np.random.default_rng(config.seed)
    params = {k: dc.parameter(v, k) for k, v in init_parameters(rng, input_dim, config).items()}
    optimizer = dc.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    prepared = [prepare(e, config) for e in train]
    report = TrainReport()
    best_params: Dict[str, np.ndarray] = {}

    logging.info(
        "[Monitor] Training | backend=%s | K=%s | Q=%s | train=%s | validation=%s | epochs=%s | seed=%s",
        config.backend, config.alphabet_size, config.states, len(train), len(validation), config.epochs, config.seed,
    )
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(prepared))
        sums = np.zeros(3)
        for start in range(0, len(order), config.batch_size):
            batch = [prepared[int(i)] for i in order[start:start + config.batch_size]]
            optimizer.zero_grad()
            total, pred, balance = monitor_loss(params, batch, config, noise_rng=rng)
            total.backward()
            optimizer.step()
            sums += len(batch) * np.array([total.item(), pred.item(), balance.item()])
        means = sums / len(prepared)

        auprc = None
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            snapshot = MonitorModel(config, {k: p.data.copy() for k, p in params.items()}, input_dim, vectorizer_hash)
            auprc = validation_auprc(snapshot, validation)
            if auprc > report.best_validation_auprc:
                report.best_validation_auprc = auprc
                report.best_epoch = epoch
                report.best_checkpoint = f"epoch-{epoch:03d}"
                best_params = snapshot.params
                logging.info("[Monitor] New best checkpoint | epoch=%s | validation_auprc=%.4f", epoch, auprc)

        report.epochs.append(EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]), auprc))
        logging.info(
            "[Monitor] Epoch done | epoch=%s | loss=%.5f | pred=%.5f | balance=%.5f | validation_auprc=%s",
            epoch, means[0], means[1], means[2], "n/a" if auprc is None else f"{auprc:.4f}",
        )

    model = MonitorModel(config, best_params, input_dim, vectorizer_hash)
    report.symbol_marginal = [float(x) for x in soft_symbol_marginal(model, validation)]
    if calibration:
        try:
            cal_series = risk_series(model, calibration)
            report.calibration_f1_threshold = select_threshold(cal_series, series_labels(calibration, config.horizon), "f1")
        except UndefinedMetricError as e:
            logging.warning("[Monitor] No calibration threshold | reason=%s", e)
    model.info.update({
        "best_epoch": report.best_epoch,
        "best_validation_auprc": report.best_validation_auprc,
        "calibration_f1_threshold": report.calibration_f1_threshold,
    })
    return model, report


def shuffled_label_control(
    encoded: Sequence[EncodedTrajectory], seed: int, horizon: int = 3,
) -> List[EncodedTrajectory]:
    """
    Null-signal control: the split's pooled prefix labels permuted across trajectories

    The positive count is kept and each trajectory keeps its length, but a label
    no longer depends on step content or position. Applied to every split, test
    included, a leak-free pipeline lands on the positive-prefix rate.
    """
    pooled = np.concatenate([np.asarray(e.prefix_labels(horizon), dtype=np.int64) for e in encoded])
    permuted = np.random.default_rng(seed).permutation(pooled)
    out = []
    start = 0
    for e in encoded:
        out.append(replace(e, labels=tuple(int(p) for p in permuted[start:start + e.length])))
        start += e.length
    return out


def scan_horizon(
    train: Sequence[EncodedTrajectory],
    calibration: Sequence[EncodedTrajectory],
    validation: Sequence[EncodedTrajectory],
    config: MonitorConfig,
    horizons: Sequence[int] = (1, 3, 5),
) -> List[Dict[str, Any]]:
    """
    Retrain for each horizon H and report validation-only metrics

    Rows hold the positive-prefix rate, AUPRC, AUROC, ECE and the
    unconditional lead time at the calibration F1 threshold.
    """
    rows = []
    for horizon in horizons:
        cfg = replace(config, horizon=int(horizon))
        model, report = train_monitor(train, calibration, validation, cfg)
        labels = series_labels(validation, cfg.horizon)
        series = risk_series(model, validation)
        y, s = pooled_arrays(series, labels)
        threshold = report.calibration_f1_threshold
        lead = None
        if threshold is not None:
            lead = first_alert_diagnostics(series, threshold, cfg.horizon).lead_time
        row = {
            "horizon": cfg.horizon,
            "positive_rate": float(y.mean()),
            "auprc": average_precision(y, s),
            "auroc": auroc(y, s),
            "ece": ece(y, s),
            "f1_threshold": threshold,
            "lead_time": lead,
            "best_epoch": report.best_epoch,
        }
        logging.info("[Monitor] Horizon scan row | horizon=%s | auprc=%.4f | positive_rate=%.4f",
                     row["horizon"], row["auprc"], row["positive_rate"])
        rows.append(row)
    return rows
