"""
Prefix warning monitor: event symbolizer plus a GRU or soft-FSM risk backend

Per step t the symbolizer maps the step encoding e_t to K symbol logits

    l_t = GELU(e_t W1 + b1) W2 + b2,   alpha_t = softmax(l_t / tau_g)

(Gumbel noise is added to l_t during training only). The backend folds the
alpha sequence into a risk score:

    gru:  h_t = GRU(GELU(alpha_t W_in), h_{t-1}),  s_t = sigma(h_t w + b)
    fsm:  q_t = fsm_update(q_{t-1}, alpha_t, T),    s_t = sigma(q_t w + b)

Scoring is online: StreamingScorer consumes one step at a time, so s_t
cannot see steps after t. When more than `max_sequence_length` steps have
been pushed, the recurrence is re-run over the most recent window.
"""

import os
import logging
from collections import deque
from dataclasses import dataclass
from typing import Any, Deque, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.special import erf, expit

from common.artifacts import load_blob, save_blob
from common.config import DEFAULT_SEED, config_from_dict, config_to_dict, require
from common.diffcore import FSM_NORM_EPS, GRU_PARAM_NAMES, uniform_init
from common.errors import ArtifactIntegrityError, NumericalDegeneracyError, RejectedInputError, VectorizerMismatchError
from common.file_parser import read_json, write_json
from app_encoder.vectorizer import EncodedTrajectory
from app_stepview.adapter import FIELDS

BACKENDS = ("gru", "fsm")
EVALUATION_MODE = "deterministic"
MODEL_FILE = "model.json"
VECTORIZER_FILE = "vectorizer.json"


@dataclass(frozen=True)
class MonitorConfig:
    alphabet_size: int = 16
    state_budget: int = 0
    hidden_width: int = 128
    gumbel_temperature: float = 0.5
    lambda_pred: float = 1.0
    lambda_balance: float = 0.1
    beta: float = 1.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 24
    eval_every: int = 1
    max_sequence_length: int = 64
    horizon: int = 3
    backend: str = "gru"
    excluded_fields: Tuple[str, ...] = ()
    seed: int = DEFAULT_SEED

    @property
    def states(self) -> int:
        """Q_max; 0 in the config means Q_max = K"""
        return self.state_budget or self.alphabet_size

    def validate(self) -> None:
        require(self.alphabet_size >= 2, "alphabet_size (K) must be >= 2")
        require(self.states >= 2, "state_budget (Q_max) must be >= 2")
        require(self.hidden_width >= 1, "hidden_width must be >= 1")
        require(self.horizon >= 1, "horizon must be >= 1")
        require(self.gumbel_temperature > 0, "gumbel_temperature must be > 0")
        require(self.lambda_pred > 0, "lambda_pred must be > 0")
        require(self.lambda_balance >= 0, "lambda_balance must be >= 0")
        require(self.learning_rate > 0, "learning_rate must be > 0")
        require(self.weight_decay >= 0, "weight_decay must be >= 0")
        require(self.batch_size >= 1, "batch_size must be >= 1")
        require(self.epochs >= 1, "epochs must be >= 1")
        require(self.eval_every >= 1, "eval_every must be >= 1")
        require(self.max_sequence_length >= 1, "max_sequence_length must be >= 1")
        require(self.backend in BACKENDS, f"backend must be one of {BACKENDS}, got {self.backend!r}")
        unknown = sorted(set(self.excluded_fields) - set(FIELDS))
        require(not unknown, f"unknown StepView fields in excluded_fields: {unknown}")

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "MonitorConfig":
        return config_from_dict(cls, payload)

    def to_dict(self) -> Dict[str, Any]:
        return config_to_dict(self)


@dataclass(frozen=True)
class RiskSeries:
    trajectory_id: str
    scores: Tuple[float, ...]
    symbols: Tuple[int, ...]

    def to_dict(self) -> Dict[str, Any]:
        return {"trajectory_id": self.trajectory_id, "scores": list(self.scores), "symbols": list(self.symbols)}


def parameter_layout(input_dim: int, config: MonitorConfig) -> Dict[str, Tuple[Tuple[int, ...], int]]:
    """name -> (shape, fan_in); fan_in 0 marks zero-initialised parameters"""
    K, Q, width = config.alphabet_size, config.states, config.hidden_width
    layout = {
        "sym.W1": ((input_dim, width), input_dim),
        "sym.b1": ((width,), input_dim),
        "sym.W2": ((width, K), width),
        "sym.b2": ((K,), width),
    }
    if config.backend == "gru":
        layout["gru.W_in"] = ((K, Q), K)
        for name in GRU_PARAM_NAMES:
            layout[f"gru.{name}"] = ((Q,) if name.startswith("b_") else (Q, Q), Q)
    else:
        layout["fsm.T"] = ((K, Q, Q), Q)
        layout["fsm.theta0"] = ((Q,), 0)
    layout["head.w"] = ((Q, 1), Q)
    layout["head.b"] = ((1,), 0)
    return layout


def init_parameters(rng: np.random.Generator, input_dim: int, config: MonitorConfig) -> Dict[str, np.ndarray]:
    params = {}
    for name, (shape, fan_in) in parameter_layout(input_dim, config).items():
        params[name] = uniform_init(rng, shape, fan_in) if fan_in else np.zeros(shape)
    return params


def gelu_np(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))


def softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class MonitorModel:
    """Trained weights plus everything needed to score and reload them"""

    def __init__(
        self,
        config: MonitorConfig,
        params: Mapping[str, np.ndarray],
        input_dim: int,
        vectorizer_hash: str,
        info: Optional[Dict[str, Any]] = None,
    ):
        self.config = config
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.input_dim = input_dim
        self.vectorizer_hash = vectorizer_hash
        self.info = dict(info or {})
        for name, (shape, _) in parameter_layout(input_dim, config).items():
            if name not in self.params or self.params[name].shape != shape:
                got = self.params[name].shape if name in self.params else None
                raise RejectedInputError(f"Parameter {name} has shape {got}, expected {shape}")

    def check_encoding(self, encoded: EncodedTrajectory) -> None:
        if encoded.vectorizer_hash != self.vectorizer_hash:
            raise VectorizerMismatchError(
                f"Trajectory {encoded.trajectory_id} was encoded by vectorizer {encoded.vectorizer_hash[:12]}, "
                f"model expects {self.vectorizer_hash[:12]}"
            )
        if encoded.features.shape[1] != self.input_dim:
            raise VectorizerMismatchError(
                f"Encoding width {encoded.features.shape[1]} does not match model input {self.input_dim}"
            )

    # ------------------------------------------------------------------
    # Per-step numerics (deterministic evaluation path)
    # ------------------------------------------------------------------

    def symbol_logits(self, row: sp.csr_matrix) -> np.ndarray:
        """Logits of a single (1, d) step encoding"""
        p = self.params
        hidden = gelu_np(np.asarray(row @ p["sym.W1"]).reshape(-1) + p["sym.b1"])
        return hidden @ p["sym.W2"] + p["sym.b2"]

    def soft_symbols(self, logits: np.ndarray) -> np.ndarray:
        return softmax_np(logits / self.config.gumbel_temperature)

    def initial_state(self) -> np.ndarray:
        if self.config.backend == "gru":
            return np.zeros(self.config.states)
        return softmax_np(self.params["fsm.theta0"])

    def advance(self, state: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        p = self.params
        if self.config.backend == "gru":
            x = gelu_np(alpha @ p["gru.W_in"])
            z = expit(x @ p["gru.W_z"] + state @ p["gru.U_z"] + p["gru.b_z"])
            r = expit(x @ p["gru.W_r"] + state @ p["gru.U_r"] + p["gru.b_r"])
            candidate = np.tanh(x @ p["gru.W_h"] + (r * state) @ p["gru.U_h"] + p["gru.b_h"])
            return (1.0 - z) * state + z * candidate
        transitions = np.logaddexp(0.0, p["fsm.T"])
        mixed = np.einsum("k,kij->ij", alpha, transitions)
        unnormalised = state @ mixed
        norm = unnormalised.sum()
        if norm < FSM_NORM_EPS:
            raise NumericalDegeneracyError(f"Soft-FSM state mass {norm:.3e} fell below {FSM_NORM_EPS}")
        return unnormalised / norm

    def risk(self, state: np.ndarray) -> float:
        return float(expit(state @ self.params["head.w"][:, 0] + self.params["head.b"][0]))

    def scorer(self) -> "StreamingScorer":
        return StreamingScorer(self)

    # ------------------------------------------------------------------
    # Persistence
    # ------------------------------------------------------------------

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        blobs = {}
        for name in sorted(self.params):
            blobs[name] = save_blob(os.path.join(directory, f"{name}.f8"), self.params[name])
        write_json(os.path.join(directory, MODEL_FILE), {
            "config": self.config.to_dict(),
            "input_dim": self.input_dim,
            "vectorizer_hash": self.vectorizer_hash,
            "evaluation_mode": EVALUATION_MODE,
            "beta": self.config.beta,
            "parameters": blobs,
            "info": self.info,
        })
        logging.info("[Monitor] Saved model | dir=%s | backend=%s | parameters=%s",
                     directory, self.config.backend, len(blobs))

    @classmethod
    def load(cls, directory: str) -> "MonitorModel":
        path = os.path.join(directory, MODEL_FILE)
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        payload = read_json(path)
        try:
            config = MonitorConfig.from_dict(payload["config"])
            params = {name: load_blob(directory, entry) for name, entry in payload["parameters"].items()}
            return cls(config, params, int(payload["input_dim"]), payload["vectorizer_hash"], payload.get("info"))
        except KeyError as e:
            raise ArtifactIntegrityError(f"Model manifest {path} lacks {e}") from e


class StreamingScorer:
    """
    Online scorer: push one step encoding, get (s_t, z_t)

    Holds the recurrent state and the last `max_sequence_length` soft
    symbols; once the window is full, each push re-runs the recurrence from
    the initial state over the window.
    """

    def __init__(self, model: MonitorModel):
        self.model = model
        self.window = model.config.max_sequence_length
        self.state = model.initial_state()
        self.history: Deque[np.ndarray] = deque(maxlen=self.window)
        self.steps = 0

    def push(self, row: sp.csr_matrix) -> Tuple[float, int]:
        logits = self.model.symbol_logits(row)
        alpha = self.model.soft_symbols(logits)
        self.steps += 1
        self.history.append(alpha)
        if self.steps > self.window:
            state = self.model.initial_state()
            for a in self.history:
                state = self.model.advance(state, a)
            self.state = state
        else:
            self.state = self.model.advance(self.state, alpha)
        return self.model.risk(self.state), int(np.argmax(logits))


def score_prefix(model: MonitorModel, encoded: EncodedTrajectory) -> RiskSeries:
    """Causal per-step risk scores s_1..s_T and hard symbols z_1..z_T"""
    model.check_encoding(encoded)
    scorer = model.scorer()
    scores: List[float] = []
    symbols: List[int] = []
    features = encoded.features.tocsr()
    for t in range(features.shape[0]):
        s, z = scorer.push(features[t])
        scores.append(s)
        symbols.append(z)
    return RiskSeries(encoded.trajectory_id, tuple(scores), tuple(symbols))


def hard_symbolize(model: MonitorModel, encoded: EncodedTrajectory) -> Tuple[int, ...]:
    """z_t = argmax_k of the noise-free symbol logits; ties go to the lowest index"""
    model.check_encoding(encoded)
    features = encoded.features.tocsr()
    return tuple(int(np.argmax(model.symbol_logits(features[t]))) for t in range(features.shape[0]))


def score_corpus(model: MonitorModel, encoded: Sequence[EncodedTrajectory]) -> List[RiskSeries]:
    return [score_prefix(model, e) for e in encoded]


def soft_symbol_marginal(model: MonitorModel, encoded: Sequence[EncodedTrajectory]) -> np.ndarray:
    """Mean deterministic alpha over every step, i.e. the symbol usage distribution"""
    total = np.zeros(model.config.alphabet_size)
    count = 0
    for e in encoded:
        features = e.features.tocsr()
        for t in range(features.shape[0]):
            total += model.soft_symbols(model.symbol_logits(features[t]))
            count += 1
    if count == 0:
        raise RejectedInputError("Symbol marginal needs at least one step")
    return total / count
