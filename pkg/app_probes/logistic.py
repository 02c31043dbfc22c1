"""
L2-regularised, class-weighted logistic regression probe

Minimises  sum_i w_i * logloss_i + ||w||^2 / (2C)  with L-BFGS-B (bias not
penalised). Balanced weights are n / (2 n_class). Starting from zero, the
fit is deterministic; the seed is recorded for provenance only.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from common.errors import UndefinedMetricError, RejectedInputError

DEFAULT_C = 0.5
GRAD_TOL = 1e-6
MAX_ITER = 5000

Matrix = Union[np.ndarray, sp.spmatrix]


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    bias: float
    C: float
    balanced: bool
    seed: int
    converged: bool
    grad_norm: float

    def decision_function(self, X: Matrix) -> np.ndarray:
        return np.asarray(X @ self.weights).ravel() + self.bias

    def predict_proba(self, X: Matrix) -> np.ndarray:
        return expit(self.decision_function(X))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "weights": [float(x) for x in self.weights],
            "bias": self.bias,
            "C": self.C,
            "balanced": self.balanced,
            "seed": self.seed,
            "converged": self.converged,
            "grad_norm": self.grad_norm,
        }


def class_weights(labels: np.ndarray, balanced: bool) -> np.ndarray:
    if not balanced:
        return np.ones(labels.size)
    n = labels.size
    positives = labels.sum()
    return np.where(labels == 1, n / (2.0 * positives), n / (2.0 * (n - positives)))


def logistic_objective(
    theta: np.ndarray,
    X: Matrix,
    labels: np.ndarray,
    sample_weight: np.ndarray,
    C: float,
) -> Tuple[float, np.ndarray]:
    """(objective, gradient) at theta = [weights..., bias]"""
    w, b = theta[:-1], theta[-1]
    z = np.asarray(X @ w).ravel() + b
    # logloss = -y log sigma(z) - (1 - y) log sigma(-z)
    loss = -(labels * log_expit(z) + (1 - labels) * log_expit(-z))
    value = float(sample_weight @ loss + w @ w / (2.0 * C))
    residual = sample_weight * (expit(z) - labels)
    grad_w = np.asarray(X.T @ residual).ravel() + w / C
    return value, np.r_[grad_w, residual.sum()]


def fit_logistic(
    X: Matrix,
    labels,
    C: float = DEFAULT_C,
    balanced: bool = True,
    seed: int = 0,
    sample_weight: Optional[np.ndarray] = None,
) -> LogisticModel:
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if X.shape[0] != labels.size:
        raise RejectedInputError(f"{X.shape[0]} rows vs {labels.size} labels")
    if C <= 0:
        raise RejectedInputError(f"C must be > 0, got {C}")
    positives = int(labels.sum())
    if positives == 0 or positives == labels.size:
        raise UndefinedMetricError("Logistic probe needs both classes in its training labels")
    weights = class_weights(labels, balanced) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)

    result = minimize(
        logistic_objective,
        np.zeros(X.shape[1] + 1),
        args=(X, labels, weights, C),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": MAX_ITER, "gtol": GRAD_TOL, "ftol": 1e-15},
    )
    grad_norm = float(np.linalg.norm(result.jac))
    if not result.success:
        logging.warning("[Probe] Logistic fit stopped early | message=%s | grad_norm=%.2e", result.message, grad_norm)
    logging.info("[Probe] Fitted logistic probe | rows=%s | features=%s | C=%s | iterations=%s",
                 labels.size, X.shape[1], C, result.nit)
    return LogisticModel(
        weights=result.x[:-1].copy(),
        bias=float(result.x[-1]),
        C=C,
        balanced=balanced,
        seed=seed,
        converged=bool(result.success),
        grad_norm=grad_norm,
    )
