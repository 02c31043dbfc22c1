"""
Minimal reverse-mode differentiation engine

Just enough tensor algebra for the event symbolizer, the GRU and soft-FSM
backends, the training losses and the pooled-MLP probe. Everything is
float64 numpy; a node remembers its parents and a closure that maps the
output gradient to parent gradients, and backward() walks nodes in reverse
creation order (parents are always created before children).
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import erf, expit

from .errors import NumericalDegeneracyError, RejectedInputError

BCE_EPS = 1e-7
FSM_NORM_EPS = 1e-12
_LOG_FLOOR = 1e-30
_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_node_ids = itertools.count()

ArrayLike = Union["Tensor", np.ndarray, float, int]


class Tensor:
    """A value on the tape; `grad` is filled by backward() when requires_grad is set"""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")
    __array_ufunc__ = None  # let ndarray <op> Tensor fall through to Tensor's reflected operators

    def __init__(
        self,
        data,
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name
        self._parents = parents
        self._backward = backward
        self._id = next(_node_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.data.shape}>"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with requires_grad"""
        if grad is None:
            if self.data.size != 1:
                raise RejectedInputError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        nodes = _reachable(self)
        for node in nodes:
            if node._parents:
                node.grad = None
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in nodes:
            if node.grad is None or node._backward is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _reachable(root: Tensor) -> List[Tensor]:
    seen = {root._id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for parent in node._parents:
            if parent.requires_grad and parent._id not in seen:
                seen[parent._id] = parent
                stack.append(parent)
    return [seen[k] for k in sorted(seen, reverse=True)]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# Elementwise and linear-algebra ops
# ----------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = constant(a), constant(b)
    return Tensor(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = constant(a), constant(b)
    return Tensor(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = constant(a), constant(b)
    return Tensor(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data / b.data
    return Tensor(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """(n, k) @ (k, m); a 1-d left operand is treated as a single row"""
    a, b = constant(a), constant(b)
    if a.data.ndim not in (1, 2) or b.data.ndim != 2 or a.data.shape[-1] != b.data.shape[0]:
        raise RejectedInputError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.data.ndim == 1:
            return g @ b.data.T, np.outer(a.data, g)
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, (a, b), backward)


def sparse_matmul(x: sp.spmatrix, w: Tensor) -> Tensor:
    """Constant sparse (n, d) times dense parameter (d, m)"""
    x = sp.csr_matrix(x)
    if x.shape[1] != w.shape[0]:
        raise RejectedInputError(f"sparse_matmul shape mismatch: {x.shape} @ {w.shape}")
    out = np.asarray(x @ w.data)
    return Tensor(out, (w,), lambda g: (np.asarray(x.T @ g),))


def einsum(subscripts: str, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Two-operand einsum; every index of an operand must appear in the output or the other operand"""
    a, b = constant(a), constant(b)
    inputs, out = subscripts.replace(" ", "").split("->")
    sa, sb = inputs.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if any(ch not in out and ch not in other for ch in own):
            raise RejectedInputError(f"einsum {subscripts!r} sums an index private to one operand")
    return Tensor(
        np.einsum(subscripts, a.data, b.data), (a, b),
        lambda g: (
            np.einsum(f"{out},{sb}->{sa}", g, b.data),
            np.einsum(f"{out},{sa}->{sb}", g, a.data),
        ),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return Tensor(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    return Tensor(np.logaddexp(0.0, x.data), (x,), lambda g: (g * expit(x.data),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)"""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return Tensor(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def clip(x: Tensor, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    out = np.clip(x.data, low, high)
    inside = np.ones_like(x.data, dtype=bool)
    if low is not None:
        inside &= x.data >= low
    if high is not None:
        inside &= x.data <= high
    return Tensor(out, (x,), lambda g: (g * inside,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return Tensor(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def take(x: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor(x.data[index], (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return Tensor(
        out, tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))),
    )


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [constant(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]
    return Tensor(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


# ----------------------------------------------------------------------------
# Model-level ops
# ----------------------------------------------------------------------------

def gumbel_softmax(
    logits: Tensor,
    temperature: float,
    mode: str = "deterministic",
    rng: Optional[np.random.Generator] = None,
    seed: Optional[int] = None,
) -> Tensor:
    """
    Soft one-hot assignment over the last axis

    `sampled` adds Gumbel(0, 1) noise before the temperature-scaled softmax;
    `deterministic` omits the noise (evaluation path). Differentiable in both.
    """
    if temperature <= 0:
        raise RejectedInputError(f"Gumbel-softmax temperature must be > 0, got {temperature}")
    logits = constant(logits)
    if not np.all(np.isfinite(logits.data)):
        raise RejectedInputError("Gumbel-softmax logits must be finite")
    if mode == "sampled":
        if rng is None:
            rng = np.random.default_rng(seed)
        u = rng.random(logits.shape)
        noise = -np.log(-np.log(u + 1e-20) + 1e-20)
        logits = add(logits, noise)
    elif mode != "deterministic":
        raise RejectedInputError(f"Unknown Gumbel-softmax mode {mode!r}")
    return softmax(mul(logits, 1.0 / temperature), axis=-1)


GRU_PARAM_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def gru_cell(x: ArrayLike, h: ArrayLike, params: Mapping[str, Tensor]) -> Tensor:
    """
    Standard update/reset-gate GRU cell in row-vector form

        z = sigma(x W_z + h U_z + b_z)
        r = sigma(x W_r + h U_r + b_r)
        h~ = tanh(x W_h + (r * h) U_h + b_h)
        h' = (1 - z) * h + z * h~
    """
    x, h = constant(x), constant(h)
    hidden = params["U_z"].shape[0]
    if x.shape[-1] != params["W_z"].shape[0] or h.shape[-1] != hidden:
        raise RejectedInputError(
            f"GRU dimension mismatch: input {x.shape}, hidden {h.shape}, W_z {params['W_z'].shape}"
        )
    z = sigmoid(matmul(x, params["W_z"]) + matmul(h, params["U_z"]) + params["b_z"])
    r = sigmoid(matmul(x, params["W_r"]) + matmul(h, params["U_r"]) + params["b_r"])
    candidate = tanh(matmul(x, params["W_h"]) + matmul(r * h, params["U_h"]) + params["b_h"])
    return (1.0 - z) * h + z * candidate


def fsm_step(q: Tensor, alpha: Tensor, activated: Tensor) -> Tensor:
    """One soft-FSM update given already-nonnegative transitions (K, Q, Q)"""
    mixed = einsum("bk,kij->bij", alpha, activated)
    unnormalised = einsum("bi,bij->bj", q, mixed)
    norm = tsum(unnormalised, axis=-1, keepdims=True)
    if np.min(norm.data) < FSM_NORM_EPS:
        raise NumericalDegeneracyError(
            f"Soft-FSM state mass {np.min(norm.data):.3e} fell below {FSM_NORM_EPS}"
        )
    return div(unnormalised, norm)


def fsm_update(q: ArrayLike, alpha: ArrayLike, transitions: Tensor) -> Tensor:
    """
    q' = q (sum_k alpha_k softplus(T_k)) / ||.||_1

    Accepts a single distribution (Q,) / symbol vector (K,) or batches (B, Q) / (B, K).
    """
    q, alpha = constant(q), constant(alpha)
    single = q.data.ndim == 1
    if single:
        q = reshape(q, (1, -1))
        alpha = reshape(alpha, (1, -1))
    K, Q, Q2 = transitions.shape
    if Q != Q2 or q.shape[-1] != Q or alpha.shape[-1] != K:
        raise RejectedInputError(
            f"FSM dimension mismatch: q {q.shape}, alpha {alpha.shape}, T {transitions.shape}"
        )
    out = fsm_step(q, alpha, softplus(transitions))
    return reshape(out, (Q,)) if single else out


def bce_prefix_loss(scores: ArrayLike, labels: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    -(1/T) sum_t [p_t ln s_t + (1 - p_t) ln(1 - s_t)], averaged over trajectories

    1-d inputs are one trajectory; (B, L) inputs are a padded batch where `mask`
    marks real steps (each row is normalised by its own length).
    """
    scores = constant(scores)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise RejectedInputError(f"bce_prefix_loss length mismatch: {scores.shape} vs {labels.shape}")
    if scores.data.ndim == 1:
        scores = reshape(scores, (1, -1))
        labels = labels.reshape(1, -1)
        mask = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(1, -1)
    if mask is None:
        mask = np.ones_like(labels)
    mask = np.asarray(mask, dtype=np.float64)
    lengths = mask.sum(axis=1, keepdims=True)
    if np.any(lengths == 0):
        raise RejectedInputError("bce_prefix_loss got a trajectory with no scored steps")

    s = clip(scores, BCE_EPS, 1.0 - BCE_EPS)
    per_step = labels * log(s) + (1.0 - labels) * log(1.0 - s)
    weights = mask / lengths / labels.shape[0]
    return -tsum(per_step * weights)


def _entropy(p: Tensor, axis: int = -1) -> Tensor:
    return -tsum(p * log(clip(p, _LOG_FLOOR, None)), axis=axis)


def balance_loss(alpha: ArrayLike, beta: float, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    E_t[H(alpha_t)] - beta * H(E_t[alpha_t]) with natural-log Shannon entropy

    `alpha` is (T, K) or a padded (B, L, K) batch with `mask` (B, L); the
    expectation runs over all unmasked steps.
    """
    alpha = constant(alpha)
    K = alpha.shape[-1]
    flat = reshape(alpha, (-1, K))
    if mask is None:
        weights = np.full((flat.shape[0],), 1.0 / flat.shape[0])
    else:
        m = np.asarray(mask, dtype=np.float64).reshape(-1)
        if m.sum() == 0:
            raise RejectedInputError("balance_loss got no unmasked steps")
        weights = m / m.sum()
    per_step = _entropy(flat, axis=-1)
    expected_entropy = tsum(per_step * weights)
    marginal = tsum(flat * weights[:, None], axis=0)
    return expected_entropy - beta * _entropy(marginal, axis=-1)


# ----------------------------------------------------------------------------
# Optimisation
# ----------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> Dict[str, np.ndarray]:
    """
    One AdamW update with decoupled weight decay and bias-corrected moments

    Returns new parameter arrays; `state` is advanced in place.
    """
    for name in sorted(params):
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise RejectedInputError(f"Gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalDegeneracyError(f"Non-finite gradient for parameter {name}")

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    updated = {}
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        m = state.first_moment.get(name, np.zeros_like(p))
        v = state.second_moment.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        decayed = p * (1.0 - state.lr * state.weight_decay)
        updated[name] = decayed - state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return updated


class AdamW:
    """Applies adamw_step to named parameter tensors in place"""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, weight_decay: float = 1e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        values = {name: p.data for name, p in self.params.items()}
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        for name, value in adamw_step(values, grads, self.state).items():
            self.params[name].data = value


# ----------------------------------------------------------------------------
# Verification
# ----------------------------------------------------------------------------

def grad_check(
    fn: Callable[..., Tensor],
    point: Union[np.ndarray, Mapping[str, np.ndarray]],
    epsilon: float = 1e-6,
) -> float:
    """
    Max relative error between reverse-mode and central-difference gradients

    `fn` maps parameter tensors (one array, or keyword tensors for a dict
    point) to a scalar Tensor. Relative error per coordinate is
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    named = dict(point) if isinstance(point, Mapping) else {"x": point}
    base = {k: np.array(v, dtype=np.float64) for k, v in named.items()}

    def evaluate(values: Mapping[str, np.ndarray], with_grad: bool):
        tensors = {k: Tensor(v.copy(), requires_grad=with_grad, name=k) for k, v in values.items()}
        out = fn(**tensors) if isinstance(point, Mapping) else fn(tensors["x"])
        if out.data.size != 1:
            raise RejectedInputError("grad_check needs a scalar-valued function")
        return out, tensors

    out, tensors = evaluate(base, True)
    out.backward()

    worst = 0.0
    for name, value in base.items():
        analytic = tensors[name].grad
        if analytic is None:
            analytic = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[name].reshape(-1)[i] += epsilon
            minus[name].reshape(-1)[i] -= epsilon
            f_plus = evaluate(plus, False)[0].item()
            f_minus = evaluate(minus, False)[0].item()
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            ad = analytic.reshape(-1)[i]
            err = abs(ad - numeric) / max(1e-8, abs(ad) + abs(numeric))
            worst = max(worst, err)
    logging.debug("[Diffcore] grad_check | max_rel_error=%.3e", worst)
    return worst


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)
