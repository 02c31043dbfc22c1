import numpy as np
import pytest
import scipy.sparse as sp

from common import diffcore as dc
from common.errors import NumericalDegeneracyError, RejectedInputError
from app_monitor.model import MonitorConfig, init_parameters
from app_monitor.training import PreparedTrajectory, monitor_loss

TOL = 1e-5

W = np.random.default_rng(99).normal(size=(3, 4))
SPARSE = sp.csr_matrix(np.random.default_rng(98).random((5, 3)))

UNARY_OPS = {
    "add": lambda x: dc.tsum(dc.add(x, W) * W),
    "sub": lambda x: dc.tsum(dc.sub(W, x) * x),
    "mul": lambda x: dc.tsum(x * x * W),
    "div": lambda x: dc.tsum(dc.div(W, dc.exp(x))),
    "matmul": lambda x: dc.tsum(dc.matmul(x, W.T) * 0.5),
    "sparse_matmul": lambda x: dc.tsum(dc.tanh(dc.sparse_matmul(SPARSE, x))),
    "einsum": lambda x: dc.tsum(dc.einsum("ij,kj->ik", x, W)),
    "exp": lambda x: dc.tsum(dc.exp(x * 0.3)),
    "log": lambda x: dc.tsum(dc.log(dc.softplus(x))),
    "tanh": lambda x: dc.tsum(dc.tanh(x) * W),
    "sigmoid": lambda x: dc.tsum(dc.sigmoid(x) * W),
    "gelu": lambda x: dc.tsum(dc.gelu(x) * W),
    "clip": lambda x: dc.tsum(dc.clip(x, -5.0, 5.0) * W),
    "softmax": lambda x: dc.tsum(dc.softmax(x, axis=-1) * W),
    "softmax_axis0": lambda x: dc.tsum(dc.softmax(x, axis=0) * W),
    "tsum_axis": lambda x: dc.tsum(dc.tsum(x, axis=1) * dc.tsum(x, axis=1)),
    "mean": lambda x: dc.tsum(dc.mean(x * x, axis=0, keepdims=True) * W[:1]),
    "reshape": lambda x: dc.tsum(dc.reshape(x, (4, 3)) * W.T),
    "take": lambda x: dc.tsum(dc.take(x, (np.array([0, 2, 2]), slice(None))) * W),
    "stack": lambda x: dc.tsum(dc.stack([x, x * 2.0], axis=0) * np.stack([W, W])),
    "concat": lambda x: dc.tsum(dc.concat([x, dc.tanh(x)], axis=1) * np.concatenate([W, W], axis=1)),
    "gumbel_deterministic": lambda x: dc.tsum(dc.gumbel_softmax(x, 0.5) * W),
    "bce": lambda x: dc.bce_prefix_loss(dc.sigmoid(x), (W > 0).astype(float)),
    "balance": lambda x: dc.balance_loss(dc.softmax(x), beta=1.0),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_op_gradients(name):
    point = np.random.default_rng(len(name)).normal(size=(3, 4))
    assert dc.grad_check(UNARY_OPS[name], point) < TOL


def test_sampled_gumbel_gradient_with_fixed_noise():
    def fn(x):
        return dc.tsum(dc.gumbel_softmax(x, 0.7, mode="sampled", seed=5) * W)

    assert dc.grad_check(fn, np.random.default_rng(0).normal(size=(3, 4))) < TOL


def test_gru_cell_and_fsm_gradients():
    rng = np.random.default_rng(3)
    Q, K = 3, 4
    point = {name: rng.normal(size=(Q,) if name.startswith("b_") else (Q, Q)) * 0.5 for name in dc.GRU_PARAM_NAMES}
    x = rng.normal(size=(2, Q))
    h = rng.normal(size=(2, Q))
    assert dc.grad_check(lambda **p: dc.tsum(dc.gru_cell(x, h, p) * x), point) < TOL

    q = rng.dirichlet(np.ones(Q), size=2)
    alpha = rng.dirichlet(np.ones(K), size=2)
    target = rng.normal(size=(2, Q))
    assert dc.grad_check(lambda T: dc.tsum(dc.fsm_update(q, alpha, T) * target), rng.normal(size=(K, Q, Q))) < TOL


def test_fsm_update_is_a_distribution():
    rng = np.random.default_rng(4)
    q = rng.dirichlet(np.ones(5))
    alpha = rng.dirichlet(np.ones(3))
    out = dc.fsm_update(q, alpha, dc.constant(rng.normal(size=(3, 5, 5)))).data
    assert out.shape == (5,)
    assert out.sum() == pytest.approx(1.0)
    assert np.all(out >= 0)


def test_fsm_degenerate_mass_raises():
    q = dc.constant(np.zeros((1, 2)))
    alpha = dc.constant(np.array([[1.0]]))
    with pytest.raises(NumericalDegeneracyError):
        dc.fsm_step(q, alpha, dc.constant(np.ones((1, 2, 2))))


def test_bce_prefix_loss_matches_manual_mean():
    s = np.array([0.9, 0.2, 0.6])
    p = np.array([1.0, 0.0, 1.0])
    expected = -np.mean(p * np.log(s) + (1 - p) * np.log(1 - s))
    assert dc.bce_prefix_loss(s, p).item() == pytest.approx(expected)


def test_bce_masked_batch_normalises_per_trajectory():
    scores = np.array([[0.9, 0.2], [0.6, 0.5]])
    labels = np.array([[1.0, 0.0], [1.0, 0.0]])
    mask = np.array([[1.0, 1.0], [1.0, 0.0]])
    first = -np.mean([np.log(0.9), np.log(0.8)])
    second = -np.log(0.6)
    assert dc.bce_prefix_loss(scores, labels, mask).item() == pytest.approx((first + second) / 2)
    with pytest.raises(RejectedInputError):
        dc.bce_prefix_loss(scores, labels, np.zeros((2, 2)))


def test_balance_loss_extremes():
    K = 4
    one_hot_spread = np.eye(K)
    assert dc.balance_loss(one_hot_spread, beta=1.0).item() == pytest.approx(-np.log(K))
    uniform = np.full((3, K), 1.0 / K)
    assert dc.balance_loss(uniform, beta=1.0).item() == pytest.approx(0.0, abs=1e-12)
    collapsed = np.tile(np.eye(K)[0], (3, 1))
    assert dc.balance_loss(collapsed, beta=1.0).item() == pytest.approx(0.0, abs=1e-12)


def test_adamw_step_matches_reference():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.1])}
    state = dc.OptimizerState(lr=0.1, weight_decay=0.01)
    out = dc.adamw_step(p, g, state)["w"]
    m_hat = g["w"]
    v_hat = g["w"] ** 2
    expected = p["w"] * (1 - 0.1 * 0.01) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert np.allclose(out, expected)
    assert state.step == 1
    with pytest.raises(NumericalDegeneracyError):
        dc.adamw_step(p, {"w": np.array([np.nan, 0.0])}, state)


def test_gumbel_softmax_rejects_bad_inputs():
    with pytest.raises(RejectedInputError):
        dc.gumbel_softmax(np.zeros(3), 0.0)
    with pytest.raises(RejectedInputError):
        dc.gumbel_softmax(np.array([np.inf, 0.0]), 1.0)
    out = dc.gumbel_softmax(np.array([[1.0, 2.0, 3.0]]), 0.5).data
    assert out.sum() == pytest.approx(1.0)


def _batch(rng, input_dim):
    batch = []
    for i, (T, outcome) in enumerate(((4, 0), (3, 1), (5, 0))):
        labels = np.array([float(outcome == 0 and t >= T - 2) for t in range(1, T + 1)])
        batch.append(PreparedTrajectory(f"t{i}", sp.csr_matrix(rng.random((T, input_dim))), labels))
    return batch


@pytest.mark.parametrize("backend", ["gru", "fsm"])
@pytest.mark.parametrize("seed", range(20))
def test_monitor_loss_gradient(backend, seed):
    rng = np.random.default_rng(seed)
    input_dim = 5
    config = MonitorConfig(alphabet_size=3, hidden_width=3, backend=backend, horizon=2, seed=seed)
    point = init_parameters(rng, input_dim, config)
    batch = _batch(rng, input_dim)

    def loss(**params):
        return monitor_loss(params, batch, config)[0]

    assert dc.grad_check(loss, point, epsilon=1e-5) < TOL
