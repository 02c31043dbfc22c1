import math

import numpy as np
import pytest
from scipy.integrate import quad

from common.errors import RejectedInputError
from common.metrics import average_precision
from app_observability.ceiling import (
    ceiling,
    ceiling_grid,
    naive_bound,
    prec_max,
    required_pi,
    sample_tight_instance,
    sample_tight_scores,
)
from app_observability.mpe import (
    explicit_evidence_anchor,
    explicit_evidence_rates,
    mpe_bootstrap,
    mpe_estimate,
)

RATES = (0.07, 0.089, 0.092, 0.363)


def test_ceiling_closed_form_value():
    assert ceiling(0.5, 0.5) == pytest.approx(2 / 3 + math.log(4) / 9, abs=1e-9)


@pytest.mark.parametrize("r", RATES)
def test_ceiling_endpoints_and_continuity(r):
    assert ceiling(0.0, r) == r
    assert ceiling(1.0, r) == 1.0
    assert ceiling(1e-9, r) == pytest.approx(r, abs=1e-6)
    assert ceiling(1 - 1e-9, r) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("r", RATES)
def test_ceiling_is_increasing_and_above_naive_bound(r):
    pis = np.linspace(0.0, 1.0, 101)
    values = [ceiling(p, r) for p in pis]
    assert all(b > a for a, b in zip(values, values[1:]))
    for p in pis[1:-1]:
        assert naive_bound(p, r) < ceiling(p, r)


@pytest.mark.parametrize("pi, r", [(0.3, 0.1), (0.5, 0.5), (0.8, 0.363), (0.05, 0.07)])
def test_ceiling_is_the_area_under_the_precision_envelope(pi, r):
    area, _ = quad(prec_max, 0.0, 1.0, args=(pi, r), points=[pi], epsabs=1e-12, epsrel=1e-12)
    assert area == pytest.approx(ceiling(pi, r), abs=1e-6)


@pytest.mark.parametrize("auprc, r, expected", [
    (0.900, 0.363, 0.776),
    (0.696, 0.089, 0.621),
    (0.533, 0.092, 0.430),
    (0.557, 0.070, 0.478),
])
def test_required_pi_reference_values(auprc, r, expected):
    pi = required_pi(auprc, r)
    assert pi == pytest.approx(expected, abs=1e-3)
    assert ceiling(pi, r) == pytest.approx(auprc, abs=1e-6)


def test_required_pi_edges_and_rejections():
    assert required_pi(0.3, 0.3) == 0.0
    assert required_pi(1.0, 0.3) == 1.0
    with pytest.raises(RejectedInputError):
        required_pi(0.05, 0.363)
    with pytest.raises(RejectedInputError):
        required_pi(1.2, 0.363)
    with pytest.raises(RejectedInputError):
        ceiling(0.5, 0.0)
    with pytest.raises(RejectedInputError):
        ceiling(1.2, 0.5)


def test_ceiling_grid_rows():
    rows = ceiling_grid([0.0, 0.5, 1.0], [0.1, 0.3])
    assert len(rows) == 6
    assert rows[0] == {"pi": 0.0, "r": 0.1, "ceiling": 0.1, "naive": 0.1}
    assert rows[-1]["ceiling"] == 1.0


def test_tight_instance_layout():
    labels, scores = sample_tight_scores(0.5, 0.3, 2000, seed=1)
    assert set(np.unique(labels)) == {0, 1}
    assert np.all((scores[labels == 0] >= 0.0) & (scores[labels == 0] < 1.0))
    observable = scores >= 1.0
    assert np.all(labels[observable] == 1)
    assert np.all(scores < 2.0)
    assert 0.3 < observable.sum() / labels.sum() < 0.7
    instance = sample_tight_instance(0.5, 0.3, 50, seed=1)
    assert len(instance) == 50
    with pytest.raises(RejectedInputError):
        sample_tight_scores(0.5, 0.3, 0, seed=1)


@pytest.mark.slow
@pytest.mark.parametrize("pi, r", [(0.3, 0.1), (0.5, 0.5), (0.8, 0.363)])
def test_tight_instance_attains_the_ceiling(pi, r):
    labels, scores = sample_tight_scores(pi, r, 200_000, seed=0)
    assert average_precision(labels, scores) == pytest.approx(ceiling(pi, r), abs=0.01)


def test_mpe_identical_distributions_give_near_zero():
    rng = np.random.default_rng(0)
    result = mpe_estimate(rng.normal(size=100_000), rng.normal(size=100_000))
    assert 0.0 <= result.pi_hat <= 0.05
    assert result.n_positive == result.n_negative == 100_000


def _planted(rng, n, pi, shift=4.0):
    observable = rng.random(n) < pi
    positives = np.where(observable, rng.normal(shift, 1.0, n), rng.normal(0.0, 1.0, n))
    return positives, rng.normal(0.0, 1.0, n)


def test_mpe_recovers_planted_fraction():
    positives, negatives = _planted(np.random.default_rng(1), 100_000, 0.5)
    assert mpe_estimate(positives, negatives).pi_hat == pytest.approx(0.5, abs=0.05)


def test_mpe_bootstrap_interval():
    positives, negatives = _planted(np.random.default_rng(2), 20_000, 0.5)
    result = mpe_bootstrap(positives, negatives, replicates=200, seed=11)
    assert result.replicates == 200 and result.seed == 11
    assert 0.4 <= result.ci_lower <= result.ci_upper <= 0.6
    again = mpe_bootstrap(positives, negatives, replicates=200, seed=11)
    assert (again.ci_lower, again.ci_upper) == (result.ci_lower, result.ci_upper)


@pytest.mark.slow
def test_mpe_bootstrap_interval_coverage():
    trials, covered = 50, 0
    for trial in range(trials):
        positives, negatives = _planted(np.random.default_rng(1000 + trial), 5000, 0.5, shift=2.0)
        result = mpe_bootstrap(positives, negatives, replicates=200, seed=trial)
        covered += result.ci_lower <= 0.5 <= result.ci_upper
    assert covered >= 0.8 * trials


def test_mpe_rejects_bad_inputs():
    with pytest.raises(RejectedInputError):
        mpe_estimate([], [0.1])
    with pytest.raises(RejectedInputError):
        mpe_estimate([np.nan], [0.1])
    with pytest.raises(RejectedInputError):
        mpe_estimate([0.1], [0.2], trim=0.0)
    with pytest.raises(RejectedInputError):
        mpe_bootstrap([0.1], [0.2], replicates=0)


def test_explicit_evidence_anchor():
    anchor = explicit_evidence_anchor(0.740, 0.490)
    assert anchor.pi_e == pytest.approx(0.490, abs=2e-3)
    assert not anchor.degenerate
    assert explicit_evidence_anchor(0.2, 0.4).pi_e == 0.0
    flat = explicit_evidence_anchor(1.0, 1.0)
    assert flat.degenerate and flat.pi_e == 0.0
    with pytest.raises(RejectedInputError):
        explicit_evidence_anchor(1.5, 0.2)


def test_explicit_evidence_rates():
    positives = ["error Timeout while loading", "ok clicked", "ok Permission denied"]
    negatives = ["ok page rendered", "ok results listed"]
    q_plus, q_minus = explicit_evidence_rates(positives, negatives)
    assert q_plus == pytest.approx(2 / 3)
    assert q_minus == 0.0
    with pytest.raises(RejectedInputError):
        explicit_evidence_rates([], negatives)
