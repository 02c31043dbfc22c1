import math

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.optimize import check_grad
from sklearn.linear_model import LogisticRegression

from common.errors import ConfigError, RejectedInputError, UndefinedMetricError
from common.trace_model import RawTrajectory, SynthConfig, generate_synthetic_corpus, make_splits, scramble_prefix, select
from app_probes.audit_set import (
    PREFIX_CHARS,
    STEP_CHARS,
    build_mpe_audit_set,
    prefix_audit_texts,
    step_audit_text,
)
from app_probes.controls import (
    ControlConfig,
    position_features,
    pooled_steps,
    prefix_labels,
    prefix_texts,
    run_control,
    scramble_stepview,
)
from app_probes.logistic import class_weights, fit_logistic, logistic_objective
from app_stepview.adapter import StepViewRecord, StepViewTrajectory, convert_corpus, default_synthetic_spec

from .conftest import TINY_MONITOR


def trajectory(tid, outcome, length, result="page rendered"):
    records = tuple(
        StepViewRecord(action_text=f"step {i}", result_text=result, status="ok") for i in range(1, length + 1)
    )
    return StepViewTrajectory(tid, "task-1", outcome, records)


def fitting_roles(split_views):
    return {role: split_views[role] for role in ("train", "calibration", "validation")}


def test_position_features():
    assert np.allclose(position_features(4), [4.0, 16.0, math.log(5.0), 2.0])
    with pytest.raises(RejectedInputError):
        position_features(0)


def test_audit_text_truncation():
    record = StepViewRecord(action_text="go", result_text="x" * 2000, status="ok")
    assert len(step_audit_text(record)) == STEP_CHARS
    assert step_audit_text(StepViewRecord(action_text="go", result_text="done", status="ok")) == "ok go done"

    long = StepViewTrajectory("t", "task", 1, tuple(record for _ in range(6)))
    texts = prefix_audit_texts(long)
    assert len(texts) == 6
    assert len(texts[0]) == STEP_CHARS
    assert len(texts[-1]) == PREFIX_CHARS
    assert texts[-1].endswith(step_audit_text(record))


def test_mpe_audit_set_protocols():
    trajs = [trajectory("f", 0, 5), trajectory("s", 1, 4)]
    every = build_mpe_audit_set(trajs, "all_prefix", horizon=1)
    assert every.positive_ids == (("f", 4), ("f", 5))
    assert len(every.negative_texts) == 7
    assert every.positive_rate == pytest.approx(2 / 9)

    matched = build_mpe_audit_set(trajs, "matched_nonterminal", horizon=1)
    assert matched.positive_ids == (("f", 4),)
    assert matched.negative_ids == (("s", 3),)
    assert matched.summary()["positives"] == 1

    with pytest.raises(RejectedInputError):
        build_mpe_audit_set([trajectory("s", 1, 4)], "all_prefix")
    with pytest.raises(RejectedInputError):
        build_mpe_audit_set(trajs, "terminal_only")


def test_class_weights():
    labels = np.array([1, 0, 0, 0])
    assert np.allclose(class_weights(labels, True), [2.0, 2 / 3, 2 / 3, 2 / 3])
    assert np.allclose(class_weights(labels, False), 1.0)


def test_logistic_matches_sklearn(rng):
    X = rng.normal(size=(300, 6))
    y = (X @ rng.normal(size=6) + 0.5 * rng.normal(size=300) > 0.8).astype(int)
    ours = fit_logistic(X, y, C=0.5)
    reference = LogisticRegression(
        C=0.5, class_weight="balanced", solver="lbfgs", tol=1e-10, max_iter=10000,
    ).fit(X, y)
    assert ours.converged
    assert np.allclose(ours.decision_function(X), reference.decision_function(X), atol=1e-4)

    sparse = fit_logistic(sp.csr_matrix(X), y, C=0.5)
    assert np.allclose(sparse.weights, ours.weights, atol=1e-6)


def test_logistic_objective_gradient(rng):
    X = rng.normal(size=(40, 5))
    y = (rng.random(40) < 0.3).astype(float)
    y[:2] = (1.0, 0.0)
    w = class_weights(y, True)
    theta = rng.normal(size=6)

    def value(th):
        return logistic_objective(th, X, y, w, 0.5)[0]

    def grad(th):
        return logistic_objective(th, X, y, w, 0.5)[1]

    assert check_grad(value, grad, theta) / np.linalg.norm(grad(theta)) < 1e-5


def test_logistic_needs_both_classes():
    with pytest.raises(UndefinedMetricError):
        fit_logistic(np.eye(3), [1, 1, 1])
    with pytest.raises(RejectedInputError):
        fit_logistic(np.eye(3), [1, 0])


def test_pooled_steps_are_running_means():
    features = sp.csr_matrix(np.array([[1.0, 0.0], [3.0, 2.0], [2.0, 1.0]]))
    pooled = pooled_steps(features).toarray()
    assert np.allclose(pooled, [[1.0, 0.0], [2.0, 1.0], [2.0, 1.0]])


def test_scramble_stepview_matches_raw_scramble():
    raw = RawTrajectory("traj-9", "task", 0, tuple({"i": i} for i in range(7)))
    view = StepViewTrajectory(
        "traj-9", "task", 0, tuple(StepViewRecord(action_text=str(i)) for i in range(7)),
    )
    for t in (1, 4, 7):
        expected = [step["i"] for step in scramble_prefix(raw, t, seed=5).steps]
        got = [int(r.action_text) for r in scramble_stepview(view, t, seed=5).records]
        assert got == expected
    with pytest.raises(RejectedInputError):
        scramble_stepview(view, 8, seed=5)


def test_prefix_labels_and_texts():
    trajs = [trajectory("f", 0, 4), trajectory("s", 1, 2)]
    assert prefix_labels(trajs, 1).tolist() == [0, 0, 1, 1, 0, 0]
    texts = prefix_texts(trajs[0])
    assert len(texts) == 4
    assert texts[1] == " \n ".join(trajs[0].texts()[:2])


def test_control_config_and_dispatch_validation(split_views):
    with pytest.raises(ConfigError):
        ControlConfig.from_dict({"dropout": 0.1})
    assert ControlConfig.from_dict({"C": 1.0}).C == 1.0
    with pytest.raises(RejectedInputError):
        run_control("oracle_everything", fitting_roles(split_views), split_views["test"])


def test_position_control_reports_ranking(split_views):
    row = run_control("t_only", fitting_roles(split_views), split_views["test"])
    assert row["kind"] == "t_only"
    assert row["n"] == sum(t.length for t in split_views["test"])
    assert 0.0 <= row["auprc"] <= 1.0 and 0.0 <= row["auroc"] <= 1.0
    oracle = run_control("t_plus_T_oracle", fitting_roles(split_views), split_views["test"])
    assert oracle["auroc"] > row["auroc"]


def test_task_prior_control(split_views):
    row = run_control("task_prior", fitting_roles(split_views), split_views["test"],
                      ControlConfig(metadata_whitelist=("domain",)))
    assert row["positive_rate"] == pytest.approx(prefix_labels(split_views["test"], 3).mean())


def test_tfidf_probe_finds_lexical_precursors(split_views):
    row = run_control("tfidf_lr", fitting_roles(split_views), split_views["test"])
    assert row["auprc"] > row["positive_rate"] + 0.2


def test_pooled_mlp_control(split_views):
    config = ControlConfig(mlp_hidden=8, mlp_epochs=2, mlp_batch_size=128)
    row = run_control("pooled_mlp", fitting_roles(split_views), split_views["test"], config)
    assert row["kind"] == "pooled_mlp"
    assert 0.0 <= row["auprc"] <= 1.0


@pytest.mark.slow
def test_scrambled_control_reports_gap(split_views):
    row = run_control("scrambled", fitting_roles(split_views), split_views["test"], monitor=TINY_MONITOR)
    assert row["auprc_gap"] == pytest.approx(row["auprc_original"] - row["auprc"])
    assert row["n"] == sum(t.length for t in split_views["test"])


@pytest.mark.slow
def test_position_only_control_lands_on_base_rate():
    corpus = generate_synthetic_corpus(SynthConfig(seed=0))
    views = convert_corpus(default_synthetic_spec(), corpus)
    splits = make_splits(corpus, seed=0)
    fitting = {role: select(views, splits.ids(role)) for role in ("train", "calibration", "validation")}
    row = run_control("t_only", fitting, select(views, splits.test_ids))
    assert row["auprc"] == pytest.approx(row["positive_rate"], abs=0.05)
