import numpy as np
import pytest

from common.config import config_from_dict
from common.errors import ConfigError, RejectedInputError
from common.file_parser import load_corpus, load_splits, save_corpus, save_splits
from common.trace_model import (
    RawTrajectory,
    SplitSpec,
    SynthConfig,
    generate_synthetic_corpus,
    label_prefixes,
    make_splits,
    positive_prefix_rate,
    scramble_prefix,
    warning_labels,
)


def _trajectory(length, outcome, tid="t0"):
    return RawTrajectory(tid, "task", outcome, tuple({"step_index": i} for i in range(1, length + 1)))


def test_labeling_exhaustive():
    for T in range(1, 21):
        for H in range(1, 6):
            for y in (0, 1):
                labels = label_prefixes(_trajectory(T, y), H).labels
                assert len(labels) == T
                assert sum(labels) == (1 - y) * min(H + 1, T)
                positions = {t for t, p in enumerate(labels, start=1) if p}
                expected = set(range(max(1, T - H), T + 1)) if y == 0 else set()
                assert positions == expected


def test_labeling_rejects_bad_horizon_and_empty():
    with pytest.raises(RejectedInputError):
        label_prefixes(_trajectory(5, 0), 0)
    with pytest.raises(RejectedInputError):
        warning_labels(0, 0, 3)


def test_outcome_must_be_binary():
    with pytest.raises(RejectedInputError):
        _trajectory(3, 2)


def test_positive_prefix_rate():
    sets = [label_prefixes(_trajectory(10, 0, "a"), 3), label_prefixes(_trajectory(10, 1, "b"), 3)]
    assert positive_prefix_rate(sets) == pytest.approx(4 / 20)
    with pytest.raises(RejectedInputError):
        positive_prefix_rate([])


def test_make_splits_disjoint_and_deterministic(raw_corpus):
    a = make_splits(raw_corpus, seed=11)
    b = make_splits(raw_corpus, seed=11)
    assert a == b
    roles = [a.train_ids, a.calibration_ids, a.validation_ids, a.test_ids]
    assert sum(len(r) for r in roles) == len(raw_corpus)
    assert len(a.test_ids) == round(0.1 * len(raw_corpus))
    for role in roles:
        assert any(a.role_of(i) for i in role)


def test_make_splits_rejects_bad_ratios(raw_corpus):
    with pytest.raises(RejectedInputError):
        make_splits(raw_corpus, train=0.7, validation=0.1, test=0.1)
    with pytest.raises(RejectedInputError):
        make_splits(raw_corpus[:5])


def test_split_spec_rejects_overlap():
    with pytest.raises(RejectedInputError):
        SplitSpec(frozenset({"a"}), frozenset({"a"}), frozenset(), frozenset(), 0)


def test_synthetic_corpus_plants_precursors_only_in_failures():
    config = SynthConfig(trajectory_count=300, seed=5)
    corpus = generate_synthetic_corpus(config)
    assert corpus == generate_synthetic_corpus(config)
    tokens = config.precursor_tokens
    for traj in corpus:
        assert config.min_length <= traj.length <= config.max_length
        for t, step in enumerate(traj.steps, start=1):
            planted = any(tok in step["result"] for tok in tokens)
            if traj.outcome == 1 or t <= traj.length - config.injection_window:
                assert not planted
                assert step["status"] == "ok"
            else:
                assert planted == (step["status"] == "error")
    failures = sum(1 for t in corpus if t.failed)
    assert 0.2 < failures / len(corpus) < 0.4


def test_synthetic_labels_carry_no_position_signal():
    config = SynthConfig(trajectory_count=4000, seed=11)
    corpus = generate_synthetic_corpus(config)
    lengths = np.array([t.length for t in corpus])
    assert lengths.mean() == pytest.approx(config.mean_length, abs=0.5)

    labels = [warning_labels(t.length, t.outcome, 3) for t in corpus]
    late = [p for ls in labels for p in ls[config.min_length - 1:]]
    reference = float(np.mean(late))
    for t in range(config.min_length, 17):
        at_t = [ls[t - 1] for ls in labels if len(ls) >= t]
        assert np.mean(at_t) == pytest.approx(reference, abs=0.04)


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(failure_rate=1.0).validate()
    with pytest.raises(ConfigError):
        SynthConfig(mean_length=3.0).validate()
    with pytest.raises(ConfigError):
        config_from_dict(SynthConfig, {"trajectory_count": 10, "bogus": 1})
    with pytest.raises(ConfigError):
        SynthConfig(noise_tokens=("timeout_error",)).validate()


def test_scramble_prefix_uses_only_visible_steps():
    traj = _trajectory(8, 0)
    scrambled = scramble_prefix(traj, 5, seed=3)
    assert scrambled.length == 5
    assert sorted(s["step_index"] for s in scrambled.steps) == [1, 2, 3, 4, 5]
    assert scrambled == scramble_prefix(traj, 5, seed=3)
    with pytest.raises(RejectedInputError):
        scramble_prefix(traj, 9, seed=3)


def test_corpus_and_split_files_reload(tmp_path, raw_corpus, splits):
    corpus_path = str(tmp_path / "corpus.jsonl")
    split_path = str(tmp_path / "splits.json")
    save_corpus(corpus_path, raw_corpus)
    save_splits(split_path, splits)
    assert load_corpus(corpus_path) == raw_corpus
    assert load_splits(split_path) == splits


def test_load_corpus_reports_malformed_lines(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"trajectory_id": "a", "outcome": 1, "steps": []}\nnot json\n', encoding="utf-8")
    with pytest.raises(RejectedInputError, match="2 malformed"):
        load_corpus(str(path))
