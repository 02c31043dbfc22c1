import logging

import numpy as np
import pytest

from common.trace_model import SynthConfig, generate_synthetic_corpus, make_splits, select
from app_encoder.vectorizer import EncoderConfig, encode_corpus, fit_vectorizer
from app_monitor.model import MonitorConfig
from app_monitor.training import train_monitor
from app_stepview.adapter import convert_corpus, default_synthetic_spec

SMALL_SYNTH = SynthConfig(trajectory_count=160, seed=7)
TINY_MONITOR = MonitorConfig(alphabet_size=4, hidden_width=16, epochs=3, batch_size=32, seed=0)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def raw_corpus():
    return generate_synthetic_corpus(SMALL_SYNTH)


@pytest.fixture(scope="session")
def stepview_corpus(raw_corpus):
    return convert_corpus(default_synthetic_spec(), raw_corpus)


@pytest.fixture(scope="session")
def splits(raw_corpus):
    return make_splits(raw_corpus, seed=3)


@pytest.fixture(scope="session")
def split_views(stepview_corpus, splits):
    return {role: select(stepview_corpus, splits.ids(role)) for role in ("train", "calibration", "validation", "test")}


@pytest.fixture(scope="session")
def vectorizer(split_views):
    return fit_vectorizer([x for t in split_views["train"] for x in t.texts()], EncoderConfig())


@pytest.fixture(scope="session")
def encoded(split_views, vectorizer):
    return {role: encode_corpus(vectorizer, items) for role, items in split_views.items()}


@pytest.fixture(scope="session")
def trained(encoded):
    """(model, report) of a tiny GRU monitor on the small synthetic corpus"""
    return train_monitor(encoded["train"], encoded["calibration"], encoded["validation"], TINY_MONITOR)
