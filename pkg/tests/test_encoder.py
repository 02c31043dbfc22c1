import math

import numpy as np
import pytest
from scipy.sparse.linalg import norm as sparse_norm

from common.errors import ConfigError, RejectedInputError
from app_encoder.vectorizer import (
    EncoderConfig,
    PROBE_CONFIG,
    encode_texts,
    encode_trajectory,
    fit_vectorizer,
    load_vectorizer,
    save_vectorizer,
)


def test_unigrams_and_bigrams_with_two_character_tokens():
    model = fit_vectorizer(["ab cd"])
    assert set(model.vocabulary) == {"ab", "cd", "ab cd"}
    assert model.n_documents == 1


def test_idf_formula_and_sorted_vocabulary():
    texts = ["alpha beta", "alpha gamma", "alpha beta delta"]
    model = fit_vectorizer(texts, EncoderConfig(ngram_max=1))
    assert list(model.vocabulary) == sorted(model.vocabulary)
    idf = dict(zip(model.vocabulary, model.idf))
    df = dict(zip(model.vocabulary, model.document_frequency))
    assert df["alpha"] == 3 and df["beta"] == 2 and df["gamma"] == 1
    for token in model.vocabulary:
        assert idf[token] == pytest.approx(math.log(4.0 / (1.0 + df[token])) + 1.0)


def test_max_features_keeps_most_frequent_with_lexicographic_ties():
    texts = ["zz yy xx", "zz yy", "zz ww"]
    model = fit_vectorizer(texts, EncoderConfig(ngram_max=1, max_features=3))
    assert set(model.vocabulary) == {"zz", "yy", "ww"}


def test_min_df_filters_rare_terms():
    model = fit_vectorizer(["aa bb", "aa cc"], EncoderConfig(ngram_max=1, min_df=2))
    assert model.vocabulary == ("aa",)
    with pytest.raises(RejectedInputError):
        fit_vectorizer(["aa", "bb"], EncoderConfig(min_df=2))


def test_rows_are_l2_normalised_and_oov_rows_zero():
    model = fit_vectorizer(["timeout error page", "page loaded fine"])
    X = encode_texts(model, ["timeout page", "nothing known here", "page"])
    assert X.shape == (3, model.dimension)
    assert sparse_norm(X[0]) == pytest.approx(1.0)
    assert X[1].nnz == 0
    assert sparse_norm(X[2]) == pytest.approx(1.0)


def test_sublinear_tf():
    model = fit_vectorizer(["aa aa bb", "bb cc"], EncoderConfig(ngram_max=1, sublinear_tf=True))
    row = encode_texts(model, ["aa aa aa"]).toarray()[0]
    assert np.count_nonzero(row) == 1
    assert row.max() == pytest.approx(1.0)


def test_empty_or_tokenless_corpus_rejected():
    with pytest.raises(RejectedInputError):
        fit_vectorizer([])
    with pytest.raises(RejectedInputError):
        fit_vectorizer(["a b c", "!"])


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(ngram_min=2, ngram_max=1).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(excluded_fields=("thought",)).validate()
    assert PROBE_CONFIG.max_features == 50000 and PROBE_CONFIG.min_df == 2


def test_hash_and_reload_are_stable(tmp_path, vectorizer):
    path = str(tmp_path / "vectorizer.json")
    save_vectorizer(path, vectorizer)
    loaded = load_vectorizer(path)
    assert loaded.hash == vectorizer.hash
    texts = ["METADATA=[domain=code] RESULT=[status=error; text=timeout_error]"]
    assert (encode_texts(loaded, texts) != encode_texts(vectorizer, texts)).nnz == 0


def test_excluded_fields_change_the_encoding(split_views):
    traj = split_views["train"][0]
    texts = [x for t in split_views["train"] for x in t.texts(exclude=("result",))]
    ablated = fit_vectorizer(texts, EncoderConfig(excluded_fields=("result",)))
    assert not any("after" in token.split() for token in ablated.vocabulary)
    assert encode_trajectory(ablated, traj).shape == (traj.length, ablated.dimension)
