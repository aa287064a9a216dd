import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from erset.model import Attribute, EmptyRecord, Record
from erset.similarity import (
    DimMismatch,
    HashedTfidfEmbedder,
    MissingRecord,
    SimilarityConfig,
    SimilarityIndex,
    ZeroVector,
    cosine,
    jaccard,
    load_embeddings,
    save_embeddings,
    serialize,
    tokenize,
)


def _record(rid="r1", **values):
    return Record(rid, tuple(Attribute(k, v) for k, v in values.items()))


def test_serialize_skips_empty_values():
    r = _record(name="ada lovelace", city="", phone="555")
    assert serialize(r) == "name: ada lovelace phone: 555"


def test_serialize_empty_record_raises():
    with pytest.raises(EmptyRecord):
        serialize(Record("r1", ()))


def test_tokenize_word_and_ngram():
    r = _record(name="Ada Lovelace")
    assert tokenize(r) == ["name", "ada", "lovelace"]
    grams = tokenize(r, scheme="char_ngram", n=3)
    assert "ada" in grams and "lov" in grams and "ace" in grams
    with pytest.raises(ValueError):
        tokenize(r, scheme="bytes")


def test_tokenize_keeps_short_words_whole():
    assert "by" in tokenize(_record(a="by"), scheme="char_ngram", n=3)


def test_jaccard():
    assert jaccard({"a", "b"}, {"b", "c"}) == pytest.approx(1 / 3)
    assert jaccard(set(), set()) == 1.0
    assert jaccard({"a"}, set()) == 0.0
    assert jaccard(["a", "a", "b"], ["a", "b"]) == 1.0  # duplicates ignored


def test_cosine_errors():
    with pytest.raises(DimMismatch):
        cosine(np.ones(3), np.ones(4))
    with pytest.raises(ZeroVector):
        cosine(np.zeros(3), np.ones(3))
    assert cosine(np.array([1.0, 0.0]), np.array([2.0, 0.0])) == pytest.approx(1.0)


def test_similarity_config_validation():
    with pytest.raises(ValueError):
        SimilarityConfig(measure="euclid")
    with pytest.raises(ValueError):
        SimilarityConfig(embedder="word2vec")


class TestHashedTfidf:
    def _corpus(self):
        return {
            "r1": _record("r1", name="ada lovelace", city="london"),
            "r2": _record("r2", name="ada lovelace", city="london"),
            "r3": _record("r3", name="grace hopper", city="arlington"),
        }

    def test_deterministic_and_normalized(self):
        records = self._corpus()
        e1 = HashedTfidfEmbedder(dim=64, seed=7).fit(records.values())
        e2 = HashedTfidfEmbedder(dim=64, seed=7).fit(records.values())
        v1, v2 = e1.embed(records["r1"]), e2.embed(records["r1"])
        assert np.allclose(v1, v2)
        assert np.linalg.norm(v1) == pytest.approx(1.0)

    def test_seed_changes_hashing(self):
        records = self._corpus()
        a = HashedTfidfEmbedder(dim=64, seed=0).fit(records.values())
        b = HashedTfidfEmbedder(dim=64, seed=1).fit(records.values())
        assert not np.allclose(a.embed(records["r1"]), b.embed(records["r1"]))

    def test_duplicates_embed_closer_than_strangers(self):
        records = self._corpus()
        emb = HashedTfidfEmbedder(dim=256, seed=0).fit(records.values())
        vecs = {rid: emb.embed(r) for rid, r in records.items()}
        assert cosine(vecs["r1"], vecs["r2"]) > cosine(vecs["r1"], vecs["r3"])


def test_embedding_roundtrip(tmp_path):
    path = tmp_path / "emb.csv"
    emb = {"a": np.array([1.0, 2.0]), "b": np.array([3.0, 4.0])}
    save_embeddings(path, emb)
    loaded = load_embeddings(path, ["a", "b"])
    assert np.allclose(loaded["a"], emb["a"]) and np.allclose(loaded["b"], emb["b"])


def test_load_embeddings_errors(tmp_path):
    path = tmp_path / "emb.csv"
    path.write_text("id,d0,d1\na,1.0,2.0\n")
    with pytest.raises(MissingRecord, match="'b'"):
        load_embeddings(path, ["a", "b"])
    path.write_text("id,d0,d1\na,1.0,2.0\nb,1.0\n")
    with pytest.raises(DimMismatch):
        load_embeddings(path, ["a", "b"])


def test_similarity_index_measures():
    records = {
        "r1": _record("r1", name="ada lovelace"),
        "r2": _record("r2", name="ada lovelace"),
        "r3": _record("r3", name="zzz qqq"),
    }
    idx = SimilarityIndex(records, SimilarityConfig(measure="jaccard"))
    assert idx.sim("r1", "r2") == 1.0
    assert idx.sim("r1", "r3") < 1.0
    idx2 = SimilarityIndex(records, SimilarityConfig(measure="cosine"))
    assert idx2.sim("r1", "r2") == pytest.approx(1.0)
    mean = idx2.mean_embedding(["r1", "r2"])
    assert np.allclose(mean, idx2.embeddings["r1"])


@given(st.sets(st.text("ab", max_size=3)), st.sets(st.text("ab", max_size=3)))
def test_jaccard_bounds_and_symmetry(a, b):
    s = jaccard(a, b)
    assert 0.0 <= s <= 1.0
    assert s == jaccard(b, a)
