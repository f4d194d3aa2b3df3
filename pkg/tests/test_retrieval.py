import numpy as np
import pytest
from conftest import small_model_config
from hypothesis import given, settings
from hypothesis import strategies as st

from mvhan.model import build_variant
from mvhan.retrieval import (
    EmbeddingIndex,
    IndexFormatError,
    brute_force_top_k,
    export_embeddings,
    index_to_text,
    read_index,
    write_index,
)
from mvhan.tensor import DegenerateVectorError, ShapeError


@pytest.fixture(scope="module")
def big_index():
    rng = np.random.default_rng(0)
    ids = rng.permutation(5000)[:1000]
    vecs = rng.normal(size=(1000, 64))
    return ids, vecs, EmbeddingIndex.from_vectors("source", ids, vecs)


@pytest.mark.parametrize("k", [1, 10, 50])
def test_top_k_matches_full_scan(big_index, k):
    ids, vecs, index = big_index
    rng = np.random.default_rng(k)
    for _ in range(20):
        q = rng.normal(size=64)
        got = index.top_k(q, k)
        want = brute_force_top_k(ids, vecs, q, k)
        assert [i for i, _ in got] == [i for i, _ in want]
        np.testing.assert_allclose([s for _, s in got], [s for _, s in want], rtol=0, atol=1e-12)


def test_stored_vector_retrieves_itself(big_index):
    ids, vecs, index = big_index
    (cid, score), = index.top_k(vecs[17], 1)
    assert cid == ids[17]
    assert score == pytest.approx(1.0, abs=1e-12)


def test_ties_break_by_ascending_id():
    v = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [3.0, 0.0]])
    index = EmbeddingIndex.from_vectors("t", np.array([40, 7, 1, 12]), v)
    assert [i for i, _ in index.top_k([1.0, 0.0], 3)] == [7, 12, 40]
    assert [i for i, _ in brute_force_top_k([40, 7, 1, 12], v, [1.0, 0.0], 3)] == [7, 12, 40]


def test_k_beyond_catalog_returns_everything():
    rng = np.random.default_rng(1)
    index = EmbeddingIndex.from_vectors("t", np.arange(5), rng.normal(size=(5, 3)))
    got = index.top_k(rng.normal(size=3), 50)
    assert sorted(i for i, _ in got) == list(range(5))
    scores = [s for _, s in got]
    assert scores == sorted(scores, reverse=True)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_query_scaling_keeps_ranking(seed, alpha):
    rng = np.random.default_rng(seed)
    index = EmbeddingIndex.from_vectors("t", np.arange(200), rng.normal(size=(200, 8)))
    q = rng.normal(size=8)
    assert [i for i, _ in index.top_k(q, 20)] == [i for i, _ in index.top_k(alpha * q, 20)]


def test_query_errors(big_index):
    index = big_index[2]
    with pytest.raises(ShapeError):
        index.top_k(np.ones(63), 5)
    with pytest.raises(DegenerateVectorError):
        index.top_k(np.zeros(64), 5)
    with pytest.raises(ValueError):
        index.top_k(np.ones(64), 0)


def test_rows_have_unit_norm(big_index):
    np.testing.assert_allclose(np.linalg.norm(big_index[2].vectors, axis=1), 1.0, rtol=0, atol=1e-9)


def test_index_file_round_trip(tmp_path, big_index):
    index = big_index[2]
    write_index(index, tmp_path / "a.tsv")
    back = read_index(tmp_path / "a.tsv")
    assert back.vectors.tobytes() == index.vectors.tobytes()
    np.testing.assert_array_equal(back.ids, index.ids)
    write_index(back, tmp_path / "b.tsv")
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    assert (tmp_path / "a.tsv").read_text().splitlines()[0] == "source\t1000\t64"


def test_index_text_golden():
    index = EmbeddingIndex("target", np.array([3, 9]), np.array([[0.6, 0.8], [1.0, 0.0]]))
    assert index_to_text(index) == "target\t2\t2\n3\t0.59999999999999998,0.80000000000000004\n9\t1,0\n"


def test_bad_index_files(tmp_path):
    p = tmp_path / "x.tsv"
    p.write_text("source\t2\t2\n1\t1,0\n")
    with pytest.raises(IndexFormatError):
        read_index(p)
    p.write_text("source\t1\t2\n1\t1,0,0\n")
    with pytest.raises(IndexFormatError):
        read_index(p)


def test_export_embeddings(tmp_path, tiny_data):
    ds = tiny_data[0]
    model = build_variant(small_model_config(), ds.schema, 0)
    cat = ds.catalogs["target"]
    index = export_embeddings(model, cat, "target", tmp_path / "idx.tsv")
    assert len(index) == len(cat)
    np.testing.assert_array_equal(index.ids, cat.ids)
    back = read_index(tmp_path / "idx.tsv")
    assert back.vectors.tobytes() == index.vectors.tobytes()
    raw = model.content_tower(cat.features[:3], "target").data
    np.testing.assert_allclose(index.vectors[:3], raw / np.linalg.norm(raw, axis=1, keepdims=True), rtol=1e-15)
