import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gtrec.corpus import Interaction
from gtrec.embeddings import (
    EmbeddingMatrix,
    attach_gt,
    cosine_sim,
    load_embeddings,
    mock_encode,
    write_embeddings,
)
from gtrec.enrichment import context_key
from gtrec.errors import DimMismatch, DuplicateKey, MissingContext, NonFinite, ShapeMismatch, ZeroVector


def test_two_by_four(tmp_path):
    m = EmbeddingMatrix(["a", "b"], np.arange(8, dtype=np.float32).reshape(2, 4) + 1)
    write_embeddings(tmp_path / "e.emb", m)
    loaded = load_embeddings(tmp_path / "e.emb", normalize=False)
    assert loaded.rows.shape == (2, 4) and loaded.keys == ("a", "b")


def test_short_body(tmp_path):
    m = EmbeddingMatrix(["a", "b"], np.ones((2, 4), dtype=np.float32))
    write_embeddings(tmp_path / "e.emb", m)
    raw = (tmp_path / "e.emb").read_bytes()
    (tmp_path / "bad.emb").write_bytes(raw[:-4])
    with pytest.raises(ShapeMismatch):
        load_embeddings(tmp_path / "bad.emb")


def test_non_finite_and_duplicate(tmp_path):
    with pytest.raises(NonFinite):
        EmbeddingMatrix(["a"], [[np.nan, 1.0]])
    with pytest.raises(DuplicateKey):
        EmbeddingMatrix(["a", "a"], np.ones((2, 2)))
    # hand-built file with a NaN row
    body = struct.pack("<4sHHII", b"GTEM", 1, 0, 1, 2) + struct.pack("<I", 1) + b"a"
    (tmp_path / "nan.emb").write_bytes(body + np.array([np.nan, 1.0], "<f4").tobytes())
    with pytest.raises(NonFinite):
        load_embeddings(tmp_path / "nan.emb")


def test_load_normalizes_by_default(tmp_path):
    m = EmbeddingMatrix(["a"], [[3.0, 4.0]])
    write_embeddings(tmp_path / "e.emb", m)
    out = load_embeddings(tmp_path / "e.emb")
    assert out.normalized
    np.testing.assert_allclose(out["a"], [0.6, 0.8], rtol=1e-6)
    assert not load_embeddings(tmp_path / "e.emb", normalize=False).normalized


@given(
    st.integers(1, 6).flatmap(lambda n: st.tuples(
        st.lists(st.text(min_size=1, max_size=8), min_size=n, max_size=n, unique=True),
        hnp.arrays(np.float32, (n, 3), elements=st.floats(-1e6, 1e6, width=32)),
    )),
    st.booleans(),
)
def test_round_trip_bit_exact(tmp_path_factory, keys_rows, normalize):
    keys, rows = keys_rows
    m = EmbeddingMatrix(keys, rows)
    path = tmp_path_factory.mktemp("emb") / "m.emb"
    write_embeddings(path, m)
    assert load_embeddings(path, normalize=False) == m
    unit = m.normalized_copy() if np.all(np.linalg.norm(rows, axis=1) > 0) else None
    if unit is not None:
        write_embeddings(path, unit)
        assert load_embeddings(path, normalize=normalize) == unit


def test_mock_encode_pure_and_unit():
    a = mock_encode("hello", 64, 3)
    assert np.array_equal(a, mock_encode("hello", 64, 3))
    assert abs(np.linalg.norm(a) - 1) <= 1e-6
    assert not np.array_equal(a, mock_encode("hello", 64, 4))


def test_mock_encode_spread():
    V = np.stack([mock_encode(f"text number {i}", 64, 0) for i in range(1000)])
    C = np.abs(V @ V.T)
    off = C[~np.eye(1000, dtype=bool)]
    assert off.mean() < 0.5


def test_attach_gt():
    day1, day2 = 1_500_000_000, 1_500_000_000 + 86400
    log = [Interaction(f"u{i % 3}", f"i{i}", day1 if i < 5 else day2, "Oslo") for i in range(10)]
    keys = sorted({context_key(b, "Oslo") for b in ("2017-07-14", "2017-07-15")})
    emb = EmbeddingMatrix(keys, np.eye(2, 4))
    out = attach_gt(log, None, emb)
    assert len(out) == 10
    assert len({out[i].tobytes() for i in out}) == 2
    assert np.array_equal(out[0], out[1])  # same day, same place


def test_attach_gt_missing_named():
    log = [Interaction("u", "i", 1_500_000_000, "Nowhere")]
    with pytest.raises(MissingContext) as info:
        attach_gt(log, None, EmbeddingMatrix(["x|y"], [[1.0, 0.0]]))
    assert "2017-07-14|Nowhere" in str(info.value)


def test_cosine_cases():
    v = np.array([0.3, -1.2, 2.0])
    assert cosine_sim(v, v) == pytest.approx(1.0)
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 0], [-1, 0]) == -1.0
    with pytest.raises(DimMismatch):
        cosine_sim([1, 0], [1, 0, 0])
    with pytest.raises(ZeroVector):
        cosine_sim([0, 0], [1, 0])


finite = st.floats(-1e3, 1e3).filter(lambda x: abs(x) > 1e-3)


@given(st.lists(finite, min_size=2, max_size=8).flatmap(
    lambda a: st.tuples(st.just(a), st.lists(finite, min_size=len(a), max_size=len(a)))))
def test_cosine_symmetric_bounded(ab):
    a, b = ab
    s = cosine_sim(a, b)
    assert s == cosine_sim(b, a)
    assert abs(s) <= 1 + 1e-9
