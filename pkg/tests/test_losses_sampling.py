import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtrec import autograd as ag
from gtrec.corpus import SECONDS_PER_DAY, Interaction
from gtrec.embeddings import EmbeddingMatrix, l2_normalize
from gtrec.errors import EmptyPool, NonFinite
from gtrec.losses import AuxBatch, aux_loss, ranking_loss, similarities, total_loss
from gtrec.sampling import (
    WindowIndex, sample_semantic_negatives, sample_uniform, sample_window_negatives, semantic_pool,
)

from oracles import ranking_loss_oracle

T0 = 1_700_000_000
DAY = SECONDS_PER_DAY


# ---------------------------------------------------------------- ranking loss


@pytest.mark.parametrize("pos,neg,expected,tol", [
    (0.0, 0.0, 2 * math.log(2), 1e-12),
    (30.0, -30.0, 0.0, 1e-9),
    (2.0, -1.0, 0.440190, 1e-6),
])
def test_ranking_loss_examples(pos, neg, expected, tol):
    assert ranking_loss(pos, [neg]).item() == pytest.approx(expected, abs=tol)


def test_ranking_loss_matches_oracle_with_many_negatives():
    negs = [-1.5, 0.25, 3.0]
    got = ranking_loss(0.7, negs).item()
    assert got == pytest.approx(float(ranking_loss_oracle(0.7, negs)), abs=1e-12)


def test_ranking_loss_mask_ignores_padding():
    pos = np.array([[0.0, 5.0], [1.0, -2.0]])
    neg = np.array([[0.0, -5.0], [0.5, 9.0]])
    mask = np.array([[0, 1], [1, 0]])
    expect = (float(ranking_loss_oracle(5.0, [-5.0])) + float(ranking_loss_oracle(1.0, [0.5]))) / 2
    assert ranking_loss(pos, neg, mask).item() == pytest.approx(expect, abs=1e-12)


def test_ranking_loss_rejects_non_finite():
    with pytest.raises(NonFinite):
        ranking_loss(float("nan"), [0.0])
    with pytest.raises(NonFinite):
        ranking_loss(0.0, [float("inf")])


def test_ranking_loss_monotone_on_grid():
    grid = np.linspace(-8, 8, 33)
    for neg in grid[::4]:
        losses = [ranking_loss(p, [neg]).item() for p in grid]
        assert all(v >= 0 for v in losses)
        assert all(a > b for a, b in zip(losses, losses[1:]))
    for pos in grid[::4]:
        losses = [ranking_loss(pos, [n, 0.5]).item() for n in grid]
        assert all(a < b for a, b in zip(losses, losses[1:]))


@given(st.floats(-40, 40), st.lists(st.floats(-40, 40), min_size=1, max_size=6))
@settings(max_examples=100)
def test_ranking_loss_matches_decimal_oracle(pos, negs):
    assert ranking_loss(pos, negs).item() == pytest.approx(float(ranking_loss_oracle(pos, negs)),
                                                            rel=1e-9, abs=1e-12)


# ---------------------------------------------------------------- aux losses


def _unit(rng, *shape):
    return l2_normalize(rng.normal(size=shape))


def test_cosine_zero_when_anchor_equals_positive():
    rng = np.random.default_rng(0)
    t = _unit(rng, 4, 6)
    batch = AuxBatch(t, t.copy(), _unit(rng, 4, 2, 6))
    assert aux_loss(batch, "cosine").item() == pytest.approx(0.0, abs=1e-12)


def test_pairwise_satisfied_margin_is_zero():
    a = np.array([[1.0, 0.0]])
    batch = AuxBatch(a, a, -a[:, None, :])
    assert aux_loss(batch, "pairwise", margin=0.5).item() == 0.0
    with pytest.raises(ValueError):
        aux_loss(batch, "pairwise", margin=0.0)


def test_bce_two_anchor_toy_matches_hand_computation():
    anchors = np.array([[1.0, 0.0], [0.0, 2.0]])
    pos = np.array([[1.0, 1.0], [0.0, 1.0]])
    neg = np.array([[[0.0, 1.0], [-1.0, 0.0]], [[1.0, 0.0], [3.0, 4.0]]])
    tau = 5.0
    s_pos = [1 / math.sqrt(2), 1.0]
    s_neg = [[0.0, -1.0], [0.0, 0.8]]
    sig = lambda z: 1 / (1 + math.exp(-z))  # noqa: E731
    per = [-math.log(sig(tau * s_pos[b])) - sum(math.log(1 - sig(tau * s)) for s in s_neg[b]) / 2
           for b in range(2)]
    got = aux_loss(AuxBatch(anchors, pos, neg), "bce", temperature=tau).item()
    assert got == pytest.approx(sum(per) / 2, abs=1e-12)


def test_unknown_kind_and_bad_shapes():
    a = np.ones((2, 3))
    with pytest.raises(ValueError):
        aux_loss(AuxBatch(a, a, np.ones((2, 1, 3))), "hinge")
    with pytest.raises(ValueError):
        AuxBatch(a, np.ones((2, 4)), np.ones((2, 1, 3)))
    with pytest.raises(ValueError):
        AuxBatch(a, a, np.ones((2, 0, 3)))


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 4))
@settings(max_examples=60)
def test_cosine_invariant_to_pair_order(seed, B, n_neg):
    rng = np.random.default_rng(seed)
    t, m, n = _unit(rng, B, 5), _unit(rng, B, 5), _unit(rng, B, n_neg, 5)
    perm = rng.permutation(B)
    a = aux_loss(AuxBatch(t, m, n), "cosine").item()
    b = aux_loss(AuxBatch(t[perm], m[perm], n[perm]), "cosine").item()
    assert a == pytest.approx(b, abs=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 4), st.floats(0.01, 3.0))
@settings(max_examples=60)
def test_pairwise_bounded_by_margin_plus_two(seed, B, n_neg, margin):
    rng = np.random.default_rng(seed)
    batch = AuxBatch(_unit(rng, B, 5), _unit(rng, B, 5), _unit(rng, B, n_neg, 5))
    assert 0.0 <= aux_loss(batch, "pairwise", margin=margin).item() <= margin + 2 + 1e-12


def test_similarities_are_cosines():
    rng = np.random.default_rng(3)
    t, m, n = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 2, 3))
    sp, sn = similarities(AuxBatch(t, m, n))
    cos = lambda u, v: u @ v / np.linalg.norm(u) / np.linalg.norm(v)  # noqa: E731
    np.testing.assert_allclose(sp.data, [cos(t[b], m[b]) for b in range(2)])
    np.testing.assert_allclose(sn.data, [[cos(t[b], n[b, j]) for j in range(2)] for b in range(2)])


def test_aux_gradients_flow_to_projected_anchor():
    rng = np.random.default_rng(0)
    W = ag.Tensor(rng.normal(size=(4, 4)), requires_grad=True, dtype=np.float64)
    t = ag.Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    m = rng.normal(size=(3, 4))
    n = rng.normal(size=(3, 2, 4))
    with ag.precision(np.float64):
        rep = ag.grad_check(lambda: aux_loss(AuxBatch(ag.matmul(t, W), m, n), "bce"), {"W": W},
                            eps=1e-6, tol=1e-4)
    assert rep.passed, rep.summary()


def test_total_loss_examples():
    assert total_loss(1.0, 0.5, 0.1) == pytest.approx(1.05)
    assert total_loss(1.0, 7.0, 0.0) == 1.0
    assert total_loss(1.0, 0.0, 1.0) == 1.0
    r = ag.Tensor(1.0, dtype=np.float64)
    assert total_loss(r, ag.Tensor(0.5, dtype=np.float64), 0.1).item() == pytest.approx(1.05)


# ---------------------------------------------------------------- window negatives


def _toy_log():
    return [
        Interaction("A", "x", T0 - 10 * DAY, "P"),
        Interaction("B", "x", T0 - 2 * DAY, "P"),
        Interaction("B", "y", T0 - DAY, "P"),
        Interaction("C", "z", T0 - 3600, "P"),
        Interaction("C", "w", T0 - 30 * DAY, "P"),  # outside the window
        Interaction("C", "v", T0, "P"),  # at t, excluded by the half-open window
    ]


def test_window_pool_hand_enumeration():
    index = WindowIndex(_toy_log())
    pool = index.pool(index.user_index["A"], T0, 7)
    assert sorted(index.item_keys[i] for i in pool) == ["y", "z"]


def test_window_negatives_draws_and_flags_replacement():
    neg = sample_window_negatives(_toy_log(), "A", T0, 7, n_neg=2, rng=np.random.default_rng(0))
    assert sorted(neg.items) == ["y", "z"]
    assert not neg.with_replacement
    assert neg.provenance == "temporal_window"
    big = sample_window_negatives(_toy_log(), "A", T0, 7, n_neg=5, rng=np.random.default_rng(0))
    assert big.with_replacement and set(big.items) <= {"y", "z"}


def test_window_negatives_deterministic_under_seed():
    a = sample_window_negatives(_toy_log(), "A", T0, 7, 1, np.random.default_rng(11))
    b = sample_window_negatives(_toy_log(), "A", T0, 7, 1, np.random.default_rng(11))
    assert a == b


def test_window_empty_pool_when_user_saw_everything():
    log = [Interaction("A", "x", T0 - DAY, "P"), Interaction("B", "x", T0 - DAY, "P")]
    with pytest.raises(EmptyPool):
        sample_window_negatives(log, "A", T0, 7, 1, np.random.default_rng(0))
    with pytest.raises(EmptyPool):
        sample_window_negatives(log, "nobody", T0, 7, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        WindowIndex(log).pool(0, T0, 0)


@given(st.integers(0, 10_000))
@settings(max_examples=40)
def test_window_negatives_never_in_user_history(seed):
    rng = np.random.default_rng(seed)
    log = [Interaction(f"u{rng.integers(5)}", f"i{rng.integers(12)}", T0 + int(rng.integers(0, 20 * DAY)), "P")
           for _ in range(40)]
    index = WindowIndex(log)
    for x in log:
        u = index.user_index[x.user_id]
        pool = index.pool(u, x.timestamp_utc, 5)
        history = {index.item_index[y.item_id] for y in log if y.user_id == x.user_id}
        others = {index.item_index[y.item_id] for y in log if y.user_id != x.user_id
                  and x.timestamp_utc - 5 * DAY <= y.timestamp_utc < x.timestamp_utc}
        assert set(pool.tolist()) == others - history


# ---------------------------------------------------------------- semantic negatives


def _catalog(seed=0, n=10, d=4):
    rng = np.random.default_rng(seed)
    return EmbeddingMatrix([f"m{j}" for j in range(n)], rng.normal(size=(n, d)), normalized=False)


def test_semantic_pool_is_the_two_least_similar_of_ten():
    M = _catalog()
    t = np.random.default_rng(1).normal(size=4)
    cos = [float(M.rows[j] @ t / np.linalg.norm(M.rows[j]) / np.linalg.norm(t)) for j in range(10)]
    bottom = {M.keys[j] for j in sorted(range(10), key=lambda j: cos[j])[:2]}
    rng = np.random.default_rng(0)
    drawn = set()
    for _ in range(200):
        drawn |= set(sample_semantic_negatives(t, M, 0.2, 1, rng).items)
    assert drawn == bottom


def test_semantic_full_pool_is_catalog_minus_exclusions():
    M = _catalog()
    t = np.ones(4)
    rng = np.random.default_rng(0)
    drawn = set()
    for _ in range(500):
        drawn |= set(sample_semantic_negatives(t, M, 1.0, 2, rng, exclude={"m3", "m7"}).items)
    assert drawn == set(M.keys) - {"m3", "m7"}


def test_excluded_bottom_item_never_drawn():
    M = _catalog()
    t = np.random.default_rng(1).normal(size=4)
    pool = semantic_pool(t, M.rows, 0.3)
    banned = M.keys[pool[0]]
    rng = np.random.default_rng(5)
    for _ in range(10_000):
        assert banned not in sample_semantic_negatives(t, M, 0.3, 1, rng, exclude={banned}).items


def test_semantic_errors():
    M = _catalog()
    with pytest.raises(ValueError):
        sample_semantic_negatives(np.ones(4), M, 0.0)
    with pytest.raises(ValueError):
        sample_semantic_negatives(np.ones(4), M, 1.5)
    pool = semantic_pool(np.ones(4), M.rows, 0.1)
    with pytest.raises(EmptyPool):
        sample_semantic_negatives(np.ones(4), M, 0.1, exclude={M.keys[i] for i in pool})


def test_semantic_draws_without_replacement_when_pool_is_large_enough():
    M = _catalog(n=50)
    neg = sample_semantic_negatives(np.ones(4), M, 0.2, 5, np.random.default_rng(0))
    assert len(set(neg.items)) == 5 and not neg.with_replacement
    assert neg.provenance == "semantic_pool"


# ---------------------------------------------------------------- uniform


def test_uniform_avoids_exclusions():
    rng = np.random.default_rng(0)
    exclude = np.zeros((3, 8), dtype=bool)
    exclude[:, 0] = True
    exclude[0, 1:6] = True
    out = sample_uniform(7, exclude, (3, 200), rng)
    assert out.min() >= 1 and out.max() <= 7
    assert not exclude[np.arange(3)[:, None], out].any()
    full = np.ones((1, 8), dtype=bool)
    with pytest.raises(EmptyPool):
        sample_uniform(7, full, (1, 3), rng)
