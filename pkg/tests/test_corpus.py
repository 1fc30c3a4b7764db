import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gtrec.corpus import (
    SECONDS_PER_DAY,
    Interaction,
    SplitSpec,
    build_histories,
    load_interactions,
    load_location_sidecar,
    make_split,
    split_explorer,
    split_general,
    write_interactions,
)
from gtrec.errors import EmptySplit, ParseError

T0 = 1_000_000_000
DAY = SECONDS_PER_DAY


def ev(user, item, ts, loc="Porto, Portugal"):
    return Interaction(user, item, ts, loc)


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def test_jsonl_three_rows_sorted(tmp_path):
    p = tmp_path / "log.jsonl"
    write_jsonl(p, [
        {"user_id": "b", "item_id": "x", "ts_utc": T0 + 5, "location": "Oslo"},
        {"user_id": "a", "item_id": "y", "ts_utc": T0 + 9, "location": "Oslo"},
        {"user_id": "a", "item_id": "z", "ts_utc": T0 + 1, "location": "Oslo"},
    ])
    log = load_interactions(p)
    assert [(x.user_id, x.item_id) for x in log] == [("a", "z"), ("a", "y"), ("b", "x")]


def test_malformed_line_named(tmp_path):
    p = tmp_path / "log.jsonl"
    p.write_text('{"user_id": "a", "item_id": "x", "ts_utc": 5, "location": "Oslo"}\n'
                 '{"user_id": "a", "item_id": \n'
                 '{"user_id": "a", "item_id": "y", "ts_utc": 6, "location": "Oslo"}\n')
    with pytest.raises(ParseError) as info:
        load_interactions(p)
    assert info.value.line == 2
    assert "line 2" in str(info.value)


def test_movielens_rows_join_sidecar(tmp_path):
    ratings = tmp_path / "ratings.dat"
    lines = [f"{u}::{100 + i}::4::{T0 + i}" for i in range(1000) for u in [1 + i % 7]]
    ratings.write_text("\n".join(lines) + "\n")
    users = tmp_path / "users.dat"
    users.write_text("\n".join(f"{u}::F::25::4::0{u}000" for u in range(1, 8)) + "\n")
    log = load_interactions(ratings, format="movielens_dat", locations=users)
    assert len(log) == 1000
    assert {x.location for x in log if x.user_id == "3"} == {"ZIP 03000, USA"}


def test_sidecar_formats(tmp_path):
    j = tmp_path / "loc.jsonl"
    write_jsonl(j, [{"user_id": 1, "location": "Kyiv"}])
    c = tmp_path / "loc.csv"
    c.write_text("user_id,location\n1,Kyiv\n")
    assert load_location_sidecar(j) == load_location_sidecar(c) == {"1": "Kyiv"}


def test_default_location_when_missing(tmp_path):
    ratings = tmp_path / "ratings.dat"
    ratings.write_text(f"9::5::3::{T0}\n")
    assert load_interactions(ratings, format="movielens_dat")[0].location == "United States"


def test_write_load_round_trip(tmp_path):
    log = [ev("a", "x", T0), ev("a", "y", T0 + 1), ev("b", "x", T0 + 2, "Lima")]
    write_interactions(tmp_path / "l.jsonl", log)
    assert load_interactions(tmp_path / "l.jsonl") == log


def test_interaction_validation():
    with pytest.raises(ValueError):
        Interaction("a", "x", 0, "Oslo")
    with pytest.raises(ValueError):
        Interaction("a", "x", T0, "   ")


def test_truncation_keeps_last_events():
    log = [ev("u", f"i{k}", T0 + k) for k in range(5)]
    h = build_histories(log, 3)["u"]
    assert h.items == ("i2", "i3", "i4")


def test_single_event_history():
    assert len(build_histories([ev("u", "x", T0)], 10)["u"]) == 1


def test_leave_last_out():
    log = [ev("u", "a", T0), ev("u", "b", T0 + 1), ev("u", "c", T0 + 2)]
    split = split_general(build_histories(log, 10), min_history=3)
    assert split.train["u"].items == ("a", "b")
    assert split.test["u"].item_id == "c"


def test_short_user_excluded():
    log = [ev("u", "a", T0), ev("v", "a", T0), ev("v", "b", T0 + 1)]
    split = split_general(build_histories(log, 10), min_history=2)
    assert "u" not in split.test and "v" in split.test


def test_hundred_users_hundred_targets():
    log = [ev(f"u{n}", f"i{k}", T0 + k) for n in range(100) for k in range(2 + n % 4)]
    assert len(split_general(build_histories(log, 50), min_history=2).test) == 100


def test_empty_split_raises():
    with pytest.raises(EmptySplit):
        split_general(build_histories([ev("u", "a", T0)], 5), min_history=2)


def test_explorer_repeat_in_window_excluded():
    log = [ev("u", "x", T0), ev("u", "y", T0 + DAY), ev("u", "x", T0 + 30 * DAY)]
    with pytest.raises(EmptySplit):
        split_explorer(build_histories(log, 10), SplitSpec("explorer"))


def test_explorer_new_item_included():
    log = [ev("u", "x", T0), ev("u", "x", T0 + DAY), ev("u", "z", T0 + 2 * DAY)]
    split = split_explorer(build_histories(log, 10), SplitSpec("explorer"))
    assert split.test["u"].item_id == "z"
    assert split.train["u"].items == ("x",)  # duplicate removed
    assert split.window_seen["u"] == frozenset({"x"})


def test_explorer_repeat_outside_window_kept():
    log = [ev("u", "x", T0), ev("u", "y", T0 + 200 * DAY), ev("u", "x", T0 + 400 * DAY)]
    split = split_explorer(build_histories(log, 10), SplitSpec("explorer"))
    assert split.test["u"].item_id == "x"


def test_explorer_ten_users_three_repeaters():
    log = []
    for n in range(10):
        u = f"u{n}"
        log += [ev(u, "a", T0), ev(u, "b", T0 + DAY)]
        last = "a" if n < 3 else f"new{n}"
        log.append(ev(u, last, T0 + 10 * DAY))
    split = split_explorer(build_histories(log, 10), SplitSpec("explorer", min_history=3))
    assert len(split.test) == 7


# ---------------------------------------------------------------- properties

events = st.lists(
    st.tuples(st.sampled_from("abcde"), st.sampled_from("pqrstuvw"),
              st.integers(0, 400), st.sampled_from(["Oslo", "Lima"])),
    min_size=1, max_size=40,
)


def to_log(rows):
    return [ev(u, i, T0 + d * DAY // 3, loc) for u, i, d, loc in rows]


@given(events, st.randoms())
def test_histories_permutation_invariant_and_idempotent(rows, rnd):
    log = to_log(rows)
    shuffled = list(log)
    rnd.shuffle(shuffled)
    a, b = build_histories(log, 8), build_histories(shuffled, 8)
    assert a == b
    flat = [ev(u, i, t, loc) for u, h in a.items() for i, t, loc in h.events()]
    assert build_histories(flat, 8) == a


@given(events, st.sampled_from(["general", "explorer"]))
def test_no_test_target_leaks_into_train(rows, mode):
    hist = build_histories(to_log(rows), 20)
    try:
        split = make_split(hist, SplitSpec(mode, min_history=2))
    except EmptySplit:
        return
    for u, case in split.test.items():
        train = split.train[u]
        if mode == "general":
            assert len(train.items) == len(hist[u].items) - 1
        else:
            window_start = case.timestamp_utc - 182 * DAY
            in_window = {i for i, t in zip(train.items, train.timestamps) if t >= window_start}
            assert case.item_id not in in_window
            assert len(set(train.items)) == len(train.items)


@given(events)
def test_explorer_targets_subset_of_general(rows):
    hist = build_histories(to_log(rows), 20)
    try:
        explorer = split_explorer(hist, SplitSpec("explorer", min_history=2))
    except EmptySplit:
        return
    general = split_general(hist, 2)
    assert set(explorer.test_pairs()) <= set(general.test_pairs())
