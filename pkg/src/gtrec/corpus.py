"""Interaction logs, per-user histories and the general/explorer splits."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import EmptyDataset, EmptySplit, ParseError

SECONDS_PER_DAY = 86_400
DEFAULT_LOCATION = "United States"


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp_utc: int
    location: str

    def __post_init__(self):
        if self.timestamp_utc <= 0:
            raise ValueError(f"timestamp_utc must be positive, got {self.timestamp_utc}")
        loc = self.location.strip() if isinstance(self.location, str) else ""
        if not loc:
            raise ValueError("location must be non-empty")
        object.__setattr__(self, "location", loc)

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "item_id": self.item_id,
            "ts_utc": self.timestamp_utc,
            "location": self.location,
        }


@dataclass(frozen=True)
class UserHistory:
    """Chronological events of one user. ``locations`` runs parallel to ``items``."""

    user_id: str
    items: tuple[str, ...]
    timestamps: tuple[int, ...]
    locations: tuple[str, ...]

    def __post_init__(self):
        n = len(self.items)
        if n < 1:
            raise ValueError("history must contain at least one event")
        if len(self.timestamps) != n or len(self.locations) != n:
            raise ValueError("history fields must have equal length")
        if any(a > b for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError("timestamps must be nondecreasing")

    def __len__(self) -> int:
        return len(self.items)

    def events(self) -> list[tuple[str, int, str]]:
        return list(zip(self.items, self.timestamps, self.locations))

    def head(self, n: int) -> "UserHistory":
        """The first ``n`` events (``n`` may be negative, as in slicing)."""
        return UserHistory(self.user_id, self.items[:n], self.timestamps[:n], self.locations[:n])

    def last(self) -> tuple[str, int, str]:
        return self.items[-1], self.timestamps[-1], self.locations[-1]


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "general"
    explorer_window_days: int = 182
    min_history: int = 3

    def __post_init__(self):
        if self.mode not in ("general", "explorer"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.explorer_window_days <= 0:
            raise ValueError("explorer_window_days must be positive")
        if self.min_history < 2:
            raise ValueError("min_history must be >= 2")


@dataclass(frozen=True)
class TestCase:
    user_id: str
    item_id: str
    timestamp_utc: int
    location: str


@dataclass
class Split:
    mode: str
    train: dict[str, UserHistory]
    test: dict[str, TestCase]
    # explorer mode: items the user consumed inside the window before the target
    window_seen: dict[str, frozenset[str]] = field(default_factory=dict)

    def test_pairs(self) -> list[tuple[str, str]]:
        return [(u, c.item_id) for u, c in self.test.items()]


# ---------------------------------------------------------------- loading


def _sort_key(x: Interaction):
    return (x.user_id, x.timestamp_utc, x.item_id, x.location)


def _finalize(rows: list[Interaction]) -> list[Interaction]:
    if not rows:
        raise EmptyDataset("no interactions survived parsing")
    return sorted(set(rows), key=_sort_key)


def load_location_sidecar(path: str | Path) -> dict[str, str]:
    """Read a user -> location mapping.

    Accepts JSONL (``{"user_id", "location"}`` per line), CSV with the same
    columns, or a MovieLens ``users.dat`` whose zip-code column becomes the
    location.
    """
    path = Path(path)
    out: dict[str, str] = {}
    if path.suffix == ".dat":
        with path.open(encoding="latin-1") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split("::")
                if len(parts) < 5:
                    raise ParseError("expected UserID::Gender::Age::Occupation::Zip", lineno)
                out[parts[0]] = f"ZIP {parts[4].strip()}, USA"
        return out
    if path.suffix == ".csv":
        with path.open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                out[str(row["user_id"])] = row["location"]
        return out
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[str(obj["user_id"])] = str(obj["location"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"bad sidecar row ({exc})", lineno) from None
    return out


def load_interactions(
    path: str | Path,
    format: str = "jsonl",
    locations: Mapping[str, str] | str | Path | None = None,
    default_location: str = DEFAULT_LOCATION,
) -> list[Interaction]:
    """Parse an interaction log.

    ``movielens_dat`` reads ``UserID::MovieID::Rating::Timestamp``; the rating
    is discarded and the location comes from ``locations`` (a mapping or a
    sidecar path), falling back to ``default_location``. Returned rows are
    sorted by user then time, with exact duplicates dropped.
    """
    path = Path(path)
    if isinstance(locations, (str, Path)):
        locations = load_location_sidecar(locations)
    locations = locations or {}
    rows: list[Interaction] = []

    if format == "movielens_dat":
        with path.open(encoding="latin-1") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split("::")
                if len(parts) != 4:
                    raise ParseError("expected UserID::MovieID::Rating::Timestamp", lineno)
                user, item, _, ts = parts
                try:
                    rows.append(
                        Interaction(user, item, int(ts), locations.get(user, default_location))
                    )
                except ValueError as exc:
                    raise ParseError(str(exc), lineno) from None
    elif format == "jsonl":
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    user = str(obj["user_id"])
                    loc = obj.get("location") or locations.get(user, default_location)
                    rows.append(Interaction(user, str(obj["item_id"]), int(obj["ts_utc"]), loc))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"invalid interaction row ({exc})", lineno) from None
    else:
        raise ValueError(f"unknown log format {format!r}")
    return _finalize(rows)


def write_interactions(path: str | Path, log: Iterable[Interaction]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for x in log:
            fh.write(json.dumps(x.to_json()) + "\n")


# ---------------------------------------------------------------- histories


def build_histories(log: Iterable[Interaction], max_len: int | None = None) -> dict[str, UserHistory]:
    """Group by user, order by time, keep the most recent ``max_len`` events (all if None)."""
    if max_len is not None and max_len < 2:
        raise ValueError("max_len must be >= 2")
    grouped: dict[str, list[Interaction]] = defaultdict(list)
    for x in log:
        grouped[x.user_id].append(x)
    out = {}
    for user in sorted(grouped):
        events = sorted(grouped[user], key=_sort_key)[-max_len:] if max_len else sorted(grouped[user], key=_sort_key)
        out[user] = UserHistory(
            user,
            tuple(e.item_id for e in events),
            tuple(e.timestamp_utc for e in events),
            tuple(e.location for e in events),
        )
    return out


def split_general(histories: Mapping[str, UserHistory], min_history: int = 3) -> Split:
    if min_history < 2:
        raise ValueError("min_history must be >= 2")
    train, test = {}, {}
    for user, h in histories.items():
        if len(h) < min_history:
            continue
        train[user] = h.head(-1)
        item, ts, loc = h.last()
        test[user] = TestCase(user, item, ts, loc)
    if not test:
        raise EmptySplit(f"no user has at least {min_history} events")
    return Split("general", train, test)


def split_explorer(histories: Mapping[str, UserHistory], spec: SplitSpec) -> Split:
    """Keep only users whose final item is new within the look-back window.

    Training sequences of qualifying users have repeated items removed (first
    occurrence kept).
    """
    if spec.mode != "explorer":
        raise ValueError("split_explorer requires spec.mode == 'explorer'")
    window = spec.explorer_window_days * SECONDS_PER_DAY
    train, test, seen = {}, {}, {}
    for user, h in histories.items():
        if len(h) < spec.min_history:
            continue
        item, ts, loc = h.last()
        prior = h.head(-1)
        in_window = {
            i for i, t in zip(prior.items, prior.timestamps) if ts - window <= t <= ts
        }
        if item in in_window:
            continue
        kept: list[int] = []
        seen_items: set[str] = set()
        for idx, i in enumerate(prior.items):
            if i not in seen_items:
                seen_items.add(i)
                kept.append(idx)
        train[user] = UserHistory(
            user,
            tuple(prior.items[k] for k in kept),
            tuple(prior.timestamps[k] for k in kept),
            tuple(prior.locations[k] for k in kept),
        )
        test[user] = TestCase(user, item, ts, loc)
        seen[user] = frozenset(in_window)
    if not test:
        raise EmptySplit("no user qualifies as an explorer")
    return Split("explorer", train, test, seen)


def make_split(histories: Mapping[str, UserHistory], spec: SplitSpec) -> Split:
    if spec.mode == "general":
        return split_general(histories, spec.min_history)
    return split_explorer(histories, spec)
