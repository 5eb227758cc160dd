"""MovieLens ingestion: raw file parsing, positive-feedback filtering and the
global temporal train/test split.

Two raw layouts are understood:

* ``ml100k``: ``u.data`` (``user\\titem\\trating\\ttimestamp``) and ``u.item``
  (pipe separated, the last 19 fields are genre flags, first flag "unknown").
* ``ml1m``: ``ratings.dat`` (``user::item::rating::timestamp``) and
  ``movies.dat`` (``item::title::Genre1|Genre2``).

The preprocessed result can be written to a line-based snapshot so that later
stages never touch the raw files again (see :func:`write_snapshot`).
"""

from __future__ import annotations

import dataclasses
import io
import os
import pathlib
from typing import Iterator, NamedTuple, Sequence

import numpy as np

GENRES = (
    "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical",
    "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)
UNKNOWN = len(GENRES)  # own category index for genre-less / "unknown" movies
CATEGORY_NAMES = GENRES + ("unknown",)

SNAPSHOT_MAGIC = "divrec-snapshot"
SNAPSHOT_VERSION = 1

# Published reference counts after preprocessing: (users, items, interactions).
REFERENCE_STATS = {
    "ml100k": (716, 1374, 45447),
    "ml1m": (5218, 3467, 510940),
}


class ParseError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class RawRating(NamedTuple):
    user_id: int
    item_id: int
    rating: int
    timestamp: int


@dataclasses.dataclass(frozen=True)
class RatingTable:
    """Column store of raw ratings; behaves like a sequence of :class:`RawRating`."""

    user_id: np.ndarray
    item_id: np.ndarray
    rating: np.ndarray
    timestamp: np.ndarray

    def __len__(self) -> int:
        return len(self.user_id)

    def __getitem__(self, i: int) -> RawRating:
        return RawRating(int(self.user_id[i]), int(self.item_id[i]),
                         int(self.rating[i]), int(self.timestamp[i]))

    def __iter__(self) -> Iterator[RawRating]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_records(cls, records: Sequence[tuple[int, int, int, int]]) -> "RatingTable":
        arr = np.asarray(records, dtype=np.int64).reshape(-1, 4)
        for row, (_, _, rating, ts) in enumerate(arr):
            if not 1 <= rating <= 5 or ts < 0:
                raise ValueError(f"record {row}: invalid rating/timestamp {rating}/{ts}")
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(), arr[:, 3].copy())


@dataclasses.dataclass(frozen=True)
class CategoryTable:
    """``categories_of[i]`` is the frozenset of category indices of item ``i``.

    Keys are raw item ids straight out of the parser and dense item indices
    after :meth:`reindex`.
    """

    categories_of: dict
    names: tuple = CATEGORY_NAMES

    def __getitem__(self, item) -> frozenset:
        return self.categories_of[item]

    def __len__(self) -> int:
        return len(self.categories_of)

    def reindex(self, item_ids: np.ndarray) -> "CategoryTable":
        return CategoryTable({dense: self.categories_of.get(int(raw), frozenset([UNKNOWN]))
                              for dense, raw in enumerate(item_ids)}, self.names)


@dataclasses.dataclass(frozen=True)
class InteractionLog:
    """Time-ordered positive events with dense user/item indices."""

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_count: int
    item_count: int

    def __len__(self) -> int:
        return len(self.users)

    def items_by_user(self) -> list[np.ndarray]:
        """Per-user item sequences, each in time order."""
        order = np.argsort(self.users, kind="stable")
        bounds = np.searchsorted(self.users[order], np.arange(self.user_count + 1))
        items = self.items[order]
        return [items[bounds[u]:bounds[u + 1]] for u in range(self.user_count)]


@dataclasses.dataclass(frozen=True)
class TemporalSplit:
    train: InteractionLog
    test: InteractionLog
    split_fraction: float
    boundary: int  # global event index of the cut, over all positives
    n_positive: int

    @property
    def user_count(self) -> int:
        return self.train.user_count

    @property
    def item_count(self) -> int:
        return self.train.item_count


@dataclasses.dataclass(frozen=True)
class IdMaps:
    user_ids: np.ndarray  # dense index -> raw id
    item_ids: np.ndarray

    def user_index(self) -> dict:
        return {int(u): i for i, u in enumerate(self.user_ids)}

    def item_index(self) -> dict:
        return {int(v): i for i, v in enumerate(self.item_ids)}


@dataclasses.dataclass(frozen=True)
class Dataset:
    """Everything downstream stages need: split, id maps, dense categories."""

    variant: str
    split: TemporalSplit
    maps: IdMaps
    categories: CategoryTable
    drop_cold_test_items: bool = True
    min_train_positives: int = 10

    def stats(self) -> dict:
        n_inter = len(self.split.train) + len(self.split.test)
        stats = {
            "users": self.split.user_count,
            "items": self.split.item_count,
            "interactions": n_inter,
            "train_events": len(self.split.train),
            "test_events": len(self.split.test),
            "positives": self.split.n_positive,
            "boundary": self.split.boundary,
        }
        ref = REFERENCE_STATS.get(self.variant)
        if ref:
            ours = (stats["users"], stats["items"], n_inter)
            stats["reference"] = dict(zip(("users", "items", "interactions"), ref))
            stats["relative_deviation"] = {
                key: (o - r) / r for key, o, r in zip(("users", "items", "interactions"), ours, ref)
            }
        return stats


# ---------------------------------------------------------------------------
# parsing


def _read_lines(path: pathlib.Path, encoding: str = "latin-1") -> list[str]:
    with open(path, "r", encoding=encoding, newline="") as fh:
        return fh.read().splitlines()


def _parse_ratings(path: pathlib.Path, sep: str) -> RatingTable:
    cols = [[], [], [], []]
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split(sep)
        if len(parts) != 4:
            raise ParseError(path, lineno, f"expected 4 fields, got {len(parts)}")
        try:
            user, item, rating, ts = (int(p) for p in parts)
        except ValueError:
            raise ParseError(path, lineno, f"non-integer field in {line!r}") from None
        if not 1 <= rating <= 5:
            raise ParseError(path, lineno, f"rating {rating} outside 1..5")
        if ts < 0:
            raise ParseError(path, lineno, f"negative timestamp {ts}")
        for col, value in zip(cols, (user, item, rating, ts)):
            col.append(value)
    return RatingTable(*(np.asarray(c, dtype=np.int64) for c in cols))


def _parse_ml100k_items(path: pathlib.Path) -> CategoryTable:
    cats = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("|")
        if len(parts) < 20:
            raise ParseError(path, lineno, f"expected >= 20 fields, got {len(parts)}")
        flags = parts[-19:]
        if any(f not in ("0", "1") for f in flags):
            raise ParseError(path, lineno, "genre flags must be 0/1")
        try:
            item = int(parts[0])
        except ValueError:
            raise ParseError(path, lineno, f"bad movie id {parts[0]!r}") from None
        # flag 0 is "unknown"; flags 1..18 follow GENRES order
        genres = {g - 1 for g in range(1, 19) if flags[g] == "1"}
        if flags[0] == "1" or not genres:
            genres.add(UNKNOWN)
        cats[item] = frozenset(genres)
    return CategoryTable(cats)


def _parse_ml1m_movies(path: pathlib.Path) -> CategoryTable:
    lookup = {name: i for i, name in enumerate(GENRES)}
    cats = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 3:
            raise ParseError(path, lineno, f"expected 3 fields, got {len(parts)}")
        try:
            item = int(parts[0])
        except ValueError:
            raise ParseError(path, lineno, f"bad movie id {parts[0]!r}") from None
        genres = set()
        for name in filter(None, parts[2].split("|")):
            if name not in lookup:
                raise ParseError(path, lineno, f"unknown genre {name!r}")
            genres.add(lookup[name])
        cats[item] = frozenset(genres or {UNKNOWN})
    return CategoryTable(cats)


def parse_movielens(path, variant: str) -> tuple[RatingTable, CategoryTable]:
    """Parse a MovieLens-100K or -1M directory into ratings and categories."""
    path = pathlib.Path(path)
    if variant == "ml100k":
        files = (path / "u.data", path / "u.item")
        sep, item_parser = "\t", _parse_ml100k_items
    elif variant == "ml1m":
        files = (path / "ratings.dat", path / "movies.dat")
        sep, item_parser = "::", _parse_ml1m_movies
    else:
        raise ValueError(f"unknown dataset variant {variant!r}")
    for f in files:
        if not f.is_file():
            raise FileNotFoundError(f"missing MovieLens file: {f}")
    return _parse_ratings(files[0], sep), item_parser(files[1])


# ---------------------------------------------------------------------------
# preprocessing


def preprocess(ratings: RatingTable, split_fraction: float = 0.8,
               min_train_positives: int = 10,
               drop_cold_test_items: bool = True) -> tuple[TemporalSplit, IdMaps]:
    """Keep ratings > 3, split globally in time, drop users with too few train events.

    Events are ordered by ``(timestamp, user_id, item_id)``; the first
    ``floor(split_fraction * n)`` go to train. Users with fewer than
    ``min_train_positives`` train events are then removed from both sides.
    With ``drop_cold_test_items`` test events on items absent from the
    filtered train log are dropped as well (no learned features exist for
    them). Users and items are reindexed densely in ascending raw-id order.
    """
    if not 0.0 < split_fraction < 1.0:
        raise ValueError("split_fraction must lie in (0, 1)")
    keep = ratings.rating > 3
    users, items, ts = ratings.user_id[keep], ratings.item_id[keep], ratings.timestamp[keep]
    n = len(users)
    if n == 0:
        raise ValueError("no positive ratings (> 3) to split")
    order = np.lexsort((items, users, ts))
    users, items, ts = users[order], items[order], ts[order]

    boundary = int(np.floor(split_fraction * n))
    if boundary == 0:
        raise ValueError("split produces an empty train set")
    if boundary == n:
        raise ValueError("split produces an empty test set")

    tr_u, tr_i, tr_t = users[:boundary], items[:boundary], ts[:boundary]
    te_u, te_i, te_t = users[boundary:], items[boundary:], ts[boundary:]

    uniq, counts = np.unique(tr_u, return_counts=True)
    kept_users = uniq[counts >= min_train_positives]
    in_train = np.isin(tr_u, kept_users)
    in_test = np.isin(te_u, kept_users)
    tr_u, tr_i, tr_t = tr_u[in_train], tr_i[in_train], tr_t[in_train]
    te_u, te_i, te_t = te_u[in_test], te_i[in_test], te_t[in_test]
    if drop_cold_test_items:
        warm = np.isin(te_i, tr_i)
        te_u, te_i, te_t = te_u[warm], te_i[warm], te_t[warm]
    if len(tr_u) == 0:
        raise ValueError("no user has enough train positives")

    item_ids = np.unique(np.concatenate([tr_i, te_i]))
    user_ids = kept_users
    n_users, n_items = len(user_ids), len(item_ids)

    def log(u, i, t):
        return InteractionLog(np.searchsorted(user_ids, u), np.searchsorted(item_ids, i),
                              t.copy(), n_users, n_items)

    split = TemporalSplit(log(tr_u, tr_i, tr_t), log(te_u, te_i, te_t),
                          float(split_fraction), boundary, n)
    return split, IdMaps(user_ids, item_ids)


def load_dataset(path, variant: str, split_fraction: float = 0.8,
                 min_train_positives: int = 10,
                 drop_cold_test_items: bool = True) -> Dataset:
    ratings, categories = parse_movielens(path, variant)
    split, maps = preprocess(ratings, split_fraction, min_train_positives, drop_cold_test_items)
    return Dataset(variant, split, maps, categories.reindex(maps.item_ids),
                   drop_cold_test_items, min_train_positives)


# ---------------------------------------------------------------------------
# snapshot
#
# Line-based, ASCII, versioned. Layout:
#
#   divrec-snapshot 1
#   variant <name>
#   split_fraction <repr float>
#   min_train_positives <int>
#   drop_cold_test_items <0|1>
#   boundary <int> <n_positive>
#   categories <name>|<name>|...
#   users <n>          followed by one line of space separated raw ids
#   items <n>          followed by one line of raw ids, then n lines of
#                      comma separated category indices
#   train <n>          followed by n lines "user item timestamp" (dense)
#   test <n>           same


def dumps_snapshot(ds: Dataset) -> str:
    out = io.StringIO()
    s = ds.split
    out.write(f"{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}\n")
    out.write(f"variant {ds.variant}\n")
    out.write(f"split_fraction {s.split_fraction!r}\n")
    out.write(f"min_train_positives {ds.min_train_positives}\n")
    out.write(f"drop_cold_test_items {int(ds.drop_cold_test_items)}\n")
    out.write(f"boundary {s.boundary} {s.n_positive}\n")
    out.write("categories " + "|".join(ds.categories.names) + "\n")
    out.write(f"users {len(ds.maps.user_ids)}\n")
    out.write(" ".join(map(str, ds.maps.user_ids.tolist())) + "\n")
    out.write(f"items {len(ds.maps.item_ids)}\n")
    out.write(" ".join(map(str, ds.maps.item_ids.tolist())) + "\n")
    for i in range(len(ds.maps.item_ids)):
        out.write(",".join(map(str, sorted(ds.categories[i]))) + "\n")
    for name, log in (("train", s.train), ("test", s.test)):
        out.write(f"{name} {len(log)}\n")
        for u, i, t in zip(log.users.tolist(), log.items.tolist(), log.timestamps.tolist()):
            out.write(f"{u} {i} {t}\n")
    return out.getvalue()


def loads_snapshot(text: str) -> Dataset:
    lines = iter(text.splitlines())

    def field(name):
        key, _, value = next(lines).partition(" ")
        if key != name:
            raise ValueError(f"snapshot: expected {name!r}, found {key!r}")
        return value

    magic = field(SNAPSHOT_MAGIC)
    if int(magic) != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {magic}")
    variant = field("variant")
    fraction = float(field("split_fraction"))
    min_pos = int(field("min_train_positives"))
    drop_cold = bool(int(field("drop_cold_test_items")))
    boundary, n_positive = map(int, field("boundary").split())
    names = tuple(field("categories").split("|"))
    n_users = int(field("users"))
    user_ids = np.array(next(lines).split(), dtype=np.int64)
    n_items = int(field("items"))
    item_ids = np.array(next(lines).split(), dtype=np.int64)
    cats = {i: frozenset(int(c) for c in next(lines).split(",")) for i in range(n_items)}
    assert len(user_ids) == n_users and len(item_ids) == n_items

    def read_log(name):
        n = int(field(name))
        arr = np.loadtxt(io.StringIO("\n".join(next(lines) for _ in range(n))),
                         dtype=np.int64, ndmin=2).reshape(n, 3)
        return InteractionLog(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(),
                              n_users, n_items)

    split = TemporalSplit(read_log("train"), read_log("test"), fraction, boundary, n_positive)
    return Dataset(variant, split, IdMaps(user_ids, item_ids), CategoryTable(cats, names),
                   drop_cold, min_pos)


def write_snapshot(ds: Dataset, path) -> None:
    path = pathlib.Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps_snapshot(ds), encoding="ascii")
    os.replace(tmp, path)


def read_snapshot(path) -> Dataset:
    return loads_snapshot(pathlib.Path(path).read_text(encoding="ascii"))
