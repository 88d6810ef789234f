"""Interaction logs, item catalogs and the fixed-length sequences built from them."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from collections.abc import Collection, Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import EmptyCatalog, EmptyTrainSplit, MalformedRow
from .seeding import derive_rng, stable_int

log = logging.getLogger(__name__)

HISTORY_LEN = 10
FUTURE_LEN = 10
SEQUENCE_LEN = HISTORY_LEN + FUTURE_LEN
POSITIVE_THRESHOLD = 3.0

CATALOG_FORMATS = ("csv", "movielens", "steam")
INTERACTION_FORMATS = ("csv", "movielens", "steam")


@dataclass(frozen=True)
class Item:
    item_id: str
    title: str
    genres: tuple[str, ...]
    primary_genre: str = ""

    def __post_init__(self) -> None:
        if not self.genres:
            raise ValueError(f"item {self.item_id} has no genres")
        if not self.primary_genre:
            object.__setattr__(self, "primary_genre", primary_genre_of(self.genres))
        if self.primary_genre not in self.genres:
            raise ValueError(f"primary genre {self.primary_genre!r} not among {self.genres}")


def primary_genre_of(genres: Sequence[str]) -> str:
    # first-listed genre is the primary one (MovieLens convention)
    return genres[0]


@dataclass(frozen=True)
class GenreTaxonomy:
    names: tuple[str, ...]
    train_frequency: Mapping[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: object) -> bool:
        return name in self.names

    def distribution(self) -> dict[str, float]:
        return _normalize(self.train_frequency)


def item_sort_key(item_id: str) -> tuple[int, int, str]:
    """Ordering used wherever "lower item_id" is needed: numeric ids numerically."""
    if item_id.isdigit():
        return (0, int(item_id), item_id)
    return (1, 0, item_id)


class ItemCatalog:
    """Read-only store of items keyed by id."""

    def __init__(self, items: Iterable[Item]):
        self._items: dict[str, Item] = {}
        names: dict[str, None] = {}
        for item in items:
            if item.item_id in self._items:
                raise ValueError(f"duplicate item_id {item.item_id!r}")
            self._items[item.item_id] = item
            for g in item.genres:
                names.setdefault(g, None)
        if not self._items:
            raise EmptyCatalog("catalog contains no items")
        self._genres = tuple(names)
        self._by_genre: dict[str, list[str]] = defaultdict(list)
        for item in self._items.values():
            self._by_genre[item.primary_genre].append(item.item_id)
        for ids in self._by_genre.values():
            ids.sort(key=item_sort_key)

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, item_id: object) -> bool:
        return item_id in self._items

    def __getitem__(self, item_id: str) -> Item:
        return self._items[item_id]

    def __iter__(self) -> Iterator[Item]:
        return iter(self._items.values())

    @property
    def genres(self) -> tuple[str, ...]:
        """Every genre name seen in the catalog, in first-seen order."""
        return self._genres

    @property
    def primary_genres(self) -> tuple[str, ...]:
        return tuple(g for g in self._genres if g in self._by_genre)

    def ids(self) -> list[str]:
        return list(self._items)

    def title(self, item_id: str) -> str:
        return self._items[item_id].title

    def genre(self, item_id: str) -> str:
        return self._items[item_id].primary_genre

    def items_of_genre(self, genre: str) -> list[str]:
        return list(self._by_genre.get(genre, ()))

    def taxonomy(self, train_frequency: Mapping[str, int] | None = None) -> GenreTaxonomy:
        freq = {g: 0 for g in self._genres}
        if train_frequency:
            freq.update(train_frequency)
        return GenreTaxonomy(self._genres, freq)


# -- catalog ingestion -------------------------------------------------------


def _read_text_lines(path: Path) -> list[str]:
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        text = raw.decode("latin-1")
    return text.splitlines()


def _make_item(row: int, item_id: str, title: str, genres: Sequence[str]) -> Item:
    item_id = str(item_id).strip()
    title = str(title).strip()
    genres = tuple(g.strip() for g in genres if g and g.strip())
    if not item_id:
        raise MalformedRow(row, "missing item id")
    if not title:
        raise MalformedRow(row, "missing title")
    if not genres:
        raise MalformedRow(row, "no genres")
    return Item(item_id, title, genres)


def _catalog_rows_csv(path: Path) -> Iterator[Item]:
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"item_id", "title", "genres"} - set(reader.fieldnames or ())
        if missing:
            raise MalformedRow(0, f"header lacks {sorted(missing)}")
        for i, rec in enumerate(reader, start=1):
            if None in rec.values():
                raise MalformedRow(i, "too few columns")
            yield _make_item(i, rec["item_id"], rec["title"], rec["genres"].split("|"))


def _catalog_rows_movielens(path: Path) -> Iterator[Item]:
    for i, line in enumerate(_read_text_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 3:
            raise MalformedRow(i, f"expected 3 '::' fields, got {len(parts)}")
        yield _make_item(i, parts[0], parts[1], parts[2].split("|"))


def _catalog_rows_steam(path: Path) -> Iterator[Item]:
    for i, line in enumerate(_read_text_lines(path), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRow(i, f"invalid JSON: {exc.msg}") from None
        title = rec.get("title") or rec.get("app_name") or ""
        genres = rec.get("genres") or []
        if isinstance(genres, str):
            genres = genres.split("|")
        yield _make_item(i, rec.get("id", ""), title, genres)


_CATALOG_READERS = {
    "csv": _catalog_rows_csv,
    "movielens": _catalog_rows_movielens,
    "steam": _catalog_rows_steam,
}


def load_catalog(items_path: str | Path, format: str = "csv") -> ItemCatalog:
    """Load item metadata; ``format`` is one of ``csv``, ``movielens``, ``steam``."""
    if format not in _CATALOG_READERS:
        raise ValueError(f"unknown catalog format {format!r}")
    items = list(_CATALOG_READERS[format](Path(items_path)))
    if not items:
        raise EmptyCatalog(f"{items_path} has no items")
    return ItemCatalog(items)


def write_catalog_csv(catalog: ItemCatalog, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item_id", "title", "genres"])
        for item in catalog:
            writer.writerow([item.item_id, item.title, "|".join(item.genres)])


# -- interactions ------------------------------------------------------------


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    value: float
    timestamp: int


def _interactions_csv(path: Path) -> Iterator[Interaction]:
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for i, rec in enumerate(reader, start=1):
            try:
                yield Interaction(
                    rec["user_id"].strip(), rec["item_id"].strip(),
                    float(rec["value"]), int(float(rec["timestamp"])),
                )
            except (KeyError, TypeError, ValueError, AttributeError) as exc:
                raise MalformedRow(i, str(exc)) from None


def _interactions_movielens(path: Path) -> Iterator[Interaction]:
    for i, line in enumerate(_read_text_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 4:
            raise MalformedRow(i, f"expected 4 '::' fields, got {len(parts)}")
        try:
            yield Interaction(parts[0], parts[1], float(parts[2]), int(parts[3]))
        except ValueError as exc:
            raise MalformedRow(i, str(exc)) from None


def _steam_timestamp(rec: dict) -> int:
    if "timestamp" in rec:
        return int(rec["timestamp"])
    day = datetime.strptime(str(rec["date"]), "%Y-%m-%d").replace(tzinfo=timezone.utc)
    return int(day.timestamp())


def _interactions_steam(path: Path) -> Iterator[Interaction]:
    for i, line in enumerate(_read_text_lines(path), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            user = rec.get("user_id") or rec.get("username")
            item = rec.get("item_id") or rec.get("product_id")
            hours = rec.get("hours", rec.get("value"))
            if user is None or item is None or hours is None:
                raise ValueError("missing user/item/hours")
            yield Interaction(str(user), str(item), float(hours), _steam_timestamp(rec))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise MalformedRow(i, str(exc)) from None


_INTERACTION_READERS = {
    "csv": _interactions_csv,
    "movielens": _interactions_movielens,
    "steam": _interactions_steam,
}


def load_interactions(path: str | Path, format: str = "csv") -> list[Interaction]:
    if format not in _INTERACTION_READERS:
        raise ValueError(f"unknown interaction format {format!r}")
    return list(_INTERACTION_READERS[format](Path(path)))


def write_interactions_csv(interactions: Iterable[Interaction], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user_id", "item_id", "value", "timestamp"])
        for it in interactions:
            writer.writerow([it.user_id, it.item_id, repr(float(it.value)), it.timestamp])


def filter_positive(interactions: Iterable[Interaction], policy: str = "rating") -> list[Interaction]:
    """Keep interactions strictly above 3 (stars for ``rating``, hours for ``playtime``)."""
    if policy not in ("rating", "playtime"):
        raise ValueError(f"unknown positivity policy {policy!r}")
    return [it for it in interactions if it.value > POSITIVE_THRESHOLD]


def join_catalog(interactions: Iterable[Interaction], catalog: ItemCatalog) -> list[Interaction]:
    """Drop interactions whose item is missing from the catalog."""
    return [it for it in interactions if it.item_id in catalog]


# -- sequences ---------------------------------------------------------------


@dataclass(frozen=True)
class Step:
    item_id: str
    ts: int


@dataclass(frozen=True)
class InteractionSequence:
    user_id: str
    history: tuple[Step, ...]
    future: tuple[Step, ...]

    def __post_init__(self) -> None:
        if len(self.history) != HISTORY_LEN or len(self.future) != FUTURE_LEN:
            raise ValueError(
                f"sequence needs {HISTORY_LEN}+{FUTURE_LEN} steps, "
                f"got {len(self.history)}+{len(self.future)}"
            )
        ts = [s.ts for s in self.history + self.future]
        if any(a > b for a, b in zip(ts, ts[1:])):
            raise ValueError("sequence timestamps are not nondecreasing")

    @property
    def history_ids(self) -> list[str]:
        return [s.item_id for s in self.history]

    @property
    def future_ids(self) -> list[str]:
        return [s.item_id for s in self.future]

    @cached_property
    def key(self) -> str:
        """Stable identifier derived from the sequence contents."""
        return f"{self.user_id}-{stable_int(self.to_json()):016x}"

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "history": [{"item_id": s.item_id, "ts": s.ts} for s in self.history],
            "future": [{"item_id": s.item_id, "ts": s.ts} for s in self.future],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_dict(cls, rec: Mapping) -> "InteractionSequence":
        return cls(
            str(rec["user_id"]),
            tuple(Step(str(s["item_id"]), int(s["ts"])) for s in rec["history"]),
            tuple(Step(str(s["item_id"]), int(s["ts"])) for s in rec["future"]),
        )


def build_sequences(interactions: Iterable[Interaction]) -> list[InteractionSequence]:
    """Slide a 20-long window (stride 1) over each user's chronological trail."""
    by_user: dict[str, list[Interaction]] = defaultdict(list)
    for it in interactions:
        by_user[it.user_id].append(it)
    out: list[InteractionSequence] = []
    for user, events in by_user.items():
        events = sorted(events, key=lambda e: e.timestamp)  # stable on ties
        steps = [Step(e.item_id, e.timestamp) for e in events]
        for start in range(len(steps) - SEQUENCE_LEN + 1):
            window = steps[start : start + SEQUENCE_LEN]
            out.append(InteractionSequence(user, tuple(window[:HISTORY_LEN]), tuple(window[HISTORY_LEN:])))
    return out


@dataclass
class DatasetSplit:
    train: list[InteractionSequence]
    validation: list[InteractionSequence]
    test: list[InteractionSequence]
    metadata: dict = field(default_factory=dict)

    SPLITS = ("train", "validation", "test")

    def __getitem__(self, name: str) -> list[InteractionSequence]:
        if name not in self.SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def sizes(self) -> dict[str, int]:
        return {name: len(self[name]) for name in self.SPLITS}

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in self.SPLITS:
            write_sequences(self[name], directory / f"{name}.jsonl")
        (directory / "metadata.json").write_text(
            json.dumps(self.metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, directory: str | Path) -> "DatasetSplit":
        directory = Path(directory)
        meta_path = directory / "metadata.json"
        meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
        return cls(*(read_sequences(directory / f"{name}.jsonl") for name in cls.SPLITS), metadata=meta)


def write_sequences(sequences: Iterable[InteractionSequence], path: str | Path) -> int:
    n = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for seq in sequences:
            fh.write(seq.to_json() + "\n")
            n += 1
    return n


def read_sequences(path: str | Path) -> list[InteractionSequence]:
    with Path(path).open(encoding="utf-8") as fh:
        return [InteractionSequence.from_dict(json.loads(line)) for line in fh if line.strip()]


def _chrono_key(seq: InteractionSequence) -> tuple:
    return (seq.future[-1].ts, seq.user_id, seq.history[0].ts)


def _partition_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    # largest-remainder rounding; ties favour the earlier split
    total = float(sum(ratios))
    exact = [n * r / total for r in ratios]
    sizes = [int(np.floor(x)) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_and_sample(
    sequences: Sequence[InteractionSequence],
    ratios: Sequence[float] = (8, 1, 1),
    n_per_split: int | None = 1000,
    seed: int = 0,
) -> DatasetSplit:
    """Chronological 8:1:1 partition, then uniform subsampling of each part.

    Sampled sequences keep their chronological order. ``n_per_split=None``
    disables sampling.
    """
    if len(ratios) != 3:
        raise ValueError("ratios must have three entries")
    ordered = sorted(sequences, key=_chrono_key)
    sizes = _partition_sizes(len(ordered), ratios)
    bounds = np.cumsum([0] + sizes)
    parts = [ordered[bounds[i] : bounds[i + 1]] for i in range(3)]
    sampled = []
    for name, part in zip(DatasetSplit.SPLITS, parts):
        if n_per_split is None or n_per_split >= len(part):
            sampled.append(list(part))
            continue
        rng = derive_rng(seed, "split-sample", name)
        idx = np.sort(rng.choice(len(part), size=n_per_split, replace=False))
        sampled.append([part[i] for i in idx])
    metadata = {
        "ratios": list(ratios),
        "n_per_split": n_per_split,
        "sampling": "per-split",
        "seed": seed,
        "partition_sizes": dict(zip(DatasetSplit.SPLITS, sizes)),
    }
    return DatasetSplit(*sampled, metadata=metadata)


# -- training-set distributions ---------------------------------------------


def _normalize(counts: Mapping[str, float]) -> dict[str, float]:
    total = float(sum(counts.values()))
    if total <= 0:
        return {k: 0.0 for k in counts}
    return {k: v / total for k, v in counts.items()}


def genre_counts(train: Sequence[InteractionSequence], catalog: ItemCatalog) -> Counter:
    counts: Counter = Counter()
    for seq in train:
        for step in seq.future:
            counts[catalog.genre(step.item_id)] += 1
    return counts


def genre_distribution(train: Sequence[InteractionSequence], catalog: ItemCatalog) -> dict[str, float]:
    """Primary-genre frequencies over all future slots of the training split, normalized."""
    if not train:
        raise EmptyTrainSplit("training split is empty")
    counts = genre_counts(train, catalog)
    return _normalize(dict(sorted(counts.items())))


class ItemDistribution(Mapping):
    """genre -> {item_id -> probability within that genre}, backed by raw counts."""

    def __init__(self, counts: Mapping[str, Mapping[str, int]]):
        self.counts: dict[str, dict[str, int]] = {
            g: dict(sorted(c.items(), key=lambda kv: item_sort_key(kv[0])))
            for g, c in sorted(counts.items())
            if c
        }
        self._probs = {g: _normalize(c) for g, c in self.counts.items()}
        self._owner = {i: g for g, c in self.counts.items() for i in c}
        self._ids = {g: list(c) for g, c in self.counts.items()}
        self._cum = {g: np.cumsum(np.fromiter(c.values(), dtype=float)) for g, c in self.counts.items()}
        self._genres = list(self.counts)
        self._totals = np.array([self._cum[g][-1] for g in self._genres])

    def __getitem__(self, genre: str) -> dict[str, float]:
        return self._probs[genre]

    def __iter__(self) -> Iterator[str]:
        return iter(self._probs)

    def __len__(self) -> int:
        return len(self._probs)

    def genre_of(self, item_id: str) -> str | None:
        return self._owner.get(item_id)

    def _draw_within(self, rng: np.random.Generator, genre: str) -> str:
        cum = self._cum[genre]
        return self._ids[genre][int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))]

    def sample(
        self,
        rng: np.random.Generator,
        genre: str | None = None,
        exclude_genre: str | None = None,
        avoid: Collection[str] = (),
        tries: int = 32,
    ) -> str | None:
        """Draw an item by training frequency.

        ``genre`` restricts the draw to one genre, ``exclude_genre`` removes
        one.  Items in ``avoid`` are rejected; after ``tries`` misses the draw
        is made exactly over the remaining support, and only if that is empty
        is an avoided item returned.  Returns None when the support is empty.
        """
        if genre is not None:
            if genre not in self._cum or genre == exclude_genre:
                return None
            genres, weights = [genre], np.ones(1)
        else:
            mask = np.array([g != exclude_genre for g in self._genres])
            if not mask.any():
                return None
            genres = self._genres
            weights = np.where(mask, self._totals, 0.0)
        cum = np.cumsum(weights)
        item = None
        for _ in range(tries):
            g = genres[int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))]
            item = self._draw_within(rng, g)
            if item not in avoid:
                return item
        allowed = [g for g, w in zip(genres, weights) if w > 0]
        pool = [(i, c) for g in allowed for i, c in self.counts[g].items() if i not in avoid]
        if not pool:
            return item
        w = np.cumsum([c for _, c in pool], dtype=float)
        return pool[int(np.searchsorted(w, rng.random() * w[-1], side="right"))][0]


def item_distribution(train: Sequence[InteractionSequence], catalog: ItemCatalog) -> ItemDistribution:
    """Future-slot item frequencies of the training split, grouped by primary genre."""
    if not train:
        raise EmptyTrainSplit("training split is empty")
    counts: dict[str, Counter] = defaultdict(Counter)
    for seq in train:
        for step in seq.future:
            counts[catalog.genre(step.item_id)][step.item_id] += 1
    return ItemDistribution(counts)


def future_genres(seq: InteractionSequence, catalog: ItemCatalog) -> list[str]:
    return [catalog.genre(i) for i in seq.future_ids]


def genres_by_frequency(genres: Sequence[str]) -> list[str]:
    """Distinct genres, most frequent first, ties by first occurrence."""
    counts = Counter(genres)
    first = {}
    for i, g in enumerate(genres):
        first.setdefault(g, i)
    return sorted(counts, key=lambda g: (-counts[g], first[g]))
