"""Rendering and parsing of the GP / GF / IP prompts and the baseline prompts.

GF and IP share a constrained *trail* format: every slot is an item in
double quotes followed by its genre in single quotes, e.g.
``"Stargate (1994)" 'Action', "_" '?'``.  ``?`` marks a value to predict and
``_`` a value to ignore.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .data import FUTURE_LEN, HISTORY_LEN, InteractionSequence, ItemCatalog
from .errors import (
    EmptyTargets,
    IoFailure,
    KOutOfRange,
    NoRecognizableGenre,
    TrailMismatch,
    WrongGenreCount,
)

MAX_K = 10
N_RECOMMEND = 10


class Task(str, enum.Enum):
    GP = "GP"
    GF = "GF"
    IP = "IP"
    BIGREC_DIV = "BIGREC_DIV"
    BIGREC_COT_STAGE1 = "BIGREC_COT_STAGE1"
    BIGREC_COT_STAGE2 = "BIGREC_COT_STAGE2"


_TEMPLATE_FILES = {
    Task.GP: ("gp.instruction.txt", "gp.input.txt"),
    Task.GF: ("gf.instruction.txt", "trail.input.txt"),
    Task.IP: ("ip.instruction.txt", "trail.input.txt"),
    Task.BIGREC_DIV: ("bigrec_div.instruction.txt", "gp.input.txt"),
    Task.BIGREC_COT_STAGE1: ("bigrec_cot_stage1.instruction.txt", "gp.input.txt"),
    Task.BIGREC_COT_STAGE2: ("bigrec_cot_stage2.instruction.txt", "gp.input.txt"),
}

# noun, plural, verb
DOMAINS = {
    "movie": ("movie", "movies", "watched"),
    "game": ("game", "games", "played"),
}


@lru_cache(maxsize=None)
def _template(name: str) -> str:
    return resources.files("dlcrec").joinpath("templates", name).read_text(encoding="utf-8")


@lru_cache(maxsize=1)
def template_version() -> str:
    """Digest over every template asset; changes whenever any template text does."""
    h = hashlib.sha256()
    names = sorted({n for pair in _TEMPLATE_FILES.values() for n in pair} | {"prompt.txt"})
    for name in names:
        h.update(name.encode())
        h.update(_template(name).encode("utf-8"))
    return "tpl-" + h.hexdigest()[:12]


@dataclass(frozen=True)
class InstructionSample:
    instruction: str
    input: str
    output: str
    task: Task

    def __post_init__(self) -> None:
        if not (self.instruction and self.input and self.output):
            raise ValueError("instruction, input and output must all be nonempty")

    def to_record(self) -> dict[str, str]:
        return {"instruction": self.instruction, "input": self.input, "output": self.output}


@dataclass(frozen=True)
class Prompt:
    """A rendered instruction/input pair; ``text`` is what gets sent to a model."""

    task: Task
    instruction: str
    input: str

    @property
    def text(self) -> str:
        return _template("prompt.txt").format(instruction=self.instruction, input=self.input)

    def __str__(self) -> str:
        return self.text

    def with_output(self, output: str) -> InstructionSample:
        return InstructionSample(self.instruction, self.input, output, self.task)


def _render(task: Task, domain: str, **fields) -> Prompt:
    noun, plural, verb = DOMAINS[domain]
    common = {"item": noun, "items": plural, "verb": verb}
    instr_name, input_name = _TEMPLATE_FILES[task]
    return Prompt(
        task,
        _template(instr_name).format(**common, **fields),
        _template(input_name).format(**common, **fields),
    )


# -- trail -------------------------------------------------------------------


class Marker(str, enum.Enum):
    HOLE = "?"
    IRRELEVANT = "_"


SlotValue = str | Marker


@dataclass(frozen=True)
class Slot:
    item: SlotValue
    genre: SlotValue

    def render(self) -> str:
        item = self.item.value if isinstance(self.item, Marker) else self.item
        genre = self.genre.value if isinstance(self.genre, Marker) else self.genre
        return f"\"{item}\" '{genre}'"


@dataclass(frozen=True)
class Trail:
    slots: tuple[Slot, ...]

    def __post_init__(self) -> None:
        if len(self.slots) != HISTORY_LEN + FUTURE_LEN:
            raise ValueError(f"trail needs {HISTORY_LEN + FUTURE_LEN} slots, got {len(self.slots)}")
        for s in self.slots[:HISTORY_LEN]:
            if s.item is Marker.HOLE or s.genre is Marker.HOLE:
                raise ValueError("history slots cannot contain holes")

    @classmethod
    def build(cls, history: Sequence[tuple[str, str]], future: Iterable[tuple[SlotValue, SlotValue]]) -> "Trail":
        slots = [Slot(t, g) for t, g in history] + [Slot(i, g) for i, g in future]
        return cls(tuple(slots))

    def render(self) -> str:
        return ", ".join(s.render() for s in self.slots)

    @property
    def future(self) -> tuple[Slot, ...]:
        return self.slots[HISTORY_LEN:]


_QUOTE_FIXES = str.maketrans({"“": '"', "”": '"', "‘": "'", "’": "'"})

# a title may contain '"' as long as it is not the closing quote before the genre tag
_SLOT_RE = re.compile(r"\"((?:[^\"]|\"(?!\s*'))*)\"\s*'((?:[^']|'(?!\s*(?:,|$)))*)'", re.MULTILINE)


def _clean(token: str) -> str:
    return " ".join(token.split())


def parse_trail(text: str) -> list[tuple[str, str]]:
    """All ``"item" 'genre'`` slots in ``text``, whitespace-normalized."""
    text = text.translate(_QUOTE_FIXES)
    return [(_clean(m.group(1)), _clean(m.group(2))) for m in _SLOT_RE.finditer(text)]


def prompt_sections(text: str) -> tuple[str, str]:
    """Split a rendered prompt back into (instruction, input)."""
    head, sep, tail = text.partition("### Input:\n")
    if not sep:
        return "", text
    instruction = head.partition("### Instruction:\n")[2].rstrip("\n")
    return instruction, tail.partition("\n\n### Response:")[0]


def _future_slots(text: str) -> list[tuple[str, str]]:
    slots = parse_trail(text)
    if len(slots) < FUTURE_LEN:
        raise TrailMismatch(f"found {len(slots)} trail slots, need at least {FUTURE_LEN}")
    return slots[-FUTURE_LEN:]


# -- genre normalization -----------------------------------------------------


def within_one_edit(a: str, b: str) -> bool:
    """True when the Levenshtein distance between a and b is at most 1."""
    if a == b:
        return True
    la, lb = len(a), len(b)
    if abs(la - lb) > 1:
        return False
    if la > lb:
        a, b, la, lb = b, a, lb, la
    i = 0
    while i < la and a[i] == b[i]:
        i += 1
    if la == lb:
        return a[i + 1 :] == b[i + 1 :]
    return a[i:] == b[i + 1 :]


_STRIP_CHARS = " \t\r\n\"'`.*:;[]"
_ENUM_RE = re.compile(r"^\s*(?:\d+[.)]|[-*])\s*")


def normalize_genre(token: str, taxonomy: Sequence[str]) -> str | None:
    """Map a generated token to a taxonomy name (case-insensitive, one typo allowed)."""
    t = _ENUM_RE.sub("", token).strip(_STRIP_CHARS).casefold()
    t = " ".join(t.split())
    if not t:
        return None
    folded = [(name, name.casefold()) for name in taxonomy]
    for name, f in folded:
        if f == t:
            return name
    for name, f in folded:
        if within_one_edit(t, f):
            return name
    return None


def draw_genres(
    rng: np.random.Generator,
    weights: Mapping[str, float] | None,
    exclude: Iterable[str],
    m: int,
    taxonomy: Sequence[str],
) -> list[str]:
    """Draw ``m`` distinct genres outside ``exclude``, weighted by ``weights``.

    Genres with zero weight are used (uniformly) only once the weighted
    support is exhausted.
    """
    excluded = set(exclude)
    pool = [g for g in taxonomy if g not in excluded]
    if m > len(pool):
        raise ValueError(f"cannot draw {m} new genres from {len(pool)} candidates")
    weights = weights or {}
    weighted = [g for g in pool if weights.get(g, 0.0) > 0]
    picked: list[str] = []
    if weighted and m > 0:
        take = min(m, len(weighted))
        p = np.array([weights[g] for g in weighted], dtype=float)
        idx = rng.choice(len(weighted), size=take, replace=False, p=p / p.sum())
        picked = [weighted[i] for i in idx]
    rest = [g for g in pool if g not in picked and g not in weighted]
    if len(picked) < m:
        idx = rng.choice(len(rest), size=m - len(picked), replace=False)
        picked += [rest[i] for i in idx]
    return picked


# -- GP ----------------------------------------------------------------------


def history_pairs(seq: InteractionSequence, catalog: ItemCatalog) -> list[tuple[str, str]]:
    return [(catalog.title(i), catalog.genre(i)) for i in seq.history_ids]


def _check_k(k: int, n_genres: int | None) -> None:
    upper = MAX_K if n_genres is None else min(MAX_K, n_genres)
    if not 1 <= k <= upper:
        raise KOutOfRange(f"k={k} outside [1, {upper}]")


def _history_text(history: Sequence[tuple[str, str]]) -> str:
    return ", ".join(f'"{title}" ({genre})' for title, genre in history)


def render_gp(
    history: Sequence[tuple[str, str]],
    k: int,
    taxonomy: Sequence[str] | None = None,
    domain: str = "movie",
) -> Prompt:
    _check_k(k, None if taxonomy is None else len(taxonomy))
    return _render(Task.GP, domain, k=k, history=_history_text(history))


def format_genres(genres: Iterable[str]) -> str:
    return ", ".join(genres)


def parse_gp(
    text: str,
    taxonomy: Sequence[str],
    k: int,
    fill: Mapping[str, float] | None = None,
    rng: np.random.Generator | None = None,
) -> list[str]:
    """Genres from a GP completion, deduplicated and cut to ``k``.

    With ``fill`` (a training genre distribution) short answers are padded to
    exactly ``k`` by sampling without replacement; ``rng`` defaults to one
    seeded from the text itself.
    """
    genres: list[str] = []
    for token in re.split(r"[,\n;]", text):
        name = normalize_genre(token, taxonomy)
        if name is not None and name not in genres:
            genres.append(name)
    if not genres:
        raise NoRecognizableGenre(f"no taxonomy genre in {text[:80]!r}")
    genres = genres[:k]
    if len(genres) < k and fill is not None:
        if rng is None:
            rng = np.random.default_rng(int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "big"))
        genres += draw_genres(rng, fill, genres, min(k, len(taxonomy)) - len(genres), taxonomy)
    return genres


# -- GF ----------------------------------------------------------------------


def render_gf(
    history: Sequence[tuple[str, str]],
    target_genres: Sequence[str],
    taxonomy: Sequence[str] | None = None,
    domain: str = "movie",
) -> Prompt:
    if not target_genres:
        raise EmptyTargets("GF needs at least one target genre")
    if taxonomy is not None:
        unknown = [g for g in target_genres if g not in taxonomy]
        if unknown:
            raise ValueError(f"target genres not in taxonomy: {unknown}")
    trail = Trail.build(history, [(Marker.IRRELEVANT, Marker.HOLE)] * FUTURE_LEN)
    return _render(Task.GF, domain, targets=format_genres(target_genres), trail=trail.render())


def gf_output(history: Sequence[tuple[str, str]], future_genres: Sequence[str]) -> str:
    """The completion a perfect GF model produces for ``future_genres``."""
    return Trail.build(history, [(Marker.IRRELEVANT, g) for g in future_genres]).render()


def parse_gf(text: str, taxonomy: Sequence[str] | None = None) -> list[str]:
    """The 10 future-slot genres of a GF completion.

    Tokens that do not normalize into ``taxonomy`` are returned verbatim so
    the caller can repair them.
    """
    out = []
    for _, genre in _future_slots(text):
        if taxonomy is not None:
            genre = normalize_genre(genre, taxonomy) or genre
        out.append(genre)
    return out


def repair_gf(genres: Sequence[str], targets: Sequence[str]) -> tuple[list[str], list[int]]:
    """Force a GF answer onto the target set.

    Off-target slots go to the least-represented target (ties by target
    order).  Targets still missing afterwards take one slot from the most
    frequent target.  Returns the repaired list and the changed positions.
    """
    targets = list(dict.fromkeys(targets))
    out = list(genres)
    counts = Counter(g for g in out if g in targets)
    changed: list[int] = []
    order = {g: i for i, g in enumerate(targets)}
    for i, g in enumerate(out):
        if g not in order:
            best = min(targets, key=lambda t: (counts[t], order[t]))
            out[i] = best
            counts[best] += 1
            changed.append(i)
    for missing in targets:
        if counts[missing] > 0:
            continue
        donor = max(targets, key=lambda t: (counts[t], -order[t]))
        if counts[donor] < 2:
            break  # more targets than slots
        pos = max(i for i, g in enumerate(out) if g == donor)
        out[pos] = missing
        counts[donor] -= 1
        counts[missing] += 1
        if pos not in changed:
            changed.append(pos)
    return out, sorted(changed)


# -- IP ----------------------------------------------------------------------


def render_ip(
    history: Sequence[tuple[str, str]],
    future_genres: Sequence[str],
    domain: str = "movie",
) -> Prompt:
    if len(future_genres) != FUTURE_LEN:
        raise WrongGenreCount(f"IP needs {FUTURE_LEN} future genres, got {len(future_genres)}")
    trail = Trail.build(history, [(Marker.HOLE, g) for g in future_genres])
    return _render(Task.IP, domain, trail=trail.render())


def ip_output(history: Sequence[tuple[str, str]], future: Sequence[tuple[str, str]]) -> str:
    return Trail.build(history, future).render()


def parse_ip(text: str) -> list[tuple[str, str]]:
    """The 10 future ``(raw title, genre tag)`` pairs of an IP completion."""
    return _future_slots(text)


# -- baselines ---------------------------------------------------------------


def render_baseline(
    kind: Task | str,
    history: Sequence[tuple[str, str]],
    k: int | None = None,
    genres: Sequence[str] | None = None,
    taxonomy: Sequence[str] | None = None,
    domain: str = "movie",
) -> Prompt:
    kind = Task(kind)
    history_text = _history_text(history)
    if kind in (Task.BIGREC_DIV, Task.BIGREC_COT_STAGE1):
        if k is None:
            raise KOutOfRange("k is required")
        _check_k(k, None if taxonomy is None else len(taxonomy))
        return _render(kind, domain, k=k, history=history_text)
    if kind is Task.BIGREC_COT_STAGE2:
        if not genres:
            raise EmptyTargets("CoT stage 2 needs the stage-1 genres")
        return _render(kind, domain, genres=format_genres(genres), history=history_text)
    raise ValueError(f"{kind} is not a baseline task")


def item_list_output(titles: Iterable[str]) -> str:
    return ", ".join(f'"{t}"' for t in titles)


_ITEM_RE = re.compile(r"\"((?:[^\"]|\"(?!\s*(?:,|$)))*)\"", re.MULTILINE)


def parse_item_list(text: str) -> list[str]:
    """Quoted titles of a baseline completion, in order."""
    text = text.translate(_QUOTE_FIXES).strip()
    return [t for t in (_clean(m.group(1)) for m in _ITEM_RE.finditer(text)) if t]


# -- training samples --------------------------------------------------------


def export_sft(samples: Iterable[InstructionSample], path: str | Path) -> int:
    """Write alpaca-style JSON-lines; returns the number of records."""
    n = 0
    try:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            for sample in samples:
                fh.write(json.dumps(sample.to_record(), ensure_ascii=False) + "\n")
                n += 1
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return n


def load_sft(path: str | Path) -> list[dict[str, str]]:
    try:
        with Path(path).open(encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
