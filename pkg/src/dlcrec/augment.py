"""GF-N / GF-D / IP-N / IP-D data augmentation and corpus assembly.

Each strategy is a pure function of (sample, seed): the RNG stream is
derived from the global seed, the base sequence key and the strategy tag.
"""

from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from . import codec
from .codec import InstructionSample, Task
from .data import (
    FUTURE_LEN,
    InteractionSequence,
    ItemCatalog,
    ItemDistribution,
    future_genres,
    genres_by_frequency,
)
from .errors import DistributionGap, TaxonomyExhausted
from .seeding import derive_rng

log = logging.getLogger(__name__)

STRATEGIES = ("GF-N", "GF-D", "IP-N", "IP-D")


@dataclass(frozen=True)
class AugmentConfig:
    seed: int = 0
    error_rate_r: float = 0.3
    nc_range: tuple[int, int] = (1, 10)
    mix: tuple[str, ...] = STRATEGIES

    def __post_init__(self) -> None:
        if not 0.0 <= self.error_rate_r <= 1.0:
            raise ValueError(f"error rate {self.error_rate_r} outside [0, 1]")
        lo, hi = self.nc_range
        if not 1 <= lo <= hi <= FUTURE_LEN:
            raise ValueError(f"nc_range {self.nc_range} must lie within [1, {FUTURE_LEN}]")
        unknown = set(self.mix) - set(STRATEGIES)
        if unknown:
            raise ValueError(f"unknown strategies {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "error_rate_r": self.error_rate_r,
            "nc_range": list(self.nc_range),
            "mix": list(self.mix),
        }


@dataclass(frozen=True)
class AugmentedSample:
    base: InteractionSequence
    future_genres: tuple[str, ...]
    future_items: tuple[str, ...]
    n_o: int
    n_c: int
    provenance: str = "original"
    n_c_drawn: int | None = None

    @property
    def n_distinct(self) -> int:
        return len(set(self.future_genres))


def original_sample(seq: InteractionSequence, catalog: ItemCatalog) -> AugmentedSample:
    genres = tuple(future_genres(seq, catalog))
    n = len(set(genres))
    return AugmentedSample(seq, genres, tuple(seq.future_ids), n, n, "original")


def round_half_away(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def _rng(seed: int, sample: AugmentedSample, tag: str) -> np.random.Generator:
    return derive_rng(seed, sample.base.key, tag)


def gf_noise(sample: AugmentedSample, taxonomy: Sequence[str], seed: int) -> AugmentedSample:
    """GF-N: swap one of the future genres for a genre the list does not contain.

    A slot is picked uniformly; every slot sharing its genre moves to the
    noisy genre, so the distinct-genre count is unchanged.
    """
    present = set(sample.future_genres)
    candidates = [g for g in taxonomy if g not in present]
    if not candidates:
        raise TaxonomyExhausted("future list already covers the whole taxonomy")
    rng = _rng(seed, sample, "GF-N")
    slot = int(rng.integers(len(sample.future_genres)))
    noisy = candidates[int(rng.integers(len(candidates)))]
    old = sample.future_genres[slot]
    genres = tuple(noisy if g == old else g for g in sample.future_genres)
    return replace(sample, future_genres=genres, n_o=sample.n_distinct, n_c=sample.n_distinct, provenance="GF-N")


def least_frequent_order(genres: Sequence[str]) -> list[str]:
    """Distinct genres, fewest slots first, then by name."""
    counts = Counter(genres)
    return sorted(counts, key=lambda g: (counts[g], g))


def gf_dist(
    sample: AugmentedSample,
    taxonomy: Sequence[str],
    train_genre_dist: Mapping[str, float],
    seed: int,
    nc_range: tuple[int, int] = (1, 10),
) -> AugmentedSample:
    """GF-D: draw a control number and reshape the future genres to match it."""
    rng = _rng(seed, sample, "GF-D")
    lo, hi = nc_range
    drawn = int(rng.integers(lo, hi + 1))
    n_c = min(drawn, len(sample.future_genres), len(taxonomy))
    if n_c != drawn:
        log.warning("N_c=%d infeasible, clamped to %d", drawn, n_c)
    genres = list(sample.future_genres)
    n_o = len(set(genres))
    if n_o > n_c:
        dropped = least_frequent_order(genres)[: n_o - n_c]
        kept = [g for g in dict.fromkeys(genres) if g not in dropped]
        for i, g in enumerate(genres):
            if g in dropped:
                genres[i] = kept[int(rng.integers(len(kept)))]
    elif n_o < n_c:
        new = codec.draw_genres(rng, train_genre_dist, set(genres), n_c - n_o, taxonomy)
        for g in new:
            counts = Counter(genres)
            donor = max(sorted(counts), key=lambda d: counts[d])
            slots = [i for i, x in enumerate(genres) if x == donor]
            genres[slots[int(rng.integers(len(slots)))]] = g
    return replace(
        sample, future_genres=tuple(genres), n_o=n_o, n_c=n_c, provenance="GF-D", n_c_drawn=drawn
    )


def ip_noise(sample: AugmentedSample, item_dist: ItemDistribution, r: float, seed: int) -> AugmentedSample:
    """IP-N: replace round(r*10) items with training items of a different genre.

    The genre tag of each replaced slot follows its new item.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"error rate {r} outside [0, 1]")
    m = round_half_away(r * len(sample.future_items))
    rng = _rng(seed, sample, "IP-N")
    positions = sorted(int(p) for p in rng.choice(len(sample.future_items), size=m, replace=False))
    items = list(sample.future_items)
    genres = list(sample.future_genres)
    for pos in positions:
        displaced = sample.future_genres[pos]
        choice = item_dist.sample(rng, exclude_genre=displaced, avoid=set(items))
        if choice is None:
            raise DistributionGap(f"no training items outside genre {displaced!r}")
        items[pos] = choice
        genres[pos] = item_dist.genre_of(choice)
    return replace(
        sample,
        future_items=tuple(items),
        future_genres=tuple(genres),
        n_o=sample.n_distinct,
        n_c=len(set(genres)),
        provenance="IP-N",
    )


def ip_dist(
    sample: AugmentedSample,
    gf_dist_output: AugmentedSample,
    item_dist: ItemDistribution,
    seed: int,
) -> AugmentedSample:
    """IP-D: resample items for every slot whose genre GF-D changed."""
    if gf_dist_output.base.key != sample.base.key:
        raise ValueError("GF-D output belongs to a different sequence")
    rng = _rng(seed, sample, "IP-D")
    items = list(sample.future_items)
    for pos, (before, after) in enumerate(zip(sample.future_genres, gf_dist_output.future_genres)):
        if before == after:
            continue
        choice = item_dist.sample(rng, genre=after, avoid=set(items))
        if choice is None:
            raise DistributionGap(f"no training items of genre {after!r}")
        items[pos] = choice
    return replace(
        gf_dist_output,
        future_items=tuple(items),
        n_o=sample.n_distinct,
        provenance="IP-D",
    )


def augment_all(
    samples: Sequence[AugmentedSample],
    config: AugmentConfig,
    taxonomy: Sequence[str],
    genre_dist: Mapping[str, float],
    item_dist: ItemDistribution,
) -> dict[str, list[AugmentedSample]]:
    """Run every strategy in ``config.mix`` over ``samples``; IP-D reuses GF-D's draw."""
    out: dict[str, list[AugmentedSample]] = {s: [] for s in config.mix}
    for sample in samples:
        gfd = None
        if "GF-N" in config.mix:
            out["GF-N"].append(gf_noise(sample, taxonomy, config.seed))
        if "GF-D" in config.mix or "IP-D" in config.mix:
            gfd = gf_dist(sample, taxonomy, genre_dist, config.seed, config.nc_range)
            if "GF-D" in config.mix:
                out["GF-D"].append(gfd)
        if "IP-N" in config.mix:
            out["IP-N"].append(ip_noise(sample, item_dist, config.error_rate_r, config.seed))
        if "IP-D" in config.mix:
            out["IP-D"].append(ip_dist(sample, gfd, item_dist, config.seed))
    return out


# -- instruction samples -----------------------------------------------------


def gp_instruction(sample: AugmentedSample, catalog: ItemCatalog, domain: str = "movie") -> InstructionSample:
    targets = genres_by_frequency(sample.future_genres)
    history = codec.history_pairs(sample.base, catalog)
    return codec.render_gp(history, len(targets), domain=domain).with_output(codec.format_genres(targets))


def gf_instruction(sample: AugmentedSample, catalog: ItemCatalog, domain: str = "movie") -> InstructionSample:
    history = codec.history_pairs(sample.base, catalog)
    targets = genres_by_frequency(sample.future_genres)
    prompt = codec.render_gf(history, targets, domain=domain)
    return prompt.with_output(codec.gf_output(history, sample.future_genres))


def ip_instruction(sample: AugmentedSample, catalog: ItemCatalog, domain: str = "movie") -> InstructionSample:
    history = codec.history_pairs(sample.base, catalog)
    prompt = codec.render_ip(history, sample.future_genres, domain=domain)
    future = [(catalog.title(i), g) for i, g in zip(sample.future_items, sample.future_genres)]
    return prompt.with_output(codec.ip_output(history, future))


_CONVERTERS = {Task.GP: gp_instruction, Task.GF: gf_instruction, Task.IP: ip_instruction}
_TASK_STRATEGIES = {Task.GF: ("GF-N", "GF-D"), Task.IP: ("IP-N", "IP-D")}


@dataclass
class Corpus:
    samples: list[InstructionSample]
    manifest: dict = field(default_factory=dict)


def assemble(
    original: Sequence[AugmentedSample],
    augmented: Mapping[str, Sequence[AugmentedSample]],
    task: Task | str,
    catalog: ItemCatalog,
    domain: str = "movie",
) -> Corpus:
    """Original samples first, then the task's augmentations (N before D)."""
    task = Task(task)
    convert = _CONVERTERS[task]
    samples = [convert(s, catalog, domain) for s in original]
    counts = {"original": len(samples)}
    for strategy in _TASK_STRATEGIES.get(task, ()):
        extra = augmented.get(strategy, ())
        samples.extend(convert(s, catalog, domain) for s in extra)
        counts[strategy] = len(extra)
    return Corpus(samples, {"task": task.value, "counts": counts, "total": len(samples)})
