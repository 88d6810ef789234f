"""Deterministic synthetic catalogs and interaction logs for tests and demos."""

from __future__ import annotations

import numpy as np

from .data import Interaction, Item, ItemCatalog, InteractionSequence, build_sequences

MOVIELENS_GENRES = (
    "Action", "Adventure", "Animation", "Children", "Comedy", "Crime", "Documentary",
    "Drama", "Fantasy", "Film-Noir", "Horror", "IMAX", "Musical", "Mystery", "Romance",
    "Sci-Fi", "Thriller", "War", "Western", "(no genres listed)",
)

_ADJ = (
    "Silent", "Crimson", "Hidden", "Broken", "Golden", "Last", "Wild", "Dark", "Lost",
    "Frozen", "Burning", "Electric", "Velvet", "Iron", "Secret", "Distant", "Hollow",
    "Restless", "Midnight", "Savage", "Gentle", "Bitter", "Shining", "Forgotten",
    "Scarlet", "Northern", "Endless", "Quiet", "Rising", "Falling",
)
_NOUN = (
    "Harbor", "Empire", "River", "Garden", "Frontier", "Witness", "Machine", "Kingdom",
    "Promise", "Shadow", "Voyage", "Letter", "Station", "Orchard", "Horizon", "Signal",
    "Mirror", "Canyon", "Island", "Verdict", "Carnival", "Lantern", "Fortress", "Meadow",
    "Circuit", "Monsoon", "Citadel", "Requiem", "Outpost", "Paradox",
)


def make_titles(n: int, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    out: list[str] = []
    while len(out) < n:
        a, b, c = rng.integers(len(_ADJ)), rng.integers(len(_NOUN)), rng.integers(len(_NOUN))
        year = int(rng.integers(1920, 2010))
        title = f"{_ADJ[a]} {_NOUN[b]} of the {_NOUN[c]} ({year})"
        if rng.random() < 0.3:
            title = f"The {title}"
        if title not in seen:
            seen.add(title)
            out.append(title)
    return out


def make_catalog(n_items: int = 400, genres=MOVIELENS_GENRES, seed: int = 0) -> ItemCatalog:
    """Items with unique titles; primary genres cycle so every genre is populated."""
    rng = np.random.default_rng(seed + 1)
    titles = make_titles(n_items, seed)
    items = []
    for i, title in enumerate(titles):
        primary = genres[i % len(genres)]
        extra = [g for g in rng.choice(genres, size=int(rng.integers(0, 3)), replace=False) if g != primary]
        items.append(Item(str(i + 1), title, (primary, *extra)))
    return ItemCatalog(items)


def make_interactions(
    catalog: ItemCatalog,
    n_users: int = 50,
    per_user: int = 30,
    seed: int = 0,
    positive_only: bool = True,
) -> list[Interaction]:
    """Users with a few favourite genres; every interaction is a 4-5 star rating.

    With ``positive_only=False`` about a quarter of the ratings are 1-3 stars.
    """
    rng = np.random.default_rng(seed)
    genres = list(catalog.primary_genres)
    out: list[Interaction] = []
    for u in range(n_users):
        n_fav = int(rng.integers(1, min(7, len(genres)) + 1))
        favs = [genres[i] for i in rng.choice(len(genres), size=n_fav, replace=False)]
        ts = 1_000_000 + int(rng.integers(0, 10_000))
        used: set[str] = set()
        count = 0
        while count < per_user:
            genre = favs[int(rng.integers(len(favs)))] if rng.random() < 0.85 else genres[int(rng.integers(len(genres)))]
            pool = [i for i in catalog.items_of_genre(genre) if i not in used]
            if not pool:
                continue
            item = pool[int(rng.integers(len(pool)))]
            used.add(item)
            ts += int(rng.integers(1, 5000))
            rating = float(rng.integers(4, 6))
            if not positive_only and rng.random() < 0.25:
                rating = float(rng.integers(1, 4))
            else:
                count += 1
            out.append(Interaction(f"u{u:04d}", item, rating, ts))
    return out


def make_sequences(catalog: ItemCatalog, n: int = 200, seed: int = 0) -> list[InteractionSequence]:
    """Exactly ``n`` sequences, one per synthetic user."""
    return build_sequences(make_interactions(catalog, n_users=n, per_user=20, seed=seed))
