"""Ground generated titles onto catalog items by exact L2 nearest neighbour."""

from __future__ import annotations

import os
import zlib
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .data import ItemCatalog, item_sort_key
from .errors import CatalogTooSmall, DimensionMismatch, EmptyIndex, ProviderFailure

# squared distances within this of each other are ties
TIE_EPS = 1e-9


class EmbeddingProvider:
    dimension: int

    @property
    def fingerprint(self) -> str:
        raise NotImplementedError

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        raise NotImplementedError


class NgramEmbedder(EmbeddingProvider):
    """Feature-hashed character trigram counts, L2-normalized.

    Text is case-folded and padded with two spaces on each side, so short
    titles and word boundaries still produce trigrams.
    """

    def __init__(self, dimension: int = 512, n: int = 3):
        self.dimension = dimension
        self.n = n

    @property
    def fingerprint(self) -> str:
        return f"local_ngram:n={self.n}:dim={self.dimension}:crc32"

    def _vector(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        padded = "  " + " ".join(text.casefold().split()) + "  "
        for i in range(len(padded) - self.n + 1):
            vec[zlib.crc32(padded[i : i + self.n].encode("utf-8")) % self.dimension] += 1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dimension))
        return np.vstack([self._vector(t) for t in texts])


class RemoteEmbedder(EmbeddingProvider):
    """OpenAI-style ``/embeddings`` client."""

    def __init__(self, endpoint: str, model: str, dimension: int, token: str | None = None,
                 timeout: float = 60.0, batch_size: int = 256, client: httpx.Client | None = None):
        self.url = endpoint.rstrip("/")
        if not self.url.endswith("/embeddings"):
            self.url += "/embeddings"
        self.model = model
        self.dimension = dimension
        self.batch_size = batch_size
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)

    @property
    def fingerprint(self) -> str:
        return f"remote:{self.model}:dim={self.dimension}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for start in range(0, len(texts), self.batch_size):
            chunk = list(texts[start : start + self.batch_size])
            try:
                resp = self._client.post(self.url, json={"model": self.model, "input": chunk})
                resp.raise_for_status()
                data = sorted(resp.json()["data"], key=lambda d: d.get("index", 0))
                rows.extend(d["embedding"] for d in data)
            except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
                raise ProviderFailure(f"embedding request failed: {exc}") from exc
        mat = np.asarray(rows, dtype=np.float64).reshape(len(rows), -1) if rows else np.zeros((0, self.dimension))
        if mat.shape[1] != self.dimension:
            raise DimensionMismatch(f"provider returned dimension {mat.shape[1]}, expected {self.dimension}")
        return mat


@dataclass
class ItemIndex:
    item_ids: list[str]
    vectors: np.ndarray
    fingerprint: str
    _sq_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.item_ids):
            raise ValueError("one vector per item is required")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("index vectors must be finite")
        self._sq_norms = np.einsum("ij,ij->i", self.vectors, self.vectors)

    def __len__(self) -> int:
        return len(self.item_ids)

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    def sq_distances(self, query: np.ndarray) -> np.ndarray:
        """Squared L2 distance from ``query`` to every indexed vector.

        A 2-D ``query`` gives one row of distances per query vector.
        """
        q_norms = np.einsum("...j,...j->...", query, query)
        sq = self._sq_norms - 2.0 * (query @ self.vectors.T) + np.asarray(q_norms)[..., None]
        return np.maximum(sq, 0.0)

    def distance(self, row: int, query: np.ndarray) -> float:
        return float(np.linalg.norm(self.vectors[row] - query))

    def nearest(self, query: np.ndarray, exclude: set[int] | frozenset = frozenset()) -> tuple[int, float, int]:
        """Best row not in ``exclude`` as (row, distance, rank).

        Squared distances within TIE_EPS count as ties and the lowest row
        (lowest item id) wins.  ``rank`` is 1 + the number of excluded rows
        that would have been preferred.
        """
        return self.pick(self.sq_distances(query), query, exclude)

    def pick(self, d: np.ndarray, query: np.ndarray, exclude: set[int] | frozenset = frozenset()) -> tuple[int, float, int]:
        """:meth:`nearest` given precomputed squared distances ``d``."""
        if exclude:
            masked = d.copy()
            masked[list(exclude)] = np.inf
        else:
            masked = d
        best = masked.min()
        if not np.isfinite(best):
            raise EmptyIndex("no unused rows left")
        row = int(np.flatnonzero(masked <= best + TIE_EPS)[0])
        rank = 1
        if exclude:
            ex = np.fromiter(exclude, dtype=np.int64)
            dc = d[row]
            preferred = (d[ex] < dc - TIE_EPS) | ((np.abs(d[ex] - dc) <= TIE_EPS) & (ex < row))
            rank += int(preferred.sum())
        return row, self.distance(row, query), rank

    def save(self, path: str | Path) -> None:
        with Path(path).open("wb") as fh:
            np.savez(
                fh,
                fingerprint=np.array(self.fingerprint),
                dimension=np.array(self.dimension),
                item_ids=np.array(self.item_ids, dtype=str),
                vectors=self.vectors,
            )

    @classmethod
    def load(cls, path: str | Path, provider: EmbeddingProvider | None = None) -> "ItemIndex":
        with np.load(Path(path), allow_pickle=False) as z:
            fingerprint = str(z["fingerprint"])
            dimension = int(z["dimension"])
            index = cls([str(i) for i in z["item_ids"]], z["vectors"], fingerprint)
        if index.dimension != dimension:
            raise DimensionMismatch("stored dimension disagrees with stored vectors")
        if provider is not None and (provider.fingerprint != fingerprint or provider.dimension != dimension):
            raise DimensionMismatch(f"index built with {fingerprint}, provider is {provider.fingerprint}")
        return index


def build_index(catalog: ItemCatalog, provider: EmbeddingProvider, path: str | Path | None = None) -> ItemIndex:
    """Embed every catalog title; rows are ordered by item id."""
    ids = sorted(catalog.ids(), key=item_sort_key)
    vectors = provider.embed([catalog.title(i) for i in ids])
    if vectors.shape != (len(ids), provider.dimension):
        raise DimensionMismatch(f"provider returned shape {vectors.shape}")
    index = ItemIndex(ids, vectors, provider.fingerprint)
    if path is not None:
        index.save(path)
    return index


def load_or_build_index(catalog: ItemCatalog, provider: EmbeddingProvider, path: str | Path) -> ItemIndex:
    path = Path(path)
    if path.exists():
        index = ItemIndex.load(path, provider)
        if sorted(index.item_ids) == sorted(catalog.ids()):
            return index
    return build_index(catalog, provider, path)


@dataclass(frozen=True)
class GroundedSlot:
    raw_title: str
    matched_item_id: str
    l2_distance: float
    rank_used: int

    def to_dict(self) -> dict:
        return {
            "raw_title": self.raw_title,
            "matched_item_id": self.matched_item_id,
            "l2_distance": self.l2_distance,
            "rank_used": self.rank_used,
        }


@dataclass
class GroundingReport:
    slots: list[GroundedSlot]
    dedupe_events: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"slots": [s.to_dict() for s in self.slots], "dedupe_events": list(self.dedupe_events)}


class Grounder:
    def __init__(self, index: ItemIndex, provider: EmbeddingProvider):
        if provider.fingerprint != index.fingerprint:
            raise DimensionMismatch(f"index built with {index.fingerprint}, provider is {provider.fingerprint}")
        self.index = index
        self.provider = provider

    def ground_item(self, raw_title: str) -> tuple[str, float]:
        """Nearest catalog item to ``raw_title``; ties go to the lower item id."""
        if len(self.index) == 0:
            raise EmptyIndex("index is empty")
        row, dist, _ = self.index.nearest(self.provider.embed([raw_title])[0])
        return self.index.item_ids[row], dist

    def ground_list(self, raw_titles: Sequence[str], dedupe: bool = True) -> tuple[list[str], GroundingReport]:
        """Ground every title; with ``dedupe`` a repeat takes its next-nearest unused item."""
        if len(self.index) == 0:
            raise EmptyIndex("index is empty")
        if dedupe and len(self.index) < len(raw_titles):
            raise CatalogTooSmall(f"{len(self.index)} items cannot fill {len(raw_titles)} distinct slots")
        queries = self.provider.embed(list(raw_titles))
        # one pass over the index for the whole list
        dists = self.index.sq_distances(queries) if len(queries) else np.zeros((0, len(self.index)))
        used: set[int] = set()
        items: list[str] = []
        slots: list[GroundedSlot] = []
        events: list[int] = []
        for pos, (title, q, d) in enumerate(zip(raw_titles, queries, dists)):
            row, dist, rank = self.index.pick(d, q, used if dedupe else frozenset())
            if rank > 1:
                events.append(pos)
            used.add(row)
            items.append(self.index.item_ids[row])
            slots.append(GroundedSlot(title, self.index.item_ids[row], dist, rank))
        return items, GroundingReport(slots, events)


def provider_from_config(spec: dict | None) -> EmbeddingProvider:
    spec = dict(spec or {})
    kind = spec.pop("kind", "local_ngram")
    if kind == "local_ngram":
        return NgramEmbedder(int(spec.get("dimension", 512)))
    if kind == "remote":
        return RemoteEmbedder(
            endpoint=spec.get("endpoint") or os.environ.get("DLCREC_EMBED_ENDPOINT", ""),
            model=spec.get("model", "embedding"),
            dimension=int(spec["dimension"]),
            token=os.environ.get(spec.get("token_env", "DLCREC_API_KEY")),
        )
    raise ValueError(f"unknown embedding provider {kind!r}")

