"""Text-generation backends: an OpenAI-compatible HTTP client, a transcript
replayer, and deterministic oracles that stand in for fine-tuned models."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import httpx

from . import codec
from .codec import Task
from .data import InteractionSequence, ItemCatalog, future_genres, genres_by_frequency, item_sort_key
from .errors import (
    BackendError,
    BadResponse,
    GenerationTimeout,
    TransportError,
    UnknownPrompt,
    UnknownSequence,
)
from .seeding import derive_rng

log = logging.getLogger(__name__)

# a rendered 20-slot trail is roughly 1.5k characters; tokens are fewer
DEFAULT_MAX_NEW_TOKENS = 1024
BACKEND_KINDS = ("remote", "oracle_truth", "oracle_noisy", "recorded")


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    task: Task = Task.GP
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    sequence_key: str | None = None
    decoding: str = "greedy"

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be nonempty")
        if self.max_new_tokens <= 0:
            raise ValueError("max_new_tokens must be positive")
        if self.decoding != "greedy":
            raise ValueError("only greedy decoding is supported")


def prompt_hash(prompt: str) -> str:
    """Stable 64-bit hash of the exact prompt bytes, as 16 hex digits."""
    return hashlib.blake2b(prompt.encode("utf-8"), digest_size=8).hexdigest()


class Backend:
    """Base class; subclasses implement :meth:`generate`."""

    max_in_flight: int = 1

    def generate(self, request: GenerationRequest) -> str:
        raise NotImplementedError

    def batch_generate(
        self, requests: Sequence[GenerationRequest], max_in_flight: int | None = None
    ) -> list[str | BackendError]:
        """Generate for every request; failures are returned in place, not raised."""
        workers = max_in_flight or self.max_in_flight
        if workers < 1:
            raise ValueError("max_in_flight must be >= 1")

        def one(req: GenerationRequest) -> str | BackendError:
            try:
                return self.generate(req)
            except BackendError as exc:
                return exc

        if workers == 1 or len(requests) <= 1:
            return [one(r) for r in requests]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, requests))

    def describe(self) -> dict:
        return {"kind": type(self).__name__}


# -- remote ------------------------------------------------------------------


class RemoteBackend(Backend):
    """Chat-completions client with temperature 0 and bounded retries."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        token: str | None = None,
        timeout: float = 120.0,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        backoff_cap: float = 4.0,
        max_in_flight: int = 4,
        sleep: Callable[[float], None] = time.sleep,
        client: httpx.Client | None = None,
    ):
        if not endpoint:
            raise ValueError("remote backend requires an endpoint")
        self.url = endpoint.rstrip("/")
        if not self.url.endswith("/chat/completions"):
            self.url += "/chat/completions"
        self.model = model
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.max_in_flight = max_in_flight
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        self._gate = threading.BoundedSemaphore(max_in_flight)

    @classmethod
    def from_env(cls, **kwargs) -> "RemoteBackend":
        return cls(
            endpoint=kwargs.pop("endpoint", None) or os.environ.get("DLCREC_ENDPOINT", ""),
            model=kwargs.pop("model", None) or os.environ.get("DLCREC_MODEL", "dlcrec"),
            token=kwargs.pop("token", None) or os.environ.get("DLCREC_API_KEY"),
            **kwargs,
        )

    def body(self, request: GenerationRequest) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": 0,
            "max_tokens": request.max_new_tokens,
        }

    def _backoff(self, attempt: int) -> float:
        return min(self.backoff_base * 2**attempt, self.backoff_cap)

    def generate(self, request: GenerationRequest) -> str:
        last: BackendError | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleep(self._backoff(attempt - 1))
            try:
                with self._gate:
                    resp = self._client.post(self.url, json=self.body(request))
            except httpx.TimeoutException as exc:
                last = GenerationTimeout(str(exc) or "request timed out")
                continue
            except httpx.TransportError as exc:
                last = TransportError(str(exc) or type(exc).__name__)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BadResponse(f"HTTP {resp.status_code}: {resp.text[:200]}")
            return _completion_text(resp)
        assert last is not None
        raise last

    def close(self) -> None:
        self._client.close()

    def describe(self) -> dict:
        return {"kind": "remote", "endpoint": self.url, "model": self.model}


def _completion_text(resp: httpx.Response) -> str:
    try:
        payload = resp.json()
    except ValueError:
        raise BadResponse(f"non-JSON response: {resp.text[:200]!r}") from None
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise BadResponse(f"response lacks choices[0].message.content: {str(payload)[:200]}") from None
    if not isinstance(content, str):
        raise BadResponse("message content is not a string")
    return content


# -- transcripts -------------------------------------------------------------


def read_transcript(path: str | Path) -> dict[str, dict]:
    entries: dict[str, dict] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                entries[rec["prompt_hash"]] = rec
    return entries


class RecordedBackend(Backend):
    """Replays completions from a ``{prompt_hash, prompt, completion}`` transcript."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(f"transcript {self.path} does not exist")
        self._entries = read_transcript(self.path)

    def generate(self, request: GenerationRequest) -> str:
        rec = self._entries.get(prompt_hash(request.prompt))
        if rec is None or rec.get("prompt", request.prompt) != request.prompt:
            raise UnknownPrompt(f"no recorded completion for prompt {prompt_hash(request.prompt)}")
        return rec["completion"]

    def describe(self) -> dict:
        return {"kind": "recorded", "transcript": str(self.path)}


class RecordingBackend(Backend):
    """Wraps another backend and keeps every completion for :meth:`save`."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.max_in_flight = inner.max_in_flight
        self._records: dict[str, dict] = {}
        self._lock = threading.Lock()

    def generate(self, request: GenerationRequest) -> str:
        text = self.inner.generate(request)
        h = prompt_hash(request.prompt)
        with self._lock:
            self._records[h] = {"prompt_hash": h, "prompt": request.prompt, "completion": text}
        return text

    def save(self, path: str | Path) -> int:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            for h in sorted(self._records):
                fh.write(json.dumps(self._records[h], ensure_ascii=False, sort_keys=True) + "\n")
        return len(self._records)

    def describe(self) -> dict:
        return self.inner.describe()


# -- oracles -----------------------------------------------------------------

_K_RE = re.compile(r"(?:provide the|decide the) (\d+) (?:most likely )?genres")
_TARGETS_RE = re.compile(r"following genres: \[([^\]]*)\]")


class OracleBackend(Backend):
    """Answers every task from the ground-truth future of a known sequence.

    With ``genre_error`` / ``item_error`` above zero each emitted genre / item
    is corrupted with that probability.  Randomness is derived from
    (seed, sequence, prompt), so a given prompt always gets the same answer.
    """

    def __init__(
        self,
        sequences: Mapping[str, InteractionSequence] | Sequence[InteractionSequence],
        catalog: ItemCatalog,
        genre_dist: Mapping[str, float] | None = None,
        item_popularity: Mapping[str, int] | None = None,
        genre_error: float = 0.0,
        item_error: float = 0.0,
        seed: int = 0,
    ):
        if not isinstance(sequences, Mapping):
            sequences = {s.key: s for s in sequences}
        for name, p in (("genre_error", genre_error), ("item_error", item_error)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")
        self.sequences = dict(sequences)
        self.catalog = catalog
        self.taxonomy = catalog.primary_genres
        self.genre_dist = genre_dist or {g: 1.0 for g in self.taxonomy}
        self.genre_error = genre_error
        self.item_error = item_error
        self.seed = seed
        pop = item_popularity or {}
        self._ranked = {
            g: sorted(catalog.items_of_genre(g), key=lambda i: (-pop.get(i, 0), item_sort_key(i)))
            for g in self.taxonomy
        }
        self._all_ids = sorted(catalog.ids(), key=item_sort_key)

    @property
    def noisy(self) -> bool:
        return self.genre_error > 0 or self.item_error > 0

    def describe(self) -> dict:
        if not self.noisy:
            return {"kind": "oracle_truth", "seed": self.seed}
        return {
            "kind": "oracle_noisy",
            "genre_error": self.genre_error,
            "item_error": self.item_error,
            "seed": self.seed,
        }

    def generate(self, request: GenerationRequest) -> str:
        seq = self.sequences.get(request.sequence_key or "")
        if seq is None:
            raise UnknownSequence(f"oracle has no sequence {request.sequence_key!r}")
        rng = derive_rng(self.seed, seq.key, request.task.value, prompt_hash(request.prompt))
        instruction, input_text = codec.prompt_sections(request.prompt)
        history = codec.history_pairs(seq, self.catalog)
        task = request.task
        if task in (Task.GP, Task.BIGREC_COT_STAGE1):
            return codec.format_genres(self._genres(seq, _prompt_k(instruction), rng))
        if task is Task.GF:
            return codec.gf_output(history, self._slot_genres(seq, _prompt_targets(instruction), rng))
        if task is Task.IP:
            tags = [g for _, g in codec.parse_trail(input_text)][-len(seq.future) :]
            items = self._items_for(seq, tags, rng)
            return codec.ip_output(history, [(self.catalog.title(i), g) for i, g in zip(items, tags)])
        if task is Task.BIGREC_DIV:
            items = self._corrupt_items(list(seq.future_ids), rng)
            return codec.item_list_output(self.catalog.title(i) for i in items)
        if task is Task.BIGREC_COT_STAGE2:
            items = self._items_covering(seq, _prompt_targets(instruction), rng)
            return codec.item_list_output(self.catalog.title(i) for i in items)
        raise ValueError(f"oracle cannot answer task {task}")

    # GP: true genres by frequency, padded from the genre distribution
    def _genres(self, seq: InteractionSequence, k: int, rng) -> list[str]:
        truth = genres_by_frequency(future_genres(seq, self.catalog))
        out = truth[:k]
        if len(out) < k:
            fill_rng = derive_rng(self.seed, seq.key, "gp-fill")
            out += codec.draw_genres(fill_rng, self.genre_dist, out, min(k, len(self.taxonomy)) - len(out), self.taxonomy)
        if self.genre_error > 0:
            for i in range(len(out)):
                if rng.random() < self.genre_error:
                    pool = [g for g in self.taxonomy if g not in truth and g not in out]
                    if pool:
                        out[i] = pool[int(rng.integers(len(pool)))]
        return out

    def _slot_genres(self, seq: InteractionSequence, targets: list[str], rng) -> list[str]:
        genres, _ = codec.repair_gf(future_genres(seq, self.catalog), targets)
        if self.genre_error > 0:
            for i, g in enumerate(genres):
                if rng.random() < self.genre_error:
                    pool = [x for x in self.taxonomy if x != g]
                    genres[i] = pool[int(rng.integers(len(pool)))]
        return genres

    def _next_of_genre(self, genre: str, used: set[str]) -> str | None:
        for item in self._ranked.get(genre, ()):
            if item not in used:
                return item
        return None

    def _items_for(self, seq: InteractionSequence, tags: Sequence[str], rng) -> list[str]:
        truth = seq.future_ids
        used: set[str] = set()
        out: list[str | None] = [None] * len(tags)
        # true items whose genre matches their slot tag stay put
        for i, (item, tag) in enumerate(zip(truth, tags)):
            if self.catalog.genre(item) == tag:
                out[i] = item
                used.add(item)
        spare = [i for i in truth if i not in used]
        for i, tag in enumerate(tags):
            if out[i] is not None:
                continue
            match = next((x for x in spare if x not in used and self.catalog.genre(x) == tag), None)
            match = match or self._next_of_genre(tag, used) or next(x for x in truth if x not in used)
            out[i] = match
            used.add(match)
        return self._corrupt_items(out, rng)

    def _items_covering(self, seq: InteractionSequence, genres: list[str], rng) -> list[str]:
        wanted = set(genres)
        out = [i for i in seq.future_ids if self.catalog.genre(i) in wanted]
        used = set(out)
        cycle = [g for g in genres if g in self._ranked] or list(self.taxonomy)
        j = 0
        while len(out) < len(seq.future):
            item = self._next_of_genre(cycle[j % len(cycle)], used)
            if item is None and all(self._next_of_genre(g, used) is None for g in cycle):
                item = next(x for x in self._all_ids if x not in used)
            if item is not None:
                out.append(item)
                used.add(item)
            j += 1
        return self._corrupt_items(out, rng)

    def _corrupt_items(self, items: list[str], rng) -> list[str]:
        if self.item_error <= 0:
            return items
        used = set(items)
        out = list(items)
        for i, item in enumerate(out):
            if rng.random() < self.item_error:
                for _ in range(32):
                    cand = self._all_ids[int(rng.integers(len(self._all_ids)))]
                    if cand not in used:
                        break
                used.discard(item)
                out[i] = cand
                used.add(cand)
        return out


def _prompt_k(instruction: str) -> int:
    m = _K_RE.search(instruction)
    if not m:
        raise BadResponse("oracle could not find k in the prompt")
    return int(m.group(1))


def _prompt_targets(instruction: str) -> list[str]:
    m = _TARGETS_RE.search(instruction)
    if not m:
        raise BadResponse("oracle could not find target genres in the prompt")
    return [g.strip() for g in m.group(1).split(",") if g.strip()]


def oracle_truth(sequences, catalog: ItemCatalog, **kwargs) -> OracleBackend:
    return OracleBackend(sequences, catalog, **kwargs)


def oracle_noisy(
    sequences, catalog: ItemCatalog, genre_error: float, item_error: float, seed: int = 0, **kwargs
) -> OracleBackend:
    return OracleBackend(
        sequences, catalog, genre_error=genre_error, item_error=item_error, seed=seed, **kwargs
    )


# -- descriptors -------------------------------------------------------------


@dataclass
class BackendDescriptor:
    kind: str
    endpoint: str | None = None
    model: str = "dlcrec"
    token_env: str = "DLCREC_API_KEY"
    genre_error: float = 0.0
    item_error: float = 0.0
    seed: int = 0
    transcript: str | None = None
    max_in_flight: int = 4
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    extra: dict = field(default_factory=dict)

    def problems(self) -> list[str]:
        out = []
        if self.kind not in BACKEND_KINDS:
            out.append(f"backend.kind: must be one of {BACKEND_KINDS}, got {self.kind!r}")
        if self.kind == "remote" and not (self.endpoint or os.environ.get("DLCREC_ENDPOINT")):
            out.append("backend.endpoint: required for the remote backend")
        if self.kind == "recorded" and not (self.transcript and Path(self.transcript).exists()):
            out.append(f"backend.transcript: file {self.transcript!r} does not exist")
        if self.max_in_flight < 1:
            out.append("backend.max_in_flight: must be >= 1")
        return out

    def build(
        self,
        sequences: Sequence[InteractionSequence] = (),
        catalog: ItemCatalog | None = None,
        genre_dist: Mapping[str, float] | None = None,
        item_popularity: Mapping[str, int] | None = None,
    ) -> Backend:
        if self.kind == "remote":
            return RemoteBackend(
                endpoint=self.endpoint or os.environ.get("DLCREC_ENDPOINT", ""),
                model=self.model,
                token=os.environ.get(self.token_env),
                max_in_flight=self.max_in_flight,
            )
        if self.kind == "recorded":
            return RecordedBackend(self.transcript)
        if catalog is None:
            raise ValueError("oracle backends need the catalog")
        errors = (self.genre_error, self.item_error) if self.kind == "oracle_noisy" else (0.0, 0.0)
        return OracleBackend(
            sequences, catalog, genre_dist=genre_dist, item_popularity=item_popularity,
            genre_error=errors[0], item_error=errors[1], seed=self.seed,
        )
