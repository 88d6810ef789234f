"""The GP -> GF -> IP control cascade and the single-prompt / CoT baselines."""

from __future__ import annotations

import enum
import logging
import time
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import codec
from .backends import DEFAULT_MAX_NEW_TOKENS, Backend, GenerationRequest
from .codec import Task
from .data import FUTURE_LEN, InteractionSequence, ItemCatalog
from .errors import DLCRecError, KOutOfRange, StageFailure, TrailMismatch
from .grounding import Grounder
from .metrics import EvalReport, ListMetrics, aggregate, cov_at_k, ndcg_at_k, recall_at_k
from .seeding import derive_rng

log = logging.getLogger(__name__)


class Method(str, enum.Enum):
    DLCREC = "DLCREC"
    BIGREC_DIV = "BIGREC_DIV"
    BIGREC_COT = "BIGREC_COT"


@dataclass(frozen=True)
class ControlRequest:
    sequence: InteractionSequence
    n_c: int
    method: Method = Method.DLCREC

    def __post_init__(self) -> None:
        if not 1 <= self.n_c <= FUTURE_LEN:
            raise KOutOfRange(f"control number {self.n_c} outside [1, {FUTURE_LEN}]")
        object.__setattr__(self, "method", Method(self.method))


@dataclass
class PipelineResult:
    sequence_key: str
    user_id: str
    method: str
    n_c: int
    recommendations: list[str]
    truth: list[str]
    stage_trace: dict
    timings: dict[str, float] = field(default_factory=dict)
    error: dict | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_record(self, include_timings: bool = False) -> dict:
        rec = {
            "sequence_key": self.sequence_key,
            "user_id": self.user_id,
            "method": self.method,
            "n_c": self.n_c,
            "recommendations": self.recommendations,
            "truth": self.truth,
            "stage_trace": self.stage_trace,
            "error": self.error,
        }
        if include_timings:
            rec["timings"] = self.timings
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "PipelineResult":
        return cls(
            rec["sequence_key"], rec["user_id"], rec["method"], int(rec["n_c"]),
            list(rec["recommendations"]), list(rec["truth"]), dict(rec["stage_trace"]),
            dict(rec.get("timings", {})), rec.get("error"),
        )


class ControlPipeline:
    """Runs one control request end to end against a backend and a grounder."""

    def __init__(
        self,
        catalog: ItemCatalog,
        backend: Backend,
        grounder: Grounder,
        genre_dist: Mapping[str, float] | None = None,
        seed: int = 0,
        domain: str = "movie",
        dedupe: bool = True,
        max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
    ):
        self.catalog = catalog
        self.backend = backend
        self.grounder = grounder
        self.taxonomy = catalog.primary_genres
        self.genre_dist = genre_dist or {g: 1.0 for g in self.taxonomy}
        self.seed = seed
        self.domain = domain
        self.dedupe = dedupe
        self.max_new_tokens = max_new_tokens

    # -- plumbing

    def _ask(self, prompt: codec.Prompt, seq: InteractionSequence, trace: dict, stage: str) -> str:
        text = prompt.text
        trace["prompts"][stage] = text
        completion = self.backend.generate(
            GenerationRequest(text, prompt.task, self.max_new_tokens, sequence_key=seq.key)
        )
        trace["completions"].setdefault(stage, []).append(completion)
        return completion

    def _ask_parsed(self, prompt, seq, trace, stage, parse):
        # one re-prompt on a malformed trail
        try:
            return parse(self._ask(prompt, seq, trace, stage))
        except TrailMismatch:
            log.info("trail mismatch at %s for %s, re-prompting", stage, seq.key)
            return parse(self._ask(prompt, seq, trace, stage))

    @staticmethod
    def new_trace() -> dict:
        return {"prompts": {}, "completions": {}}

    def _history(self, seq: InteractionSequence) -> list[tuple[str, str]]:
        return codec.history_pairs(seq, self.catalog)

    # -- stages

    def run_gp(self, seq: InteractionSequence, n_c: int, trace: dict | None = None,
               stage: str = "gp", task: Task = Task.GP) -> list[str]:
        trace = trace if trace is not None else self.new_trace()
        history = self._history(seq)
        if task is Task.GP:
            prompt = codec.render_gp(history, n_c, self.taxonomy, domain=self.domain)
        else:
            prompt = codec.render_baseline(task, history, k=n_c, taxonomy=self.taxonomy, domain=self.domain)
        text = self._ask(prompt, seq, trace, stage)
        rng = derive_rng(self.seed, seq.key, stage, str(n_c))
        genres = codec.parse_gp(text, self.taxonomy, n_c, fill=self.genre_dist, rng=rng)
        trace[f"{stage}_genres"] = genres
        return genres

    def run_gf(self, seq: InteractionSequence, target_genres: Sequence[str], trace: dict | None = None) -> list[str]:
        trace = trace if trace is not None else self.new_trace()
        prompt = codec.render_gf(self._history(seq), target_genres, self.taxonomy, domain=self.domain)
        parsed = self._ask_parsed(prompt, seq, trace, "gf", lambda t: codec.parse_gf(t, self.taxonomy))
        slots, changed = codec.repair_gf(parsed, target_genres)
        trace["gf_parsed"] = parsed
        trace["gf_slots"] = slots
        trace["gf_repaired_positions"] = changed
        trace["gf_complete"] = set(slots) == set(target_genres)
        return slots

    def run_ip(self, seq: InteractionSequence, future_genres: Sequence[str], trace: dict | None = None):
        trace = trace if trace is not None else self.new_trace()
        prompt = codec.render_ip(self._history(seq), future_genres, domain=self.domain)
        pairs = self._ask_parsed(prompt, seq, trace, "ip", codec.parse_ip)
        titles = [t for t, _ in pairs]
        trace["ip_raw_titles"] = titles
        trace["ip_slot_genres"] = [g for _, g in pairs]
        items, report = self.grounder.ground_list(titles, dedupe=self.dedupe)
        trace["grounding"] = report.to_dict()
        return items, report

    def _ground_titles(self, titles: list[str], trace: dict) -> list[str]:
        if not titles:
            raise TrailMismatch("completion contained no quoted titles")
        # short answers are padded by repetition; dedupe then walks to the next-nearest items
        padded = (titles * FUTURE_LEN)[:FUTURE_LEN]
        trace["raw_titles"] = padded
        items, report = self.grounder.ground_list(padded, dedupe=self.dedupe)
        trace["grounding"] = report.to_dict()
        return items

    # -- whole requests

    def run_control(self, request: ControlRequest) -> PipelineResult:
        seq, n_c = request.sequence, request.n_c
        trace = self.new_trace()
        timings: dict[str, float] = {}
        stage = "start"

        def timed(name, fn, *args):
            nonlocal stage
            stage = name
            t0 = time.perf_counter()
            out = fn(*args)
            timings[name] = time.perf_counter() - t0
            return out

        try:
            if n_c > len(self.taxonomy):
                raise KOutOfRange(f"control number {n_c} exceeds the {len(self.taxonomy)} catalog genres")
            if request.method is Method.DLCREC:
                genres = timed("gp", self.run_gp, seq, n_c, trace)
                slots = timed("gf", self.run_gf, seq, genres, trace)
                items, _ = timed("ip", self.run_ip, seq, slots, trace)
            elif request.method is Method.BIGREC_DIV:
                prompt = codec.render_baseline(Task.BIGREC_DIV, self._history(seq), k=n_c,
                                               taxonomy=self.taxonomy, domain=self.domain)
                text = timed("div", self._ask, prompt, seq, trace, "div")
                items = timed("ground", self._ground_titles, codec.parse_item_list(text), trace)
            else:
                genres = timed("cot1", self.run_gp, seq, n_c, trace, "cot1", Task.BIGREC_COT_STAGE1)
                prompt = codec.render_baseline(Task.BIGREC_COT_STAGE2, self._history(seq), genres=genres,
                                               domain=self.domain)
                text = timed("cot2", self._ask, prompt, seq, trace, "cot2")
                items = timed("ground", self._ground_titles, codec.parse_item_list(text), trace)
        except DLCRecError as exc:
            raise StageFailure(stage, exc, trace) from exc
        return PipelineResult(
            seq.key, seq.user_id, request.method.value, n_c, items, seq.future_ids, trace, timings
        )

    def run_many(self, requests: Sequence[ControlRequest], max_in_flight: int = 1) -> list[PipelineResult]:
        """Run requests concurrently; failures become results carrying ``error``."""

        def one(req: ControlRequest) -> PipelineResult:
            try:
                return self.run_control(req)
            except StageFailure as exc:
                log.warning("sequence %s n_c=%d failed at %s: %s", req.sequence.key, req.n_c, exc.stage, exc.cause)
                return PipelineResult(
                    req.sequence.key, req.sequence.user_id, req.method.value, req.n_c, [],
                    req.sequence.future_ids, exc.trace, {},
                    {"stage": exc.stage, "type": type(exc.cause).__name__, "message": str(exc.cause)},
                )

        if max_in_flight <= 1:
            return [one(r) for r in requests]
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            return list(pool.map(one, requests))


def score(results: Iterable[PipelineResult], catalog: ItemCatalog) -> list[ListMetrics]:
    """Per-list metrics of every successful result."""
    out = []
    for r in results:
        if not r.ok:
            continue
        out.append(ListMetrics(
            r.n_c,
            ndcg_at_k(r.recommendations, r.truth),
            recall_at_k(r.recommendations, r.truth),
            cov_at_k(r.recommendations, catalog),
        ))
    return out


@dataclass
class SweepResult:
    reports: dict[int, EvalReport]
    results: list[PipelineResult]

    @property
    def failures(self) -> list[PipelineResult]:
        return [r for r in self.results if not r.ok]


def sweep(
    pipeline: ControlPipeline,
    sequences: Sequence[InteractionSequence],
    n_c_values: Iterable[int] = range(1, 11),
    method: Method | str = Method.DLCREC,
    max_in_flight: int = 1,
) -> SweepResult:
    """Run every (sequence, n_c) cell and report per control number."""
    method = Method(method)
    n_c_values = list(n_c_values)
    requests = [ControlRequest(seq, nc, method) for nc in n_c_values for seq in sequences]
    results = pipeline.run_many(requests, max_in_flight)
    reports = {}
    for nc in n_c_values:
        metrics = score([r for r in results if r.n_c == nc], pipeline.catalog)
        if metrics:
            reports[nc] = aggregate(metrics, method.value)
    return SweepResult(reports, results)
