"""Accuracy (NDCG@K, Recall@K) and control (Cov@K, MAE_Cov@K) metrics."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

from .data import ItemCatalog
from .errors import EmptyInput, UnknownItem

K = 10
METRICS = ("ndcg_at_10", "recall_at_10", "cov_at_10", "mae_cov_at_10")
_HEADERS = ("NDCG@10", "Recall@10", "Cov@10", "MAE_Cov@10")


def recall_at_k(rec: Sequence[str], truth: Sequence[str], k: int = K) -> float:
    truth_set = set(truth)
    if not truth_set:
        return 0.0
    return len(set(rec[:k]) & truth_set) / len(truth_set)


def ndcg_at_k(rec: Sequence[str], truth: Sequence[str], k: int = K) -> float:
    """Binary-relevance NDCG; the ideal list has min(k, |truth|) hits."""
    truth_set = set(truth)
    if not truth_set:
        return 0.0
    dcg = sum(1.0 / math.log2(i + 2) for i, item in enumerate(rec[:k]) if item in truth_set)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(truth_set))))
    return dcg / idcg


def cov_at_k(rec: Sequence[str], catalog: ItemCatalog, k: int = K) -> int:
    """Number of distinct primary genres among the top-k items."""
    genres = set()
    for item in rec[:k]:
        if item not in catalog:
            raise UnknownItem(f"item {item!r} is not in the catalog")
        genres.add(catalog.genre(item))
    return len(genres)


def mae_cov_at_k(covs: Sequence[int], n_c: int | Sequence[int]) -> float:
    """Mean of |cov - n_c| over lists (not |mean cov - n_c|)."""
    if not covs:
        raise EmptyInput("no coverage values")
    targets = [n_c] * len(covs) if isinstance(n_c, int) else list(n_c)
    if len(targets) != len(covs):
        raise ValueError("one control number per list is required")
    return sum(abs(c - t) for c, t in zip(covs, targets)) / len(covs)


@dataclass(frozen=True)
class EvalInput:
    recommendations: Sequence[str]
    ground_truth_future: Sequence[str]
    n_c: int


@dataclass(frozen=True)
class ListMetrics:
    n_c: int
    ndcg: float
    recall: float
    cov: int

    @property
    def abs_cov_error(self) -> int:
        return abs(self.cov - self.n_c)


def evaluate(inp: EvalInput, catalog: ItemCatalog, k: int = K) -> ListMetrics:
    return ListMetrics(
        inp.n_c,
        ndcg_at_k(inp.recommendations, inp.ground_truth_future, k),
        recall_at_k(inp.recommendations, inp.ground_truth_future, k),
        cov_at_k(inp.recommendations, catalog, k),
    )


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs) if xs else float("nan")


@dataclass
class EvalReport:
    ndcg_at_10: float
    recall_at_10: float
    cov_at_10: float
    mae_cov_at_10: float
    n: int
    per_nc: dict[int, dict[str, float]] = field(default_factory=dict)
    per_list: list[ListMetrics] = field(default_factory=list)
    method: str = "DLCREC"
    metadata: dict = field(default_factory=lambda: {"recall_denominator": "|truth| (10 for fixed splits)"})

    def to_dict(self) -> dict:
        out: dict = {}
        for name in METRICS:
            out[name] = {
                "mean": getattr(self, name),
                "n": self.n,
                "per_nc": {str(nc): vals[name] for nc, vals in sorted(self.per_nc.items())},
            }
        out["per_list"] = [
            {"n_c": m.n_c, "ndcg": m.ndcg, "recall": m.recall, "cov": m.cov} for m in self.per_list
        ]
        out["method"] = self.method
        out["metadata"] = self.metadata
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def coverage_consistent(self) -> bool:
        """|mean Cov - n_c| <= MAE_Cov within every control-number group."""
        return all(
            abs(vals["cov_at_10"] - nc) <= vals["mae_cov_at_10"] + 1e-12 for nc, vals in self.per_nc.items()
        )

    def table(self) -> str:
        return render_table({self.method: self})


def aggregate(lists: Iterable[ListMetrics], method: str = "DLCREC") -> EvalReport:
    lists = list(lists)
    groups: dict[int, list[ListMetrics]] = defaultdict(list)
    for m in lists:
        groups[m.n_c].append(m)

    def summary(ms: Sequence[ListMetrics]) -> dict[str, float]:
        return {
            "ndcg_at_10": _mean([m.ndcg for m in ms]),
            "recall_at_10": _mean([m.recall for m in ms]),
            "cov_at_10": _mean([m.cov for m in ms]),
            "mae_cov_at_10": _mean([m.abs_cov_error for m in ms]),
        }

    overall = summary(lists)
    return EvalReport(
        **overall,
        n=len(lists),
        per_nc={nc: summary(ms) for nc, ms in sorted(groups.items())},
        per_list=lists,
        method=method,
    )


def render_table(reports: dict[str, EvalReport]) -> str:
    """Text table grouped by control number, one row per method."""
    width = max([len(m) for m in reports] + [len("Method")])
    header = f"{'Method':<{width}} | " + " ".join(f"{h:>10}" for h in _HEADERS)
    rule = "-" * len(header)
    lines = [header, rule]
    ncs = sorted({nc for r in reports.values() for nc in r.per_nc})
    for nc in ncs:
        lines.append(f"control number={nc}".center(len(header)))
        lines.append(rule)
        for method, report in reports.items():
            vals = report.per_nc.get(nc)
            if vals is None:
                continue
            lines.append(
                f"{method:<{width}} | {vals['ndcg_at_10']:>10.4f} {vals['recall_at_10']:>10.4f} "
                f"{vals['cov_at_10']:>10.3f} {vals['mae_cov_at_10']:>10.3f}"
            )
        lines.append(rule)
    return "\n".join(lines) + "\n"
