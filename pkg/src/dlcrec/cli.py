"""dlcrec command line: prepare, augment, export-sft, run, eval and sweep."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, augment, codec, data, errors, grounding
from .backends import Backend
from .codec import Task
from .config import RunConfig
from .data import DatasetSplit, InteractionSequence, ItemCatalog
from .metrics import EvalReport, aggregate, render_table
from .pipeline import ControlPipeline, ControlRequest, Method, PipelineResult, score, sweep

log = logging.getLogger("dlcrec")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_BACKEND, EXIT_PARTIAL = 0, 1, 2, 3, 4

_BACKEND_FAILURES = {
    cls.__name__
    for cls in (errors.BackendError, errors.TransportError, errors.BadResponse, errors.GenerationTimeout,
                errors.UnknownSequence, errors.UnknownPrompt, errors.ProviderFailure)
}


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(obj), encoding="utf-8")


def _write_jsonl(path: Path, records) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
            n += 1
    return n


def _read_jsonl(path: Path) -> list[dict]:
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- shared state --------------------------------------------------------------


@dataclass
class Workspace:
    cfg: RunConfig

    @property
    def root(self) -> Path:
        return self.cfg.run_dir

    def init(self) -> None:
        for sub in ("splits", "corpora", "runs", "reports"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        snapshot = f"# config_hash: {self.cfg.hash}\n# dlcrec {__version__}\n" + self.cfg.snapshot()
        (self.root / "config.snapshot").write_text(snapshot, encoding="utf-8")

    def catalog(self) -> ItemCatalog:
        ds = self.cfg["dataset"]
        return data.load_catalog(self.cfg.path(ds["catalog"]), ds["catalog_format"])

    def split(self, catalog: ItemCatalog) -> DatasetSplit:
        if not (self.root / "splits" / "metadata.json").exists():
            prepare(self, catalog)
        return DatasetSplit.load(self.root / "splits")


def prepare(ws: Workspace, catalog: ItemCatalog) -> DatasetSplit:
    cfg = ws.cfg
    ds = cfg["dataset"]
    raw = data.load_interactions(cfg.path(ds["interactions"]), ds["interactions_format"])
    positive = data.join_catalog(data.filter_positive(raw, ds["positive_policy"]), catalog)
    sequences = data.build_sequences(positive)
    split = data.split_and_sample(sequences, cfg["split"]["ratios"], cfg["split"]["n_per_split"], cfg.seed)
    split.metadata.update(
        config_hash=cfg.hash,
        interactions=len(raw),
        positive_interactions=len(positive),
        sequences=len(sequences),
        sizes=split.sizes(),
    )
    split.save(ws.root / "splits")
    dists = {
        "config_hash": cfg.hash,
        "genre_distribution": data.genre_distribution(split.train, catalog),
        "item_distribution": data.item_distribution(split.train, catalog).counts,
    }
    _write_json(ws.root / "splits" / "distributions.json", dists)
    log.info("prepared %d sequences -> %s", len(sequences), split.sizes())
    return split


def _popularity(split: DatasetSplit) -> Counter:
    counts: Counter = Counter()
    for seq in split.train:
        counts.update(seq.history_ids + seq.future_ids)
    return counts


@dataclass
class RunContext:
    catalog: ItemCatalog
    split: DatasetSplit
    genre_dist: dict[str, float]
    backend: Backend
    pipeline: ControlPipeline


def _context(ws: Workspace) -> RunContext:
    cfg = ws.cfg
    catalog = ws.catalog()
    split = ws.split(catalog)
    genre_dist = data.genre_distribution(split.train, catalog)
    everything = split.train + split.validation + split.test
    backend = cfg.backend_descriptor().build(everything, catalog, genre_dist, _popularity(split))
    provider = grounding.provider_from_config(cfg["embedding"])
    index = grounding.load_or_build_index(catalog, provider, _cache(ws) / "index.npz")
    pipeline = ControlPipeline(
        catalog, backend, grounding.Grounder(index, provider), genre_dist,
        seed=cfg.seed, domain=cfg["domain"], dedupe=cfg["run"]["dedupe"],
        max_new_tokens=cfg["backend"]["max_new_tokens"],
    )
    return RunContext(catalog, split, genre_dist, backend, pipeline)


def _cache(ws: Workspace) -> Path:
    path = ws.root / "cache"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _eval_sequences(ws: Workspace, split: DatasetSplit) -> list[InteractionSequence]:
    seqs = split[ws.cfg["run"]["split"]]
    limit = ws.cfg["run"]["limit"]
    return seqs[:limit] if limit else seqs


def _manifest(ws: Workspace, ctx: RunContext, **extra) -> dict:
    return {
        "config_hash": ws.cfg.hash,
        "seeds": {"global": ws.cfg.seed},
        "backend": ctx.backend.describe(),
        "embedding": ctx.pipeline.grounder.provider.fingerprint,
        "template_version": codec.template_version(),
        "dlcrec_version": __version__,
        **extra,
    }


def _records(ws: Workspace, results: list[PipelineResult]) -> list[dict]:
    return [{**r.to_record(), "config_hash": ws.cfg.hash} for r in results]


def _failure_exit(results: list[PipelineResult]) -> int:
    failed = [r for r in results if not r.ok]
    if not failed:
        return EXIT_OK
    if len(failed) == len(results) and all(r.error["type"] in _BACKEND_FAILURES for r in failed):
        return EXIT_BACKEND
    return EXIT_PARTIAL


# -- commands ------------------------------------------------------------------


def cmd_prepare(ws: Workspace) -> int:
    split = prepare(ws, ws.catalog())
    print(f"splits written to {ws.root / 'splits'}: {split.sizes()}")
    return EXIT_OK


def _augmented(ws: Workspace, catalog: ItemCatalog, split: DatasetSplit):
    originals = [augment.original_sample(s, catalog) for s in split.train]
    genre_dist = data.genre_distribution(split.train, catalog)
    item_dist = data.item_distribution(split.train, catalog)
    out = augment.augment_all(originals, ws.cfg.augment_config(), catalog.primary_genres, genre_dist, item_dist)
    return originals, out


def _sample_record(strategy: str, s: augment.AugmentedSample) -> dict:
    return {
        "strategy": strategy,
        "sequence_key": s.base.key,
        "user_id": s.base.user_id,
        "future_genres": list(s.future_genres),
        "future_items": list(s.future_items),
        "n_o": s.n_o,
        "n_c": s.n_c,
        "n_c_drawn": s.n_c_drawn,
        "provenance": s.provenance,
    }


def cmd_augment(ws: Workspace) -> int:
    catalog = ws.catalog()
    split = ws.split(catalog)
    originals, out = _augmented(ws, catalog, split)
    corpora = ws.root / "corpora"
    counts = {"original": len(originals)}
    for strategy, samples in out.items():
        counts[strategy] = _write_jsonl(corpora / f"{strategy}.jsonl", (_sample_record(strategy, s) for s in samples))
    _write_json(corpora / "manifest.json", {
        "config_hash": ws.cfg.hash,
        "augment": ws.cfg.augment_config().to_dict(),
        "counts": counts,
    })
    print(f"augmented corpora written to {corpora}: {counts}")
    return EXIT_OK


def _baseline_samples(split: DatasetSplit, catalog: ItemCatalog, domain: str):
    div, cot = [], []
    for seq in split.train:
        history = codec.history_pairs(seq, catalog)
        genres = data.genres_by_frequency(data.future_genres(seq, catalog))
        titles = codec.item_list_output(catalog.title(i) for i in seq.future_ids)
        div.append(codec.render_baseline(Task.BIGREC_DIV, history, k=len(genres), domain=domain).with_output(titles))
        cot.append(codec.render_baseline(Task.BIGREC_COT_STAGE1, history, k=len(genres), domain=domain)
                   .with_output(codec.format_genres(genres)))
        cot.append(codec.render_baseline(Task.BIGREC_COT_STAGE2, history, genres=genres, domain=domain)
                   .with_output(titles))
    return div, cot


def cmd_export_sft(ws: Workspace) -> int:
    catalog = ws.catalog()
    split = ws.split(catalog)
    domain = ws.cfg["domain"]
    originals, out = _augmented(ws, catalog, split)
    sft = ws.root / "corpora" / "sft"
    sft.mkdir(parents=True, exist_ok=True)
    files = {}
    for task in (Task.GP, Task.GF, Task.IP):
        corpus = augment.assemble(originals, out, task, catalog, domain)
        name = f"{task.value.lower()}.jsonl"
        codec.export_sft(corpus.samples, sft / name)
        files[name] = corpus.manifest
    div, cot = _baseline_samples(split, catalog, domain)
    files["bigrec_div.jsonl"] = {"total": codec.export_sft(div, sft / "bigrec_div.jsonl")}
    files["bigrec_cot.jsonl"] = {"total": codec.export_sft(cot, sft / "bigrec_cot.jsonl")}
    _write_json(sft / "manifest.json", {
        "config_hash": ws.cfg.hash,
        "template_version": codec.template_version(),
        "files": files,
    })
    print(f"instruction datasets written to {sft}")
    return EXIT_OK


def _requests(ws: Workspace, ctx: RunContext) -> list[ControlRequest]:
    run = ws.cfg["run"]
    method = Method(run["method"])
    seqs = _eval_sequences(ws, ctx.split)
    if run["n_c"] == "true":
        return [ControlRequest(s, len(set(data.future_genres(s, ctx.catalog))), method) for s in seqs]
    ncs = run["n_c"] if isinstance(run["n_c"], list) else [run["n_c"]]
    return [ControlRequest(s, nc, method) for nc in ncs for s in seqs]


def cmd_run(ws: Workspace) -> int:
    ctx = _context(ws)
    requests = _requests(ws, ctx)
    results = ctx.pipeline.run_many(requests, ws.cfg["backend"]["max_in_flight"])
    runs = ws.root / "runs"
    _write_jsonl(runs / "results.jsonl", _records(ws, results))
    failed = sum(not r.ok for r in results)
    _write_json(runs / "manifest.json", _manifest(
        ws, ctx, method=ws.cfg["run"]["method"], n_c=ws.cfg["run"]["n_c"],
        requests=len(results), failed=failed,
    ))
    # wall-clock numbers vary run to run, so they live apart from the results
    _write_json(runs / "timings.json", [r.timings for r in results])
    print(f"{len(results)} requests, {failed} failed -> {runs / 'results.jsonl'}")
    return _failure_exit(results)


def _report_metadata(ws: Workspace, results: list[PipelineResult]) -> dict:
    return {
        "config_hash": ws.cfg.hash,
        "recall_denominator": "|truth| (10 for fixed splits)",
        "requests": len(results),
        "failed": sum(not r.ok for r in results),
    }


def _reports_by_method(ws: Workspace, results: list[PipelineResult], catalog: ItemCatalog) -> dict[str, EvalReport]:
    reports = {}
    for method in dict.fromkeys(r.method for r in results):
        subset = [r for r in results if r.method == method]
        lists = score(subset, catalog)
        if not lists:
            log.warning("method %s has no successful lists", method)
            continue
        report = aggregate(lists, method)
        report.metadata = _report_metadata(ws, subset)
        reports[method] = report
    return reports


def cmd_eval(ws: Workspace, run_path: Path | None = None) -> int:
    path = run_path or ws.root / "runs" / "results.jsonl"
    if not path.exists():
        raise errors.ConfigError([f"run artifact {path} does not exist"])
    records = _read_jsonl(path)
    bad = {r.get("config_hash") for r in records} - {ws.cfg.hash}
    if bad:
        raise errors.ConfigError([
            f"run artifact {path} was produced under config {sorted(map(str, bad))[0][:12]}, "
            f"this config is {ws.cfg.hash[:12]}"
        ])
    results = [PipelineResult.from_record(r) for r in records]
    reports = _reports_by_method(ws, results, ws.catalog())
    out = ws.root / "reports"
    for method, report in reports.items():
        (out / f"{method.lower()}.json").write_text(report.to_json(), encoding="utf-8")
    table = render_table(reports) if reports else "no successful lists\n"
    (out / "table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    failed = sum(not r.ok for r in results)
    if failed:
        print(f"{failed} of {len(results)} requests failed")
    return _failure_exit(results)


def cov_slope(report: EvalReport) -> float | None:
    """Least-squares slope of mean Cov@10 against n_c."""
    if len(report.per_nc) < 2:
        return None
    ncs = sorted(report.per_nc)
    return float(np.polyfit(ncs, [report.per_nc[nc]["cov_at_10"] for nc in ncs], 1)[0])


def cmd_sweep(ws: Workspace) -> int:
    ctx = _context(ws)
    seqs = _eval_sequences(ws, ctx.split)
    n_cs = ws.cfg["sweep"]["n_c"]
    n_cs = n_cs if isinstance(n_cs, list) else [n_cs]
    results: list[PipelineResult] = []
    reports: dict[str, EvalReport] = {}
    for method in ws.cfg["sweep"]["methods"]:
        sw = sweep(ctx.pipeline, seqs, n_cs, method, ws.cfg["backend"]["max_in_flight"])
        results.extend(sw.results)
        lists = [m for r in sw.reports.values() for m in r.per_list]
        if lists:
            report = aggregate(lists, method)
            report.metadata = {**_report_metadata(ws, sw.results), "cov_slope": cov_slope(report)}
            reports[method] = report
    _write_jsonl(ws.root / "runs" / "sweep_results.jsonl", _records(ws, results))
    _write_json(ws.root / "runs" / "sweep_manifest.json", _manifest(
        ws, ctx, methods=ws.cfg["sweep"]["methods"], n_c=n_cs,
        requests=len(results), failed=sum(not r.ok for r in results),
    ))
    _write_json(ws.root / "reports" / "sweep.json", {m: r.to_dict() for m, r in reports.items()})
    table = render_table(reports) if reports else "no successful lists\n"
    (ws.root / "reports" / "sweep_table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    for method, report in reports.items():
        print(f"{method}: Cov@10 slope over n_c = {report.metadata['cov_slope']}")
    return _failure_exit(results)


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlcrec", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dlcrec {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=Path, help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a scalar config field, e.g. backend.kind=oracle_noisy")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="build and persist the dataset splits")
    sub.add_parser("augment", parents=[common], help="write GF/IP augmented corpora")
    sub.add_parser("export-sft", parents=[common], help="write instruction-tuning JSON-lines files")
    sub.add_parser("run", parents=[common], help="run the configured method over the evaluation split")
    ev = sub.add_parser("eval", parents=[common], help="score a run artifact")
    ev.add_argument("--run", dest="run_path", type=Path, help="results.jsonl (default: the run directory's)")
    sub.add_parser("sweep", parents=[common], help="run every control number and report Cov against n_c")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        ws = Workspace(RunConfig.load(args.config, args.overrides))
        ws.init()
        if args.command == "eval":
            return cmd_eval(ws, args.run_path)
        return {
            "prepare": cmd_prepare,
            "augment": cmd_augment,
            "export-sft": cmd_export_sft,
            "run": cmd_run,
            "sweep": cmd_sweep,
        }[args.command](ws)
    except errors.ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (errors.BackendError, errors.ProviderFailure) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except errors.DLCRecError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
