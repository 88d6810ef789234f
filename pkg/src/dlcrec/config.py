"""Run configuration: YAML file + ``--set`` overrides + defaults, validated up front."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .augment import STRATEGIES, AugmentConfig
from .backends import BACKEND_KINDS, BackendDescriptor
from .codec import DOMAINS
from .data import CATALOG_FORMATS, FUTURE_LEN, INTERACTION_FORMATS
from .errors import ConfigError
from .pipeline import Method

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs",
    "domain": "movie",
    "dataset": {
        "catalog": None,
        "catalog_format": "csv",
        "interactions": None,
        "interactions_format": "csv",
        "positive_policy": "rating",
    },
    "split": {"ratios": [8, 1, 1], "n_per_split": 1000},
    "augment": {"error_rate_r": 0.3, "nc_range": [1, 10], "mix": list(STRATEGIES)},
    "backend": {
        "kind": "oracle_truth",
        "endpoint": None,
        "model": "dlcrec",
        "token_env": "DLCREC_API_KEY",
        "genre_error": 0.0,
        "item_error": 0.0,
        "transcript": None,
        "max_in_flight": 4,
        "max_new_tokens": 1024,
    },
    "embedding": {"kind": "local_ngram", "dimension": 512},
    "run": {"method": "DLCREC", "n_c": "true", "split": "test", "dedupe": True, "limit": None},
    "sweep": {"n_c": list(range(1, 11)), "methods": ["DLCREC"]},
}

# keys left out of the hash: they change where artifacts go, not what they contain
_UNHASHED = ("output_dir",)


def _merge(base: dict, over: dict, prefix: str, problems: list[str]) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        path = f"{prefix}{key}"
        if key not in base:
            problems.append(f"{path}: unknown key")
        elif isinstance(base[key], dict):
            if not isinstance(val, dict):
                problems.append(f"{path}: expected a mapping")
            else:
                out[key] = _merge(base[key], val, path + ".", problems)
        else:
            out[key] = val
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b=value``; the value is parsed as a YAML scalar."""
    if "=" not in text:
        raise ConfigError([f"--set {text!r}: expected key=value"])
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw) if raw.strip() else None


def _apply_override(cfg: dict, path: list[str], value: Any, problems: list[str]) -> None:
    node = cfg
    for part in path[:-1]:
        if not isinstance(node.get(part), dict):
            problems.append(f"{'.'.join(path)}: unknown key")
            return
        node = node[part]
    if path[-1] not in node:
        problems.append(f"{'.'.join(path)}: unknown key")
    elif isinstance(node[path[-1]], dict):
        problems.append(f"{'.'.join(path)}: only scalar fields can be overridden")
    else:
        node[path[-1]] = value


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(cfg: dict, base_dir: Path) -> list[str]:
    """Every problem with ``cfg``, each naming its field."""
    p: list[str] = []
    if not _is_int(cfg["seed"]):
        p.append("seed: must be an integer")
    if cfg["domain"] not in DOMAINS:
        p.append(f"domain: must be one of {sorted(DOMAINS)}")

    ds = cfg["dataset"]
    for key, formats in (("catalog", CATALOG_FORMATS), ("interactions", INTERACTION_FORMATS)):
        path = ds[key]
        if not path:
            p.append(f"dataset.{key}: required")
        elif not (base_dir / path).exists():
            p.append(f"dataset.{key}: path {path!r} does not exist")
        if ds[f"{key}_format"] not in formats:
            p.append(f"dataset.{key}_format: must be one of {formats}")
    if ds["positive_policy"] not in ("rating", "playtime"):
        p.append("dataset.positive_policy: must be 'rating' or 'playtime'")

    sp = cfg["split"]
    ratios = sp["ratios"]
    if not (isinstance(ratios, list) and len(ratios) == 3 and all(_is_num(r) and r >= 0 for r in ratios)
            and sum(ratios) > 0):
        p.append("split.ratios: must be three nonnegative numbers with a positive sum")
    if not (_is_int(sp["n_per_split"]) and sp["n_per_split"] > 0):
        p.append("split.n_per_split: must be a positive integer")

    au = cfg["augment"]
    try:
        AugmentConfig(0, au["error_rate_r"], tuple(au["nc_range"]), tuple(au["mix"]))
    except (TypeError, ValueError) as exc:
        p.append(f"augment: {exc}")

    be = cfg["backend"]
    if be["kind"] not in BACKEND_KINDS:
        p.append(f"backend.kind: must be one of {BACKEND_KINDS}")
    for key in ("genre_error", "item_error"):
        if not (_is_num(be[key]) and 0.0 <= be[key] <= 1.0):
            p.append(f"backend.{key}: must lie in [0, 1]")
    for key in ("max_in_flight", "max_new_tokens"):
        if not (_is_int(be[key]) and be[key] >= 1):
            p.append(f"backend.{key}: must be a positive integer")
    if be["kind"] == "recorded" and not (be["transcript"] and (base_dir / be["transcript"]).exists()):
        p.append(f"backend.transcript: path {be['transcript']!r} does not exist")
    if be["kind"] == "remote" and not be["endpoint"]:
        p.append("backend.endpoint: required for the remote backend")

    em = cfg["embedding"]
    if em.get("kind") not in ("local_ngram", "remote"):
        p.append("embedding.kind: must be 'local_ngram' or 'remote'")
    if not (_is_int(em.get("dimension")) and em["dimension"] > 0):
        p.append("embedding.dimension: must be a positive integer")

    run = cfg["run"]
    methods = {m.value for m in Method}
    if run["method"] not in methods:
        p.append(f"run.method: must be one of {sorted(methods)}")
    if run["n_c"] != "true" and not _valid_ncs(run["n_c"]):
        p.append(f"run.n_c: must be 'true' or integers in [1, {FUTURE_LEN}]")
    if run["split"] not in ("train", "validation", "test"):
        p.append("run.split: must be train, validation or test")
    if not isinstance(run["dedupe"], bool):
        p.append("run.dedupe: must be true or false")
    if run["limit"] is not None and not (_is_int(run["limit"]) and run["limit"] > 0):
        p.append("run.limit: must be a positive integer or null")

    sw = cfg["sweep"]
    if not _valid_ncs(sw["n_c"]):
        p.append(f"sweep.n_c: must be integers in [1, {FUTURE_LEN}]")
    if not (isinstance(sw["methods"], list) and sw["methods"] and set(sw["methods"]) <= methods):
        p.append(f"sweep.methods: must be a nonempty subset of {sorted(methods)}")
    return p


def _valid_ncs(v: Any) -> bool:
    vals = v if isinstance(v, list) else [v]
    return bool(vals) and all(_is_int(x) and 1 <= x <= FUTURE_LEN for x in vals)


@dataclass
class RunConfig:
    data: dict
    base_dir: Path

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] = ()) -> "RunConfig":
        problems: list[str] = []
        raw: dict = {}
        base_dir = Path.cwd()
        if path is not None:
            path = Path(path)
            base_dir = path.resolve().parent
            try:
                raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
            except OSError as exc:
                raise ConfigError([f"config: cannot read {path}: {exc}"]) from exc
            except yaml.YAMLError as exc:
                raise ConfigError([f"config: invalid YAML: {exc}"]) from exc
            if not isinstance(raw, dict):
                raise ConfigError(["config: top level must be a mapping"])
        cfg = _merge(DEFAULTS, raw, "", problems)
        for text in overrides:
            key, value = parse_override(text)
            _apply_override(cfg, key, value, problems)
        # unknown keys never reach cfg, so the remaining fields can still be checked
        problems += validate(cfg, base_dir)
        if problems:
            raise ConfigError(problems)
        return cls(cfg, base_dir)

    def __getitem__(self, key: str) -> Any:
        return self.data[key]

    def path(self, rel: str) -> Path:
        return self.base_dir / rel

    def canonical(self) -> str:
        hashed = {k: v for k, v in self.data.items() if k not in _UNHASHED}
        return json.dumps(hashed, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    @property
    def run_dir(self) -> Path:
        return self.path(self.data["output_dir"]) / f"run-{self.hash[:12]}"

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def augment_config(self) -> AugmentConfig:
        au = self.data["augment"]
        return AugmentConfig(self.seed, float(au["error_rate_r"]), tuple(au["nc_range"]), tuple(au["mix"]))

    def backend_descriptor(self) -> BackendDescriptor:
        be = dict(self.data["backend"])
        transcript = be.pop("transcript")
        return BackendDescriptor(
            seed=self.seed,
            transcript=str(self.path(transcript)) if transcript else None,
            **be,
        )

    def snapshot(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)
