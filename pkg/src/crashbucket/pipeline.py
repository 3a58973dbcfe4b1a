"""Pipeline stages: prepare -> embed -> cluster -> evaluate.

Each stage reads the previous stage's files from the output directory and
writes its own, so stages can be re-run independently. With the offline
provider every output is byte-identical across reruns.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .embed import (
    EmbeddingCache,
    EmbeddingVector,
    ProviderConfig,
    ProviderTransportError,
    combine_sources,
    embed_texts,
    make_provider,
    truncate_normalize,
)
from .hierarchy import NOISE, PointSet, build_hierarchy, pairwise_distances
from .ingest import load_corpus
from .metrics import GroundTruth, evaluate
from .preprocess import ALL_SOURCES, PreparedRecord, SourceConfig, Unpreparable, cap_text, collapse_duplicates, prepare
from .search import SearchParams, search

log = logging.getLogger(__name__)

PREPARED = "prepared.jsonl"
DUPLICATES = "duplicates.csv"
UNPREPARABLE = "unpreparable.csv"
VECTORS = "vectors.jsonl"
CLUSTERS = "clusters.csv"
SELECTION = "selection.json"
TREE = "condensed_tree.jsonl"
REPORT_JSON = "report.json"
REPORT_TXT = "report.txt"
RUN_LOG = "run.json"
CACHE_FILE = "embedding_cache.jsonl"


class StageError(Exception):
    """A stage could not complete; the message names the stage's problem."""


@dataclass
class RunConfig:
    out_dir: Path
    corpus: Path | None = None
    sources: SourceConfig = field(default_factory=SourceConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    search: SearchParams = field(default_factory=SearchParams)
    cache_path: Path | None = None
    truth: Path | None = None
    dump_tree: bool = False

    def resolved_cache(self) -> Path:
        if self.cache_path is not None:
            return Path(self.cache_path)
        env = os.environ.get("DEDUP_CACHE")
        return Path(env) if env else Path(self.out_dir) / CACHE_FILE

    def to_dict(self) -> dict:
        return {
            "corpus": str(self.corpus) if self.corpus else None,
            "sources": [k.value for k in self.sources.ordered()],
            "asan_keep_traces": self.sources.asan_keep_traces,
            "provider": dataclasses.asdict(self.provider),
            "search": dataclasses.asdict(self.search),
            "truth": str(self.truth) if self.truth else None,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _update_run_log(config: RunConfig, stage: str, data: dict) -> None:
    path = Path(config.out_dir) / RUN_LOG
    run = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    run["config"] = config.to_dict()
    run["config_hash"] = config.digest()
    run["versions"] = {
        "crashbucket": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }
    run[stage] = data
    _write_json(path, run)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"{stage}: missing input {path}")
    return path


# --- prepare ---------------------------------------------------------------

def cmd_prepare(config: RunConfig) -> dict:
    if config.corpus is None:
        raise StageError("prepare: no corpus directory given")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = load_corpus(config.corpus)

    prepared: list[PreparedRecord] = []
    failed: list[Unpreparable] = []
    for record in records:
        result = prepare(record, config.sources)
        (failed if isinstance(result, Unpreparable) else prepared).append(result)
    representatives, assignment = collapse_duplicates(prepared)

    with open(out / PREPARED, "w", encoding="utf-8", newline="\n") as fh:
        for rep in representatives:
            fh.write(rep.to_json() + "\n")
    with open(out / DUPLICATES, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "representative"])
        writer.writerows(assignment.items())
    with open(out / UNPREPARABLE, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "reason"])
        writer.writerows((u.id, u.reason) for u in failed)

    corpus_digest = hashlib.sha256()
    for rec in records:
        corpus_digest.update(json.dumps([rec.id, rec.trace_text, rec.asan_text]).encode())
    summary = {
        "total": len(records),
        "prepared": len(prepared),
        "representatives": len(representatives),
        "duplicate_classes": sum(1 for size in Counter(assignment.values()).values() if size > 1),
        "unpreparable": [{"id": u.id, "reason": u.reason} for u in failed],
        "corpus_hash": corpus_digest.hexdigest(),
    }
    _update_run_log(config, "prepare", summary)
    log.info(
        "prepare: %d crashes, %d unpreparable, %d representatives",
        len(records), len(failed), len(representatives),
    )
    return summary


def read_prepared(out_dir: Path) -> list[PreparedRecord]:
    path = _require(Path(out_dir) / PREPARED, "embed")
    with open(path, encoding="utf-8") as fh:
        return [PreparedRecord.from_json(line) for line in fh if line.strip()]


# --- embed -----------------------------------------------------------------

def cmd_embed(config: RunConfig, transport=None) -> dict:
    out = Path(config.out_dir)
    records = read_prepared(out)
    pconf = config.provider
    provider = make_provider(pconf, transport=transport)
    cache = EmbeddingCache(config.resolved_cache())

    truncated = []
    items: dict[str, str] = {}
    for rec in records:
        for kind, text in rec.texts.items():
            capped, cut = cap_text(text)
            if cut:
                truncated.append({"id": rec.id, "source": kind.value})
            items.setdefault(rec.hashes[kind], capped)
    cached = sum(1 for h in items if cache.get(provider.model_id, h) is not None)

    try:
        vectors = embed_texts(provider, cache, list(items.items()), pconf.batch_size, pconf.max_workers)
    except ProviderTransportError as exc:
        pending = set(exc.unresolved)
        ids = sorted({r.id for r in records for h in r.hashes.values() if h in pending})
        _update_run_log(config, "embed", {"error": str(exc), "unresolved_ids": ids})
        raise StageError(f"embed: {exc}; unresolved ids: {', '.join(ids)}") from exc
    finally:
        if hasattr(provider, "close"):
            provider.close()

    with open(out / VECTORS, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            per_source = {
                kind: truncate_normalize(vectors[rec.hashes[kind]], pconf.target_dim, name=f"{rec.id}/{kind.value}")
                for kind in ALL_SOURCES
                if kind in rec.hashes
            }
            combined = combine_sources(per_source)
            fh.write(json.dumps({"id": rec.id, "dim": combined.dim, "values": combined.values.tolist()}) + "\n")

    summary = {
        "vectors": len(records),
        "texts": len(items),
        "cache_hits": cached,
        "provider_calls": len(provider.calls),
        "truncated_texts": truncated,
        "model": provider.model_id,
    }
    _update_run_log(config, "embed", summary)
    log.info("embed: %d vectors, %d/%d texts from cache, %d provider calls", len(records), cached, len(items), len(provider.calls))
    return summary


def read_vectors(out_dir: Path) -> PointSet:
    path = _require(Path(out_dir) / VECTORS, "cluster")
    ids, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                ids.append(row["id"])
                rows.append(EmbeddingVector(row["values"]).values)
    if not ids:
        raise StageError("cluster: no vectors to cluster")
    return PointSet(np.array(rows), tuple(ids))


def _read_csv_pairs(path: Path) -> list[tuple[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return [(row[0], row[1]) for row in reader if row]


# --- cluster ---------------------------------------------------------------

def cmd_cluster(config: RunConfig) -> dict:
    out = Path(config.out_dir)
    points = read_vectors(out)
    duplicates = dict(_read_csv_pairs(_require(out / DUPLICATES, "cluster")))
    unpreparable_path = out / UNPREPARABLE
    unpreparable = [i for i, _ in _read_csv_pairs(unpreparable_path)] if unpreparable_path.exists() else []

    distances = pairwise_distances(points)
    hierarchy = None
    if points.n >= 2:
        _, _, hierarchy = build_hierarchy(points, distances=distances)
        if config.dump_tree:
            hierarchy.dump(out / TREE)
    result = search(points, hierarchy, config.search)
    best = result.best

    rep_label: dict[str, str] = {}
    for point_id, lab in zip(points.ids, best.clustering.labels.tolist()):
        rep_label[point_id] = f"noise-{point_id}" if lab == NOISE else str(lab)
    assignment: dict[str, str] = {}
    for crash_id, rep in duplicates.items():
        if rep not in rep_label:
            raise StageError(f"cluster: representative {rep!r} of {crash_id!r} has no vector")
        assignment[crash_id] = rep_label[rep]
    for crash_id in unpreparable:
        assignment[crash_id] = f"unpreparable-{crash_id}"

    with open(out / CLUSTERS, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "cluster"])
        writer.writerows(sorted(assignment.items()))

    selection = {
        "epsilon": best.epsilon,
        "dbcv": best.dbcv,
        "persistence": best.persistence,
        "effective_count": best.effective_count,
        "clusters": best.clustering.n_clusters,
        "noise": best.clustering.n_noise,
        "candidates_considered": len(result.candidates),
        "search_iterations": result.iterations,
        "candidates": [c.summary() for c in sorted(result.candidates, key=lambda c: c.epsilon)],
    }
    _write_json(out / SELECTION, selection)
    _update_run_log(config, "cluster", {k: v for k, v in selection.items() if k != "candidates"})
    log.info(
        "cluster: %d clusters + %d noise among %d representatives (eps=%.4g, dbcv=%.3f, persistence=%.3f)",
        best.clustering.n_clusters, best.clustering.n_noise, points.n, best.epsilon, best.dbcv, best.persistence,
    )
    return selection


# --- evaluate --------------------------------------------------------------

def cmd_evaluate(config: RunConfig) -> dict:
    out = Path(config.out_dir)
    if config.truth is None:
        raise StageError("evaluate: no ground-truth file given")
    assignment = dict(_read_csv_pairs(_require(out / CLUSTERS, "evaluate")))
    truth = GroundTruth.from_csv(_require(Path(config.truth), "evaluate"))
    report = evaluate(assignment, truth)
    (out / REPORT_JSON).write_text(report.to_json(), encoding="utf-8")
    (out / REPORT_TXT).write_text(report.to_text(), encoding="utf-8")
    summary = {k: v for k, v in report.to_dict().items() if k in ("clusters", "purity", "inverse_purity", "f_measure")}
    _update_run_log(config, "evaluate", summary)
    log.info("evaluate: purity=%.3f inverse=%.3f f=%.3f", report.purity, report.inverse_purity, report.f_measure)
    return report.to_dict()


def cmd_run(config: RunConfig, transport=None) -> dict:
    results = {
        "prepare": cmd_prepare(config),
        "embed": cmd_embed(config, transport=transport),
        "cluster": cmd_cluster(config),
    }
    if config.truth is not None:
        results["evaluate"] = cmd_evaluate(config)
    return results
