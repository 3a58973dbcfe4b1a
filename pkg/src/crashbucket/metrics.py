"""Scoring a clustering against ground-truth bug labels."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Mapping

import numpy as np

from .hierarchy import NOISE

UNTYPED = "Other"


class EvaluationError(Exception):
    pass


@dataclass(frozen=True)
class GroundTruth:
    labels: Mapping[str, str]
    bug_types: Mapping[str, str] | None = None

    @classmethod
    def from_csv(cls, path: str | Path) -> GroundTruth:
        labels: dict[str, str] = {}
        types: dict[str, str] = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            fields = reader.fieldnames or []
            if "id" not in fields or "label" not in fields:
                raise EvaluationError(f"{path}: header must be id,label[,bug_type]")
            has_type = "bug_type" in fields
            for row in reader:
                labels[row["id"]] = row["label"]
                if has_type:
                    types[row["label"]] = (row.get("bug_type") or "").strip() or types.get(row["label"], UNTYPED)
        return cls(labels, types if has_type else None)


@dataclass(frozen=True)
class Contingency:
    """Counts ``n(i, j) = |L_i ∩ C_j|`` with labels as rows, clusters as columns."""

    labels: tuple[str, ...]
    clusters: tuple[Hashable, ...]
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def label_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def cluster_sizes(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def count(self, label: str, cluster: Hashable) -> int:
        return int(self.counts[self.labels.index(label), self.clusters.index(cluster)])


def contingency(assignment: Mapping[str, Hashable], truth: GroundTruth | Mapping[str, str]) -> Contingency:
    """Label-by-cluster counts. Every ``NOISE`` point becomes its own cluster."""
    truth_labels = truth.labels if isinstance(truth, GroundTruth) else truth
    missing = set(assignment) ^ set(truth_labels)
    if missing:
        shown = ", ".join(sorted(missing)[:20])
        raise EvaluationError(f"clustering and ground truth cover different ids ({len(missing)}): {shown}")

    ids = sorted(assignment)
    columns = [("noise", i) if assignment[i] == NOISE else assignment[i] for i in ids]
    label_list = sorted(set(truth_labels[i] for i in ids))
    cluster_list = sorted(set(columns), key=repr)
    row = {lab: k for k, lab in enumerate(label_list)}
    col = {c: k for k, c in enumerate(cluster_list)}
    counts = np.zeros((len(label_list), len(cluster_list)), dtype=np.int64)
    for i, c in zip(ids, columns):
        counts[row[truth_labels[i]], col[c]] += 1
    return Contingency(tuple(label_list), tuple(cluster_list), counts)


def purity_scores(table: Contingency) -> tuple[float, float, float]:
    """(purity, inverse purity, F-measure)."""
    n = table.total
    if n < 1:
        raise EvaluationError("nothing to evaluate")
    counts = table.counts.astype(np.float64)
    label_sizes = table.label_sizes.astype(np.float64)
    cluster_sizes = table.cluster_sizes.astype(np.float64)

    precision = counts / cluster_sizes[None, :]
    recall = counts / label_sizes[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        f = np.where(counts > 0, 2 * precision * recall / (precision + recall), 0.0)

    purity = float(np.sum(cluster_sizes / n * precision.max(axis=0)))
    inverse = float(np.sum(label_sizes / n * recall.max(axis=1)))
    f_measure = float(np.sum(label_sizes / n * f.max(axis=1)))
    return purity, inverse, f_measure


def over_under(table: Contingency) -> dict[str, tuple[int, int]]:
    """Per label: (superfluous clusters, foreign labels sharing a cluster)."""
    present = table.counts > 0
    result = {}
    for i, label in enumerate(table.labels):
        cols = present[i]
        over = int(cols.sum()) - 1
        sharing = present[:, cols].any(axis=1)
        under = int(sharing.sum()) - 1
        result[label] = (over, under)
    return result


@dataclass(frozen=True)
class TypeStats:
    count: int
    over_mean: float
    over_std: float
    under_mean: float
    under_std: float


def aggregate_types(scores: Mapping[str, tuple[int, int]], bug_types: Mapping[str, str]) -> dict[str, TypeStats]:
    """Mean and population standard deviation of both scores per bug type."""
    groups: dict[str, list[tuple[int, int]]] = defaultdict(list)
    for label, pair in scores.items():
        groups[bug_types.get(label) or UNTYPED].append(pair)
    out = {}
    for kind in sorted(groups):
        arr = np.array(groups[kind], dtype=np.float64)
        out[kind] = TypeStats(
            count=len(arr),
            over_mean=float(arr[:, 0].mean()),
            over_std=float(arr[:, 0].std()),
            under_mean=float(arr[:, 1].mean()),
            under_std=float(arr[:, 1].std()),
        )
    return out


@dataclass
class EvalReport:
    clusters: int
    purity: float
    inverse_purity: float
    f_measure: float
    per_label: dict[str, tuple[int, int]]
    per_type: dict[str, TypeStats] | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "clusters": self.clusters,
            "purity": self.purity,
            "inverse_purity": self.inverse_purity,
            "f_measure": self.f_measure,
            "per_label": {k: {"overcounting": o, "undercounting": u} for k, (o, u) in self.per_label.items()},
        }
        if self.per_type is not None:
            out["per_type"] = {
                k: {
                    "labels": s.count,
                    "over_mean": s.over_mean,
                    "over_std": s.over_std,
                    "under_mean": s.under_mean,
                    "under_std": s.under_std,
                }
                for k, s in self.per_type.items()
            }
        if self.notes:
            out["notes"] = list(self.notes)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [
            f"{'Clusters':<16}{self.clusters:>6}",
            f"{'Purity':<16}{percent(self.purity):>5}%",
            f"{'Inverse purity':<16}{percent(self.inverse_purity):>5}%",
            f"{'F-measure':<16}{percent(self.f_measure):>5}%",
            "",
        ]
        width = max([5] + [len(k) for k in self.per_label])
        lines.append(f"{'Label':<{width}}  {'Over':>5}  {'Under':>5}")
        for label, (over, under) in self.per_label.items():
            lines.append(f"{label:<{width}}  {over:>5}  {under:>5}")
        if self.per_type is not None:
            lines.append("")
            tw = max([8] + [len(k) for k in self.per_type])
            lines.append(f"{'Bug type':<{tw}}  {'Bugs':>4}  {'Over μ':>6}  {'Over σ':>6}  {'Under μ':>7}  {'Under σ':>7}")
            for kind, s in self.per_type.items():
                lines.append(
                    f"{kind:<{tw}}  {s.count:>4}  {s.over_mean:>6.1f}  {s.over_std:>6.1f}  {s.under_mean:>7.1f}  {s.under_std:>7.1f}"
                )
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines) + "\n"


def percent(value: float) -> int:
    """Percentage rounded half-up to an integer."""
    return int(math.floor(value * 100 + 0.5))


def evaluate(assignment: Mapping[str, Hashable], truth: GroundTruth) -> EvalReport:
    table = contingency(assignment, truth)
    purity, inverse, f_measure = purity_scores(table)
    per_label = over_under(table)
    per_type = aggregate_types(per_label, truth.bug_types) if truth.bug_types is not None else None
    return EvalReport(
        clusters=len(table.clusters),
        purity=purity,
        inverse_purity=inverse,
        f_measure=f_measure,
        per_label=per_label,
        per_type=per_type,
        notes=["noise points are counted as singleton clusters"],
    )
