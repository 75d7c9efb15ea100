"""Detection metrics: ROC area, standardized partial ROC area, reporting.

``auc`` uses the rank (Mann-Whitney) estimator with half credit for ties,
which equals the trapezoidal area under the tie-grouped ROC curve. ``pauc``
integrates that same piecewise-linear ROC over the false-positive range
[0, p] and divides by p so a perfect detector scores 1.0 at any p.

``report`` aggregates hierarchically: per (machine type, machine id), then
the mean over ids within a type, then the mean over types. Groups where a
metric is undefined (only one class present) are flagged and excluded from
the means.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, MetricUndefinedError

SCORE_HEADER = ["clip_id", "machine_type", "machine_id", "label", "score"]
LABELS = ("normal", "anomalous")


@dataclass(frozen=True)
class ScoreRecord:
    clip_id: str
    machine_type: str
    machine_id: str
    label: str
    score: float

    def __post_init__(self):
        if self.label not in LABELS:
            raise ContractError(f"ScoreRecord: label must be normal/anomalous, got {self.label!r}")
        if not np.isfinite(self.score):
            raise ContractError(f"ScoreRecord: non-finite score for {self.clip_id!r}")


def _split_scores(records) -> tuple[np.ndarray, np.ndarray]:
    normal = np.array([r.score for r in records if r.label == "normal"], dtype=np.float64)
    anomalous = np.array([r.score for r in records if r.label == "anomalous"], dtype=np.float64)
    if normal.size == 0 or anomalous.size == 0:
        raise MetricUndefinedError(
            f"need both classes, got {normal.size} normal / {anomalous.size} anomalous"
        )
    return normal, anomalous


def _tie_averaged_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # mean of ranks i+1 .. j+1
        i = j + 1
    return ranks


def auc(records) -> float:
    """Probability that an anomalous clip outscores a normal one, ties half."""
    normal, anomalous = _split_scores(records)
    pooled = np.concatenate([anomalous, normal])
    ranks = _tie_averaged_ranks(pooled)
    m = anomalous.size
    u = ranks[:m].sum() - m * (m + 1) / 2.0
    return float(u / (m * normal.size))


def roc_points(records) -> np.ndarray:
    """Tie-grouped ROC corners [(fpr, tpr), ...] from (0,0) to (1,1), thresholds descending."""
    normal, anomalous = _split_scores(records)
    thresholds = np.unique(np.concatenate([normal, anomalous]))[::-1]
    points = [(0.0, 0.0)]
    fp = 0
    tp = 0
    for t in thresholds:
        fp += int(np.sum(normal == t))
        tp += int(np.sum(anomalous == t))
        points.append((fp / normal.size, tp / anomalous.size))
    return np.array(points)


def pauc(records, p: float = 0.1) -> float:
    """Partial ROC area over false-positive rate [0, p], divided by p."""
    if not (0.0 < p <= 1.0):
        raise ContractError(f"pauc: p must be in (0, 1], got {p}")
    points = roc_points(records)
    area = 0.0
    for (f0, t0), (f1, t1) in zip(points[:-1], points[1:]):
        if f1 <= p or f1 == f0:
            if f1 <= p:
                area += (f1 - f0) * (t0 + t1) / 2.0
            continue
        if f0 >= p:
            break
        # segment crosses the cutoff; interpolate tpr at fpr = p
        t_at_p = t0 + (t1 - t0) * (p - f0) / (f1 - f0)
        area += (p - f0) * (t0 + t_at_p) / 2.0
        break
    return float(area / p)


# ---------------------------------------------------------------------------
# reporting


@dataclass
class MetricReport:
    per_id: dict  # (type, id) -> (auc, pauc) or None when undefined
    per_type: dict  # type -> (mean auc, mean pauc) or None
    overall: tuple | None  # (mean auc, mean pauc) over types
    undefined: list = field(default_factory=list)  # [(type, id), ...]


def aggregate(per_id: dict) -> MetricReport:
    """Hierarchical means from per-(type, id) metric pairs (None = undefined)."""
    undefined = sorted(key for key, value in per_id.items() if value is None)
    per_type: dict = {}
    for machine_type in sorted({t for t, _ in per_id}):
        cells = [v for (t, _), v in per_id.items() if t == machine_type and v is not None]
        if cells:
            per_type[machine_type] = (
                float(np.mean([c[0] for c in cells])),
                float(np.mean([c[1] for c in cells])),
            )
        else:
            per_type[machine_type] = None
    defined_types = [v for v in per_type.values() if v is not None]
    overall = None
    if defined_types:
        overall = (
            float(np.mean([v[0] for v in defined_types])),
            float(np.mean([v[1] for v in defined_types])),
        )
    return MetricReport(per_id=dict(per_id), per_type=per_type, overall=overall,
                        undefined=undefined)


def report(records, p: float = 0.1) -> MetricReport:
    """Group records by (machine type, machine id) and aggregate their metrics."""
    if not records:
        raise ContractError("report: no records")
    groups: dict = {}
    for r in records:
        groups.setdefault((r.machine_type, r.machine_id), []).append(r)
    per_id = {}
    for key, group in sorted(groups.items()):
        try:
            per_id[key] = (auc(group), pauc(group, p))
        except MetricUndefinedError:
            per_id[key] = None
    return aggregate(per_id)


def report_to_csv(rep: MetricReport, path=None, config_hash: str | None = None) -> str:
    """Serialize a report; returns the CSV text and optionally writes it."""
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["level", "machine_type", "machine_id", "auc", "pauc"])

    def fmt(value):
        return "undefined" if value is None else f"{value:.6f}"

    for (t, i), cell in sorted(rep.per_id.items()):
        writer.writerow(["machine_id", t, i,
                         fmt(cell and cell[0]), fmt(cell and cell[1])])
    for t, cell in sorted(rep.per_type.items()):
        writer.writerow(["machine_type", t, "",
                         fmt(cell and cell[0]), fmt(cell and cell[1])])
    writer.writerow(["overall", "", "",
                     fmt(rep.overall and rep.overall[0]), fmt(rep.overall and rep.overall[1])])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def report_to_text(rep: MetricReport) -> str:
    """Aligned table with AUC/pAUC as percentages."""
    lines = [f"{'machine':<24}{'AUC %':>10}{'pAUC %':>10}"]

    def fmt(cell):
        if cell is None:
            return f"{'undef':>10}{'undef':>10}"
        return f"{100 * cell[0]:>10.2f}{100 * cell[1]:>10.2f}"

    for (t, i), cell in sorted(rep.per_id.items()):
        lines.append(f"{t + '/' + i:<24}{fmt(cell)}")
    for t, cell in sorted(rep.per_type.items()):
        lines.append(f"{t + ' (mean)':<24}{fmt(cell)}")
    lines.append(f"{'overall':<24}{fmt(rep.overall)}")
    if rep.undefined:
        lines.append("undefined cells: " + ", ".join(f"{t}/{i}" for t, i in rep.undefined))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# score CSV I/O


def write_scores(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_HEADER)
        for r in records:
            writer.writerow([r.clip_id, r.machine_type, r.machine_id, r.label, repr(r.score)])


def read_scores(path) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise DataError(f"{path}: bad score CSV header {header}")
        return [ScoreRecord(row[0], row[1], row[2], row[3], float(row[4])) for row in reader]
