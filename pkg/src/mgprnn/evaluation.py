"""Validation protocols, ranking metrics, alarm logic and table-based baselines."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import Encounter, truncate_encounter
from .errors import ConfigError, UndefinedMetricError, ValidationError
from .rnn import carry_forward_featurize  # noqa: F401  (re-exported baseline featurizer)

log = logging.getLogger(__name__)

REALTIME_WINDOW_HOURS = 48.0
LOOKBACK_HORIZONS = tuple(range(13))


# ---------------------------------------------------------------------------
# ranking metrics


def _check_binary(scores, labels):
    s = np.asarray(scores, float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if y.all() or not y.any():
        raise UndefinedMetricError("metric needs at least one positive and one negative")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney rank statistic; tied pairs count one half."""
    s, y = _check_binary(scores, labels)
    r = rankdata(s)
    n_pos, n_neg = y.sum(), (~y).sum()
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _counts_by_threshold(s, y):
    """tp, fp at each distinct score used as a '>=' threshold, thresholds descending."""
    thr = np.unique(s)[::-1]
    order = np.argsort(-s, kind="stable")
    ss, yy = s[order], y[order]
    # last index of each distinct score block in descending order
    ends = np.searchsorted(-ss, -thr, side="right") - 1
    tp = np.cumsum(yy)[ends]
    fp = np.cumsum(~yy)[ends]
    return thr, tp, fp


def pr_auc(scores, labels) -> float:
    """Step-wise area under the precision-recall curve: sum_k (R_k - R_{k-1}) P_k."""
    s, y = _check_binary(scores, labels)
    _, tp, fp = _counts_by_threshold(s, y)
    recall = tp / y.sum()
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    sensitivity: float
    precision: Optional[float]
    fpr: float
    false_alarms_per_true_alarm: Optional[float]


@dataclass(frozen=True)
class MetricCurve:
    points: tuple  # CurvePoint, thresholds ascending


def metric_curve(scores, labels) -> MetricCurve:
    s, y = _check_binary(scores, labels)
    thr, tp, fp = _counts_by_threshold(s, y)
    pts = []
    for t, a, b in zip(thr[::-1], tp[::-1], fp[::-1]):
        pts.append(
            CurvePoint(
                float(t),
                float(a / y.sum()),
                float(a / (a + b)) if a + b else None,
                float(b / (~y).sum()),
                float(b / a) if a else None,
            )
        )
    return MetricCurve(tuple(pts))


def _fa_per_ta_from_points(points, sensitivity: float) -> float:
    ok = [p for p in points if p["sensitivity"] is not None and p["sensitivity"] >= sensitivity - 1e-12]
    if not ok:
        raise UndefinedMetricError(f"sensitivity {sensitivity} is not attainable")
    best = max(ok, key=lambda p: p["threshold"])
    if best["tp"] == 0:
        raise UndefinedMetricError("no true alarms at the selected threshold")
    return best["fp"] / best["tp"]


def false_alarms_per_true_alarm(source, labels=None, sensitivity: float = 0.80) -> float:
    """fp / tp at the largest threshold whose sensitivity reaches the target.

    ``source`` is either a score vector (with ``labels``) or a sequence of
    confusion-curve points (dicts with threshold, tp, fp, sensitivity), such as
    the output of realtime_curve.
    """
    if labels is None:
        return _fa_per_ta_from_points(list(source), sensitivity)
    s, y = _check_binary(source, labels)
    thr, tp, fp = _counts_by_threshold(s, y)
    pts = [
        {"threshold": float(t), "tp": int(a), "fp": int(b), "sensitivity": a / y.sum()}
        for t, a, b in zip(thr, tp, fp)
    ]
    return _fa_per_ta_from_points(pts, sensitivity)


# ---------------------------------------------------------------------------
# real-time validation


@dataclass(frozen=True)
class ScoreTrace:
    encounter_id: str
    hours: np.ndarray
    scores: np.ndarray
    label: str
    event_time: Optional[float] = None

    def __post_init__(self):
        h = np.asarray(self.hours)
        if len(h) > 1 and np.any(np.diff(h) <= 0):
            raise ValueError("trace hours must be strictly increasing")

    @property
    def is_case(self) -> bool:
        return self.label == "case"


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def sensitivity(self) -> Optional[float]:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None

    @property
    def precision(self) -> Optional[float]:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else None

    @property
    def fa_per_ta(self) -> Optional[float]:
        return self.fp / self.tp if self.tp else None


def score_realtime(model, e: Encounter) -> ScoreTrace:
    """Hourly risk trace, each hour computed from data up to that hour only."""
    from .checkpoint import Checkpoint
    from .model import realtime_scores

    m = model.model if isinstance(model, Checkpoint) else model
    m.check_dims((m.M, len(e.baseline), m.P))
    if len(e.obs_series) and e.obs_series.max() >= m.M:
        raise ValidationError(e.id, "obs", f"series index exceeds model M={m.M}")
    scores = realtime_scores(m, e)
    return ScoreTrace(e.id, np.arange(len(scores)), scores, e.label, e.event_time)


def _classify(trace: ScoreTrace, first_alarm: Optional[float], window: float) -> str:
    if not trace.is_case:
        return "fp" if first_alarm is not None else "tn"
    if trace.event_time is None:
        raise ValidationError(trace.encounter_id, "event_time", "case trace lacks event_time")
    if first_alarm is None or first_alarm > trace.event_time:
        return "fn"
    if first_alarm >= trace.event_time - window:
        return "tp"
    return "fp"


def realtime_confusion(traces: Sequence[ScoreTrace], threshold: float, window: float = REALTIME_WINDOW_HOURS) -> ConfusionMatrix:
    """Classify each encounter by its first hour with score >= threshold."""
    counts = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
    for tr in traces:
        hit = np.nonzero(np.asarray(tr.scores) >= threshold)[0]
        first = float(tr.hours[hit[0]]) if len(hit) else None
        counts[_classify(tr, first, window)] += 1
    return ConfusionMatrix(**counts)


def realtime_curve(
    traces: Sequence[ScoreTrace], thresholds=None, window: float = REALTIME_WINDOW_HOURS, max_points: int = 2000
) -> list:
    """Confusion counts and derived rates over a threshold sweep (ascending)."""
    if thresholds is None:
        allv = np.unique(np.concatenate([np.asarray(t.scores, float) for t in traces])) if traces else np.array([])
        if len(allv) > max_points:
            allv = np.unique(np.quantile(allv, np.linspace(0, 1, max_points)))
        thresholds = allv
    thresholds = np.sort(np.asarray(thresholds, float))
    # first alarm index per trace and threshold via the running maximum
    status = np.empty((len(traces), len(thresholds)), dtype="<U2")
    for i, tr in enumerate(traces):
        cm = np.maximum.accumulate(np.asarray(tr.scores, float)) if len(tr.scores) else np.array([])
        idx = np.searchsorted(cm, thresholds, side="left")
        for j, k in enumerate(idx):
            first = float(tr.hours[k]) if k < len(cm) else None
            status[i, j] = _classify(tr, first, window)
    out = []
    for j, t in enumerate(thresholds):
        col = status[:, j]
        cmx = ConfusionMatrix(*(int((col == k).sum()) for k in ("tp", "fp", "tn", "fn")))
        out.append(
            {
                "threshold": float(t),
                "tp": cmx.tp,
                "fp": cmx.fp,
                "tn": cmx.tn,
                "fn": cmx.fn,
                "sensitivity": cmx.sensitivity,
                "precision": cmx.precision,
                "fa_per_ta": cmx.fa_per_ta,
            }
        )
    return out


def write_realtime_json(curve: list, path) -> None:
    Path(path).write_text(json.dumps(curve, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# matched lookback validation


def _scorer_fn(scorer) -> Callable:
    from .checkpoint import Checkpoint
    from .model import Model, final_step_scores

    if isinstance(scorer, Checkpoint):
        scorer = scorer.model
    if isinstance(scorer, Model):
        return lambda encs, cuts: final_step_scores(scorer, encs, cuts)
    return scorer


def lookback_eval(scorer, encounters: Sequence[Encounter], horizons=LOOKBACK_HORIZONS, sensitivity: float = 0.80, stats=None) -> list:
    """Metrics from data truncated ``h`` hours before each anchor, for every h.

    ``scorer`` is a Model, Checkpoint, or callable(encounters, cutoffs) -> scores.
    Encounters whose anchor - h falls before admission are scored on
    admission-time data; the number is counted in ``stats["clamped"]``.
    """
    fn = _scorer_fn(scorer)
    labels = np.array([e.is_case for e in encounters])
    anchors = np.array([e.anchor for e in encounters], float)
    rows = []
    for h in horizons:
        cut = anchors - h
        clamped = int((cut < 0).sum())
        if clamped:
            log.warning("horizon %s: %d encounters scored on admission-only data", h, clamped)
            if stats is not None:
                stats["clamped"] = stats.get("clamped", 0) + clamped
        scores = np.asarray(fn(list(encounters), np.maximum(cut, 0.0)), float)
        try:
            fa = false_alarms_per_true_alarm(scores, labels, sensitivity)
        except UndefinedMetricError:
            fa = float("nan")
        rows.append(
            {
                "horizon_hours": h,
                "auroc": roc_auc(scores, labels),
                "aupr": pr_auc(scores, labels),
                "fa_per_ta_at_80sens": fa,
            }
        )
    return rows


def write_lookback_csv(rows: list, path) -> None:
    cols = ["horizon_hours", "auroc", "aupr", "fa_per_ta_at_80sens"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])


# ---------------------------------------------------------------------------
# table-based early-warning scores


@dataclass(frozen=True)
class Band:
    lo: Optional[float]  # inclusive; None means -inf
    hi: Optional[float]  # exclusive; None means +inf
    points: int

    def contains(self, v: float) -> bool:
        return (self.lo is None or v >= self.lo) and (self.hi is None or v < self.hi)


@dataclass(frozen=True)
class ScoreTable:
    """Per-variable bands partitioning the real line; the score sums band points."""

    bands: dict  # variable name -> tuple of Band

    def __post_init__(self):
        for name, bands in self.bands.items():
            if not bands:
                raise ConfigError(f"variable {name!r} has no bands")
            if bands[0].lo is not None or bands[-1].hi is not None:
                raise ConfigError(f"bands for {name!r} must start at -inf and end at +inf")
            for a, b in zip(bands, bands[1:]):
                if a.hi is None or b.lo is None or a.hi != b.lo:
                    raise ConfigError(f"bands for {name!r} are not contiguous at {a.hi}")
                if not a.hi > (a.lo if a.lo is not None else -math.inf):
                    raise ConfigError(f"empty band for {name!r}")
            for b in bands:
                if b.points < 0 or int(b.points) != b.points:
                    raise ConfigError(f"points for {name!r} must be non-negative integers")

    def points(self, name: str, value: Optional[float]) -> int:
        bands = self.bands[name]
        if value is None:
            return self.normal_points(name)
        for b in bands:
            if b.contains(value):
                return int(b.points)
        raise ConfigError(f"value {value} not covered for {name!r}")

    def normal_points(self, name: str) -> int:
        return min(int(b.points) for b in self.bands[name])

    def max_total(self) -> int:
        return sum(max(int(b.points) for b in bands) for bands in self.bands.values())

    def min_total(self) -> int:
        return sum(self.normal_points(n) for n in self.bands)


def parse_score_table(obj: dict) -> ScoreTable:
    if not isinstance(obj, dict) or not obj:
        raise ConfigError("score table must be a non-empty JSON object")
    bands = {}
    try:
        for name, lst in obj.items():
            bands[name] = tuple(Band(b.get("lo"), b.get("hi"), int(b["points"])) for b in lst)
    except (AttributeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed score table: {exc}") from None
    return ScoreTable(bands)


def load_score_table(path) -> ScoreTable:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"score table is not valid JSON: {exc}") from None
    return parse_score_table(obj)


def score_table_to_json(table: ScoreTable) -> dict:
    return {n: [{"lo": b.lo, "hi": b.hi, "points": b.points} for b in bands] for n, bands in table.bands.items()}


def builtin_table(name: str) -> ScoreTable:
    """A score table shipped with the package (currently ``"news"``)."""
    from importlib import resources

    res = resources.files("mgprnn") / "tables" / f"{name}.json"
    if not res.is_file():
        raise ConfigError(f"no built-in score table named {name!r}")
    return parse_score_table(json.loads(res.read_text(encoding="utf-8")))


def default_series_map(table: ScoreTable) -> dict:
    """Integer-named variables map to that series; otherwise variables map to 0, 1, ... in table order."""
    names = list(table.bands)
    try:
        return {name: int(name) for name in names}
    except ValueError:
        return {name: i for i, name in enumerate(names)}


def table_score(values: dict, table: ScoreTable) -> int:
    """Sum of band points for the most recent value of each table variable.

    Variables absent from ``values`` (or None) score their normal-range points.
    """
    return sum(table.points(name, values.get(name)) for name in table.bands)


def deviation_table(center, scale) -> ScoreTable:
    """Symmetric table on each series: 0 within 1 sd, 1 within 2 sd, 3 beyond."""
    bands = {}
    for m, (c, s) in enumerate(zip(center, scale)):
        edges = [c - 2 * s, c - s, c + s, c + 2 * s]
        pts = [3, 1, 0, 1, 3]
        lo = [None] + edges
        hi = edges + [None]
        bands[str(m)] = tuple(Band(a, b, p) for a, b, p in zip(lo, hi, pts))
    return ScoreTable(bands)


def table_trace(e: Encounter, table: ScoreTable, series_map: Optional[dict] = None) -> ScoreTrace:
    """Hourly table score (normalized to [0, 1]) using the last value seen per variable."""
    if series_map is None:
        series_map = default_series_map(table)
    hours = np.arange(int(math.floor(e.los)) + 1)
    lo, span = table.min_total(), max(table.max_total() - table.min_total(), 1)
    scores = np.empty(len(hours))
    for h in hours:
        et = truncate_encounter(e, h)
        last = {}
        for m, v in zip(et.obs_series, et.obs_values):
            last[int(m)] = float(v)  # observations are time-sorted, so the last write wins
        vals = {name: last.get(idx) for name, idx in series_map.items()}
        scores[h] = (table_score(vals, table) - lo) / span
    return ScoreTrace(e.id, hours, scores, e.label, e.event_time)
