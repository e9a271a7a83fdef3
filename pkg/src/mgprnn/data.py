"""Encounter data model, cohort I/O, synthetic cohorts and case-control matching."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit, logit
from scipy.optimize import brentq

from .errors import ConfigError, InsufficientControlsError, ParseError, ValidationError

CASE = "case"
CONTROL = "control"


def id_hash(*parts) -> int:
    """Stable 64-bit hash of the string forms of ``parts`` (process-independent)."""
    h = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Encounter:
    """One admission: irregular observations, medication events, baseline and label.

    Observations are kept as three parallel arrays (series index, time, value)
    sorted by time then series; medication events likewise (drug, time).
    """

    id: str
    los: float
    label: str
    baseline: np.ndarray
    obs_series: np.ndarray
    obs_times: np.ndarray
    obs_values: np.ndarray
    med_drugs: np.ndarray = field(default_factory=lambda: _frozen([], np.int64))
    med_times: np.ndarray = field(default_factory=lambda: _frozen([], np.float64))
    event_time: Optional[float] = None
    prediction_time: Optional[float] = None

    def __post_init__(self):
        s = _frozen(self.obs_series, np.int64)
        t = _frozen(self.obs_times, np.float64)
        v = _frozen(self.obs_values, np.float64)
        if not (len(s) == len(t) == len(v)):
            raise ValidationError(self.id, "obs", "ragged observation arrays")
        order = np.lexsort((s, t))
        d = _frozen(self.med_drugs, np.int64)
        mt = _frozen(self.med_times, np.float64)
        if len(d) != len(mt):
            raise ValidationError(self.id, "meds", "ragged medication arrays")
        morder = np.lexsort((d, mt))
        object.__setattr__(self, "obs_series", _frozen(s[order], np.int64))
        object.__setattr__(self, "obs_times", _frozen(t[order], np.float64))
        object.__setattr__(self, "obs_values", _frozen(v[order], np.float64))
        object.__setattr__(self, "med_drugs", _frozen(d[morder], np.int64))
        object.__setattr__(self, "med_times", _frozen(mt[morder], np.float64))
        object.__setattr__(self, "baseline", _frozen(self.baseline, np.float64))
        object.__setattr__(self, "los", float(self.los))
        if self.event_time is not None:
            object.__setattr__(self, "event_time", float(self.event_time))
        if self.prediction_time is not None:
            object.__setattr__(self, "prediction_time", float(self.prediction_time))

    @property
    def is_case(self) -> bool:
        return self.label == CASE

    @property
    def anchor(self) -> Optional[float]:
        """Event time for cases, assigned prediction time for controls."""
        return self.event_time if self.is_case else self.prediction_time

    @property
    def n_obs(self) -> int:
        return len(self.obs_times)

    def __eq__(self, other):
        if not isinstance(other, Encounter):
            return NotImplemented
        arrays = ("baseline", "obs_series", "obs_times", "obs_values", "med_drugs", "med_times")
        return (
            self.id == other.id
            and self.los == other.los
            and self.label == other.label
            and self.event_time == other.event_time
            and self.prediction_time == other.prediction_time
            and all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
        )

    def validate(self, M: int, B: int, P: int) -> "Encounter":
        eid = self.id
        if not math.isfinite(self.los) or self.los < 0:
            raise ValidationError(eid, "los", f"must be finite and >= 0, got {self.los}")
        if self.label not in (CASE, CONTROL):
            raise ValidationError(eid, "label", f"must be 'case' or 'control', got {self.label!r}")
        if len(self.baseline) != B:
            raise ValidationError(eid, "baseline", f"expected length {B}, got {len(self.baseline)}")
        if not np.all(np.isfinite(self.baseline)):
            raise ValidationError(eid, "baseline", "non-finite entry")
        for name, times in (("obs", self.obs_times), ("meds", self.med_times)):
            if len(times) and (
                not np.all(np.isfinite(times)) or times.min() < 0 or times.max() > self.los
            ):
                raise ValidationError(eid, name, f"times must lie in [0, los={self.los}]")
        if not np.all(np.isfinite(self.obs_values)):
            raise ValidationError(eid, "obs", "non-finite value")
        if len(self.obs_series) and (self.obs_series.min() < 0 or self.obs_series.max() >= M):
            raise ValidationError(eid, "obs", f"series index outside [0, {M})")
        if len(self.med_drugs) and (self.med_drugs.min() < 0 or self.med_drugs.max() >= P):
            raise ValidationError(eid, "meds", f"drug index outside [0, {P})")
        if self.is_case:
            if self.event_time is None:
                raise ValidationError(eid, "event_time", "case requires event_time")
            if self.prediction_time is not None:
                raise ValidationError(eid, "prediction_time", "case must not carry prediction_time")
            if not (0 <= self.event_time <= self.los):
                raise ValidationError(eid, "event_time", "must lie in [0, los]")
        else:
            if self.event_time is not None:
                raise ValidationError(eid, "event_time", "control must not carry event_time")
            if self.prediction_time is not None and not (0 <= self.prediction_time <= self.los):
                raise ValidationError(eid, "prediction_time", "must lie in [0, los]")
        return self


@dataclass(frozen=True)
class Cohort:
    encounters: tuple
    M: int
    B: int
    P: int

    def __post_init__(self):
        object.__setattr__(self, "encounters", tuple(self.encounters))
        ids = [e.id for e in self.encounters]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValidationError(dup, "id", "duplicate encounter id")
        for e in self.encounters:
            e.validate(self.M, self.B, self.P)

    @property
    def dims(self) -> tuple:
        return (self.M, self.B, self.P)

    def __len__(self):
        return len(self.encounters)

    def by_id(self) -> dict:
        return {e.id: e for e in self.encounters}


# ---------------------------------------------------------------------------
# JSON-lines I/O


def encounter_to_record(e: Encounter) -> dict:
    rec = {
        "id": e.id,
        "los": e.los,
        "label": e.label,
        "event_time": e.event_time,
        "baseline": e.baseline.tolist(),
        "obs": [[int(m), float(t), float(v)] for m, t, v in zip(e.obs_series, e.obs_times, e.obs_values)],
        "meds": [[int(p), float(t)] for p, t in zip(e.med_drugs, e.med_times)],
    }
    if e.prediction_time is not None:
        rec["prediction_time"] = e.prediction_time
    return rec


def encounter_from_record(rec: dict) -> Encounter:
    obs = rec.get("obs", [])
    meds = rec.get("meds", [])
    if any(len(o) != 3 for o in obs):
        raise ValueError("each obs entry must be [m, t, v]")
    if any(len(m) != 2 for m in meds):
        raise ValueError("each meds entry must be [p, t]")
    for o in obs:
        if float(o[0]) != int(o[0]):
            raise ValueError("series index must be an integer")
    return Encounter(
        id=str(rec["id"]),
        los=float(rec["los"]),
        label=rec["label"],
        baseline=[float(b) for b in rec["baseline"]],
        obs_series=[int(o[0]) for o in obs],
        obs_times=[float(o[1]) for o in obs],
        obs_values=[float(o[2]) for o in obs],
        med_drugs=[int(m[0]) for m in meds],
        med_times=[float(m[1]) for m in meds],
        event_time=rec.get("event_time"),
        prediction_time=rec.get("prediction_time"),
    )


def dumps_cohort(cohort: Cohort) -> str:
    lines = [json.dumps({"M": cohort.M, "B": cohort.B, "P": cohort.P})]
    lines += [json.dumps(encounter_to_record(e)) for e in cohort.encounters]
    return "\n".join(lines) + "\n"


def write_cohort(cohort: Cohort, path) -> None:
    Path(path).write_text(dumps_cohort(cohort), encoding="utf-8")


def loads_cohort(text: str) -> Cohort:
    lines = text.split("\n")
    header = None
    encounters = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(lineno, str(exc)) from None
        if header is None:
            try:
                header = (int(rec["M"]), int(rec["B"]), int(rec["P"]))
            except (KeyError, TypeError, ValueError):
                raise ParseError(lineno, "first record must be a header {M, B, P}") from None
            continue
        try:
            e = encounter_from_record(rec)
        except ValidationError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(lineno, f"malformed encounter: {exc}") from None
        e.validate(*header)
        encounters.append(e)
    if header is None:
        raise ParseError(1, "missing header record")
    return Cohort(encounters, *header)


def parse_cohort(path) -> Cohort:
    """Read a JSON-lines cohort file (header line, then one encounter per line)."""
    return loads_cohort(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# truncation


def truncate_encounter(e: Encounter, horizon: float) -> Encounter:
    """Keep only observations and medication events with time <= horizon."""
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    keep = e.obs_times <= horizon
    mkeep = e.med_times <= horizon
    return replace(
        e,
        obs_series=e.obs_series[keep],
        obs_times=e.obs_times[keep],
        obs_values=e.obs_values[keep],
        med_drugs=e.med_drugs[mkeep],
        med_times=e.med_times[mkeep],
    )


# ---------------------------------------------------------------------------
# simulation


@dataclass
class SimConfig:
    n_encounters: int = 1000
    case_rate: float = 0.214
    M: int = 34
    B: int = 35
    P: int = 8
    mean_los_hours: float = 121.7
    sd_los_hours: float = 108.1
    min_los_hours: float = 4.0
    obs_rate_per_series: float = 0.1
    med_rate_per_drug: float = 0.02
    truth: Optional[object] = None  # MgpParams; default_truth(M, P) when None
    hazard_weights: Optional[Sequence[float]] = None
    hazard_bias: Optional[float] = None  # calibrated to case_rate when None
    rng_seed: int = 17

    def validate(self):
        if not (0 < self.case_rate < 1):
            raise ConfigError("case_rate must lie in (0, 1)")
        for name in ("mean_los_hours", "sd_los_hours", "obs_rate_per_series", "med_rate_per_drug"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.n_encounters < 0:
            raise ConfigError("n_encounters must be >= 0")
        if min(self.M, self.P) < 1 or self.B < 0:
            raise ConfigError("dims must satisfy M >= 1, P >= 1, B >= 0")
        if self.hazard_weights is not None and len(self.hazard_weights) != self.M:
            raise ConfigError(f"hazard_weights must have length M={self.M}")


def _calibrate_bias(case_rate: float, eta: np.ndarray) -> float:
    """Bias b with mean(logistic(b + eta)) = case_rate over the simulated predictors."""
    if len(eta) == 0 or np.ptp(eta) < 1e-12:
        return float(logit(case_rate)) - (float(eta[0]) if len(eta) else 0.0)
    f = lambda b: float(np.mean(expit(b + eta))) - case_rate
    return brentq(f, -60.0 - eta.max(), 60.0 - eta.min())


def _ou_paths(times: np.ndarray, lengthscale: float, n: int, rng) -> np.ndarray:
    """Exact draws of n independent unit OU processes at sorted times, shape (len(times), n)."""
    out = np.empty((len(times), n))
    if len(times) == 0:
        return out
    out[0] = rng.standard_normal(n)
    for i in range(1, len(times)):
        rho = math.exp(-(times[i] - times[i - 1]) / lengthscale)
        out[i] = rho * out[i - 1] + math.sqrt(max(1.0 - rho * rho, 0.0)) * rng.standard_normal(n)
    return out


def simulate_cohort(cfg: SimConfig) -> Cohort:
    """Draw a cohort from a ground-truth medication-mean MGP with logistic hazard labels.

    The latent process is sum_q L_q u_q(t) with u_q independent unit OU
    processes, which has exactly the sum-of-separable covariance with
    coregionalization matrices L_q L_q^T.
    """
    from .kernel import default_truth, medication_mean_np

    cfg.validate()
    M, B, P = cfg.M, cfg.B, cfg.P
    truth = cfg.truth if cfg.truth is not None else default_truth(M, P, seed=cfg.rng_seed)
    t_np = truth.numpy()
    coreg = np.tril(t_np["coreg_factor"])
    lengthscales = np.exp(t_np["log_lengthscale"])
    noise_sd = np.exp(t_np["log_noise"])
    if coreg.shape[1:] != (M, M) or t_np["med_alpha"].shape[1:] != (P, M):
        raise ConfigError("ground-truth parameter dims do not match (M, P)")
    if not (np.all(np.isfinite(lengthscales)) and np.all(lengthscales > 0) and np.all(noise_sd > 0)):
        raise ConfigError("ground-truth kernel parameters must be finite and positive")
    K = sum(c @ c.T for c in coreg)
    if np.linalg.eigvalsh(K).min() <= 1e-12 * max(1.0, np.abs(K).max()):
        raise ConfigError("ground-truth coregionalization is not positive definite")

    w = np.zeros(M) if cfg.hazard_weights is None else np.asarray(cfg.hazard_weights, float)

    rng = np.random.default_rng(cfg.rng_seed)
    drafts = []
    width = len(str(max(cfg.n_encounters - 1, 0)))
    for i in range(cfg.n_encounters):
        los = -1.0
        while los < cfg.min_los_hours:
            los = rng.normal(cfg.mean_los_hours, cfg.sd_los_hours)
        los = round(los, 3)
        baseline = rng.standard_normal(B)

        n_med = rng.poisson(cfg.med_rate_per_drug * los, size=P)
        med_drugs = np.repeat(np.arange(P), n_med)
        med_times = np.round(rng.uniform(0, los, size=n_med.sum()), 3)

        n_per = rng.poisson(cfg.obs_rate_per_series * los, size=M)
        obs_series = np.repeat(np.arange(M), n_per)
        obs_times = np.round(rng.uniform(0, los, size=n_per.sum()), 3)
        candidate = round(float(rng.uniform(0, los)), 3)

        # latent values at every observation time plus the candidate event time
        all_times = np.concatenate([obs_times, [candidate]])
        uniq, inv = np.unique(all_times, return_inverse=True)
        latent = np.zeros((len(uniq), M))
        for q in range(len(lengthscales)):
            latent += _ou_paths(uniq, lengthscales[q], M, rng) @ coreg[q].T
        mean_at = lambda m, t: medication_mean_np(m, t, med_drugs, med_times, t_np)
        f_obs = latent[inv[: len(obs_times)], obs_series] + mean_at(obs_series, obs_times)
        f_cand = latent[inv[-1]] + mean_at(np.arange(M), np.full(M, candidate))
        obs_values = np.round(f_obs + noise_sd[obs_series] * rng.standard_normal(len(obs_times)), 6)
        drafts.append(
            dict(
                id=f"enc{i:0{width}d}",
                los=los,
                baseline=np.round(baseline, 6),
                obs_series=obs_series,
                obs_times=obs_times,
                obs_values=obs_values,
                med_drugs=med_drugs,
                med_times=med_times,
                candidate=candidate,
                eta=float(w @ f_cand),
            )
        )

    bias = cfg.hazard_bias
    if bias is None:
        bias = _calibrate_bias(cfg.case_rate, np.array([d["eta"] for d in drafts]))
    u = rng.uniform(size=len(drafts))
    encounters = []
    for d, ui in zip(drafts, u):
        is_case = ui < expit(bias + d.pop("eta"))
        candidate = d.pop("candidate")
        encounters.append(
            Encounter(label=CASE if is_case else CONTROL, event_time=candidate if is_case else None, **d)
        )
    return Cohort(encounters, M, B, P)


# ---------------------------------------------------------------------------
# case-control matching


@dataclass(frozen=True)
class MatchedCohort:
    pairs: tuple  # ((case_id, (control_id, ...)), ...)
    encounters: tuple  # matched cases then their controls, with prediction_time set
    M: int
    B: int
    P: int

    @property
    def dims(self):
        return (self.M, self.B, self.P)

    def by_id(self) -> dict:
        return {e.id: e for e in self.encounters}

    def group_of(self) -> dict:
        """Map every matched encounter id to its case id."""
        g = {}
        for case_id, ctrls in self.pairs:
            g[case_id] = case_id
            for c in ctrls:
                g[c] = case_id
        return g


def _match_features(encs: Iterable[Encounter]) -> np.ndarray:
    return np.array([np.concatenate([[math.log(max(e.los, 1e-3))], e.baseline]) for e in encs])


def match_case_controls(cohort: Cohort, ratio: int = 4) -> MatchedCohort:
    """Greedy nearest-neighbour matching of each case to `ratio` controls.

    Distance is Euclidean over standardized (log LOS, baseline); cases are
    processed in descending LOS order and controls are used at most once.
    Each matched control's prediction time sits at the same fraction of its
    stay as the case's event time.
    """
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    cases = [e for e in cohort.encounters if e.is_case]
    controls = [e for e in cohort.encounters if not e.is_case]
    need = ratio * len(cases)
    if len(controls) < need:
        raise InsufficientControlsError(need, len(controls))
    if not cases:
        return MatchedCohort((), (), *cohort.dims)

    feats = _match_features(cohort.encounters)
    sd = feats.std(axis=0)
    sd[sd < 1e-12] = 1.0
    mu = feats.mean(axis=0)
    fc = (_match_features(cases) - mu) / sd
    fk = (_match_features(controls) - mu) / sd

    available = np.ones(len(controls), dtype=bool)
    order = sorted(range(len(cases)), key=lambda i: (-cases[i].los, cases[i].id))
    pairs, matched_cases, matched_controls = [], [], []
    for ci in order:
        case = cases[ci]
        d = np.sqrt(((fk - fc[ci]) ** 2).sum(axis=1))
        d[~available] = np.inf
        picks = np.argsort(d, kind="stable")[:ratio]
        available[picks] = False
        frac = case.event_time / case.los if case.los > 0 else 0.0
        ctrl_ids = []
        for k in picks:
            c = controls[k]
            matched_controls.append(replace(c, prediction_time=min(frac * c.los, c.los)))
            ctrl_ids.append(c.id)
        pairs.append((case.id, tuple(ctrl_ids)))
        matched_cases.append(case)
    return MatchedCohort(tuple(pairs), tuple(matched_cases + matched_controls), *cohort.dims)
