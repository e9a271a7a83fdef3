"""Command-line entry point: simulate, train, eval-lookback, eval-realtime, score.

Exit status is 0 on success, 1 on a runtime error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Iterator, Optional, TextIO

import numpy as np
import torch

from . import plots
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Cohort, Encounter, SimConfig, match_case_controls, parse_cohort, simulate_cohort, write_cohort
from .errors import MgpRnnError
from .evaluation import (
    LOOKBACK_HORIZONS,
    builtin_table,
    deviation_table,
    false_alarms_per_true_alarm,
    load_score_table,
    lookback_eval,
    realtime_curve,
    score_realtime,
    table_trace,
    write_lookback_csv,
    write_realtime_json,
)
from .model import Model, hour_score
from .trainer import TEST, TrainConfig, split_matched, split_of, train

DEFAULT_SEED = 17


class UsageError(Exception):
    pass


def parse_horizons(text: str) -> tuple:
    """``"0-12"`` or ``"0,2,4"`` (ranges inclusive, may be mixed)."""
    out = []
    try:
        for part in filter(None, (p.strip() for p in text.split(","))):
            if "-" in part:
                lo, hi = part.split("-")
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(float(part) if "." in part else int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad horizon list {text!r}") from None
    if not out or min(out) < 0:
        raise argparse.ArgumentTypeError("horizons must be a non-empty list of values >= 0")
    return tuple(out)


def _existing(path: Optional[str], flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag} {path}: no such file")
    return p


def _train_config_of(cp: Optional[Checkpoint], seed: int) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    if cp is not None and isinstance(cp.meta.get("config"), dict):
        return TrainConfig(**{k: v for k, v in cp.meta["config"].items() if k in known})
    return TrainConfig(rng_seed=seed)


def _print_json(obj, stream: TextIO) -> None:
    stream.write(json.dumps(obj) + "\n")
    stream.flush()


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    cfg = SimConfig(n_encounters=args.n, M=args.M, B=args.B, P=args.P, rng_seed=args.seed)
    if args.case_rate is not None:
        cfg.case_rate = args.case_rate
    cohort = simulate_cohort(cfg)
    write_cohort(cohort, args.out)
    encs = cohort.encounters
    _print_json(
        {
            "n": len(encs),
            "case_rate": float(np.mean([e.is_case for e in encs])) if encs else None,
            "mean_los_hours": float(np.mean([e.los for e in encs])) if encs else None,
        },
        sys.stdout,
    )
    return 0


def cmd_train(args) -> int:
    path = _existing(args.cohort, "--cohort")
    if args.out is None:
        raise UsageError("--out is required")
    cohort = parse_cohort(path)
    matched = match_case_controls(cohort, args.ratio)
    cfg = TrainConfig(rng_seed=args.seed, model=args.model)
    for name in ("max_epochs", "mc_samples", "learning_rate", "batch_size", "hidden", "patience"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    cp = train(matched, cfg, on_epoch=lambda rec: _print_json(rec, sys.stderr))
    save_checkpoint(cp, args.out)
    _print_json({"best_epoch": cp.meta["best_epoch"], "best_valid_auroc": cp.meta["best_valid_auroc"]}, sys.stdout)
    return 0


def _load_pair(args, need_checkpoint: bool = True):
    cohort = parse_cohort(_existing(args.cohort, "--cohort"))
    cp = None
    if need_checkpoint or args.checkpoint is not None:
        cp = load_checkpoint(_existing(args.checkpoint, "--checkpoint"), expected_dims=cohort.dims)
    return cohort, cp


def cmd_eval_lookback(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    cohort, cp = _load_pair(args)
    matched = match_case_controls(cohort, args.ratio)
    if args.split == "all":
        encs = list(matched.encounters)
    else:
        encs = split_matched(matched, _train_config_of(cp, args.seed))[TEST]
    rows = lookback_eval(cp.model, encs, horizons=args.horizons)
    write_lookback_csv(rows, args.out)
    plots.plot_lookback(rows, plots.figure_path(args.out), label=cp.model.kind)
    return 0


def _realtime_encounters(cohort: Cohort, cp, args) -> list:
    if args.split == "all":
        return list(cohort.encounters)
    cfg = _train_config_of(cp, args.seed)
    groups = match_case_controls(cohort, args.ratio).group_of()
    return [e for e in cohort.encounters if split_of(groups.get(e.id, e.id), cfg) == TEST]


def cmd_eval_realtime(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    cohort, cp = _load_pair(args, need_checkpoint=args.baseline in ("model", "deviation"))
    encs = _realtime_encounters(cohort, cp, args)
    if args.baseline == "model":
        traces = [score_realtime(cp, e) for e in encs]
    else:
        if args.table_config is not None:
            table = load_score_table(_existing(args.table_config, "--table-config"))
        elif args.baseline == "news":
            table = builtin_table("news")
        else:
            table = deviation_table(cp.model.center, cp.model.scale)
        traces = [table_trace(e, table) for e in encs]
    thresholds = None if args.threshold is None else [args.threshold]
    curve = realtime_curve(traces, thresholds)
    write_realtime_json(curve, args.out)
    plots.plot_realtime(curve, plots.figure_path(args.out), label=args.baseline)
    try:
        fa = false_alarms_per_true_alarm(curve)
    except MgpRnnError:
        fa = None
    _print_json({"baseline": args.baseline, "n_encounters": len(encs), "fa_per_ta_at_80sens": fa}, sys.stdout)
    return 0


# ---------------------------------------------------------------------------
# streaming


class StreamRejection(ValueError):
    pass


class StreamScorer:
    """Per-encounter state for line-by-line scoring.

    Each update carries an ``id``, new ``obs`` ([m, t, v]) and ``meds`` ([p, t])
    events, and optionally ``los``, the elapsed time of the update. The first
    update for an id must carry ``baseline``. Event times must be later than the
    previous update's time and no later than this one's. The reply is the risk
    at hour floor(los) from data up to that hour.
    """

    def __init__(self, model: Model):
        self.model = model
        self.state = {}

    def _events(self, rec, key, width):
        items = rec.get(key, [])
        if not isinstance(items, list) or any(not isinstance(x, list) or len(x) != width for x in items):
            raise StreamRejection(f"{key} must be a list of length-{width} lists")
        return items

    def update(self, rec) -> dict:
        if not isinstance(rec, dict) or "id" not in rec:
            raise StreamRejection("update must be an object with an 'id'")
        eid = str(rec["id"])
        M, B, P = self.model.dims
        st = self.state.get(eid)
        if st is None:
            if "baseline" not in rec:
                raise StreamRejection(f"{eid}: first update must carry 'baseline'")
            try:
                baseline = [float(b) for b in rec["baseline"]]
            except (TypeError, ValueError):
                raise StreamRejection(f"{eid}: baseline must be numeric") from None
            if len(baseline) != B or not all(map(math.isfinite, baseline)):
                raise StreamRejection(f"{eid}: baseline must be {B} finite numbers")
            st = {"baseline": baseline, "obs": [], "meds": [], "now": None}
        try:
            obs = [(int(m), float(t), float(v)) for m, t, v in self._events(rec, "obs", 3)]
            meds = [(int(p), float(t)) for p, t in self._events(rec, "meds", 2)]
        except (TypeError, ValueError):
            raise StreamRejection(f"{eid}: non-numeric event") from None
        times = [t for _, t, _ in obs] + [t for _, t in meds]
        if not all(math.isfinite(t) and t >= 0 for t in times) or not all(math.isfinite(v) for *_, v in obs):
            raise StreamRejection(f"{eid}: event times must be finite and >= 0 and values finite")
        if any(not 0 <= m < M for m, _, _ in obs) or any(not 0 <= p < P for p, _ in meds):
            raise StreamRejection(f"{eid}: series or drug index out of range")
        prev = st["now"]
        if prev is not None and any(t <= prev for t in times):
            raise StreamRejection(f"{eid}: out-of-order event at or before previous update time {prev}")
        now = rec.get("los")
        if now is None:
            now = max(times + ([prev] if prev is not None else []), default=0.0)
        try:
            now = float(now)
        except (TypeError, ValueError):
            raise StreamRejection(f"{eid}: los must be numeric") from None
        if not math.isfinite(now) or (prev is not None and now < prev) or now < 0:
            raise StreamRejection(f"{eid}: update time {now} goes backwards")
        if times and max(times) > now:
            raise StreamRejection(f"{eid}: event after the update time {now}")

        st = {"baseline": st["baseline"], "obs": st["obs"] + obs, "meds": st["meds"] + meds, "now": now}
        self.state[eid] = st
        hour = int(math.floor(now))
        e = Encounter(
            id=eid,
            los=now,
            label="control",
            baseline=st["baseline"],
            obs_series=[o[0] for o in st["obs"]],
            obs_times=[o[1] for o in st["obs"]],
            obs_values=[o[2] for o in st["obs"]],
            med_drugs=[m[0] for m in st["meds"]],
            med_times=[m[1] for m in st["meds"]],
        )
        with torch.no_grad():
            risk = hour_score(self.model, self.model.standardize(e), hour)
        return {"id": eid, "hour": hour, "risk": risk}


def encounter_updates(e: Encounter) -> Iterator[dict]:
    """Replay an encounter as one update per hour (events in (h-1, h] at hour h)."""
    for h in range(int(math.floor(e.los)) + 1):
        lo = h - 1 if h else -math.inf
        obs = [[int(m), float(t), float(v)] for m, t, v in zip(e.obs_series, e.obs_times, e.obs_values) if lo < t <= h]
        meds = [[int(p), float(t)] for p, t in zip(e.med_drugs, e.med_times) if lo < t <= h]
        rec = {"id": e.id, "los": float(h), "obs": obs, "meds": meds}
        if h == 0:
            rec["baseline"] = e.baseline.tolist()
        yield rec


def run_stream(model: Model, lines, out: TextIO, err: TextIO) -> int:
    """Score each input line in arrival order; returns the number of rejected lines."""
    scorer = StreamScorer(model)
    rejected = 0
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            reply = scorer.update(rec)
        except (json.JSONDecodeError, StreamRejection) as exc:
            rejected += 1
            err.write(f"line {lineno}: rejected: {exc}\n")
            err.flush()
            continue
        _print_json(reply, out)
    return rejected


def cmd_score(args) -> int:
    cp = load_checkpoint(_existing(args.checkpoint, "--checkpoint"))
    run_stream(cp.model, sys.stdin, sys.stdout, sys.stderr)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgprnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, cohort=True, checkpoint=False, out=True):
        if cohort:
            p.add_argument("--cohort", help="cohort JSON-lines file")
        if checkpoint:
            p.add_argument("--checkpoint", help="model checkpoint file")
        if out:
            p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)

    p = sub.add_parser("simulate", help="write a synthetic cohort")
    common(p, cohort=False)
    p.add_argument("--n", type=int, default=SimConfig.n_encounters)
    p.add_argument("--M", type=int, default=SimConfig.M)
    p.add_argument("--B", type=int, default=SimConfig.B)
    p.add_argument("--P", type=int, default=SimConfig.P)
    p.add_argument("--case-rate", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="match, train and save a checkpoint")
    common(p)
    p.add_argument("--model", choices=("mgp", "raw"), default="mgp")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--mc-samples", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--ratio", type=int, default=4, help="controls per case")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-lookback", help="matched lookback metrics (CSV + PNG)")
    common(p, checkpoint=True)
    p.add_argument("--horizons", type=parse_horizons, default=LOOKBACK_HORIZONS)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--ratio", type=int, default=4)
    p.set_defaults(func=cmd_eval_lookback)

    p = sub.add_parser("eval-realtime", help="hourly alarm evaluation (JSON + PNG)")
    common(p, checkpoint=True)
    p.add_argument("--baseline", choices=("model", "news", "deviation"), default="model")
    p.add_argument("--table-config", help="score table JSON for table baselines")
    p.add_argument("--threshold", type=float, help="evaluate a single threshold instead of a sweep")
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--ratio", type=int, default=4)
    p.set_defaults(func=cmd_eval_realtime)

    p = sub.add_parser("score", help="stream hourly risk for JSON-lines updates on stdin")
    common(p, cohort=False, checkpoint=True, out=False)
    p.set_defaults(func=cmd_score)
    return parser


def _apply_threads() -> None:
    value = os.environ.get("MGP_THREADS")
    if value is None:
        return
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"MGP_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"MGP_THREADS must be a positive integer, got {value!r}")
    torch.set_num_threads(n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads()
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (MgpRnnError, OSError, ValueError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
