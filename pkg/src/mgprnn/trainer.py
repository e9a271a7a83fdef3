"""Joint training of MGP hyperparameters and LSTM weights.

The objective is the Monte Carlo estimate of the expected replicated loss
under the MGP posterior; gradients flow through z = mean + R xi by autograd.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data import Encounter, MatchedCohort, id_hash, truncate_encounter
from .errors import ConfigError, NumericalError, UndefinedMetricError
from .evaluation import roc_auc
from .kernel import DTYPE, GridSpec, MgpParams, init_mgp_params
from .model import MGP, RAW, Model, final_step_scores
from .posterior import draw_exact, posterior_or_prior
from .rnn import (
    ReplicationWindow,
    RnnParams,
    carry_forward_values,
    frame_width,
    init_rnn_params,
    lstm_logits,
    pad_sequences,
    replicated_bce_logits,
    static_features,
    target_indices,
)

log = logging.getLogger(__name__)

TRAIN, VALID, TEST = "train", "valid", "test"


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 100
    mc_samples: int = 10
    max_epochs: int = 50
    patience: int = 5
    l2_lambda: float = 1e-4
    rng_seed: int = 17
    train_frac: float = 0.8
    valid_frac: float = 0.1
    test_frac: float = 0.1
    hidden: int = 64
    n_kernels: int = 3
    n_med_terms: int = 3
    pre_hours: float = 2.0
    post_hours: float = 6.0
    model: str = MGP

    def validate(self):
        if abs(self.train_frac + self.valid_frac + self.test_frac - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size >= 1, max_epochs >= 0 and patience >= 1 required")
        if self.model not in (MGP, RAW):
            raise ConfigError(f"model must be {MGP!r} or {RAW!r}")

    @property
    def window(self) -> ReplicationWindow:
        return ReplicationWindow(self.pre_hours, self.post_hours)


def split_of(group_key: str, cfg: TrainConfig) -> str:
    u = id_hash(cfg.rng_seed, "split", group_key) / 2.0**64
    if u < cfg.train_frac:
        return TRAIN
    if u < cfg.train_frac + cfg.valid_frac:
        return VALID
    return TEST


def split_matched(matched: MatchedCohort, cfg: TrainConfig) -> dict:
    """Split matched encounters by hashing their case id, keeping groups together."""
    groups = matched.group_of()
    out = {TRAIN: [], VALID: [], TEST: []}
    for e in sorted(matched.encounters, key=lambda e: e.id):
        out[split_of(groups[e.id], cfg)].append(e)
    return out


def series_stats(encounters: Sequence[Encounter], M: int):
    """Per-series mean, standard deviation and median of raw observation values."""
    center, scale, median = np.zeros(M), np.ones(M), np.zeros(M)
    if not encounters:
        return center, scale, median
    s = np.concatenate([e.obs_series for e in encounters])
    v = np.concatenate([e.obs_values for e in encounters])
    for m in range(M):
        vals = v[s == m]
        if len(vals):
            center[m] = vals.mean()
            median[m] = np.median(vals)
            if len(vals) > 1 and vals.std() > 1e-12:
                scale[m] = vals.std()
    return center, scale, median


# ---------------------------------------------------------------------------
# adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """Bias-corrected Adam update; returns new parameter tensors and the state."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = {}
    with torch.no_grad():
        for k, p in params.items():
            g = torch.as_tensor(grads[k], dtype=DTYPE)
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {k!r} {tuple(p.shape)}")
            m = state.m.get(k, torch.zeros_like(g))
            v = state.v.get(k, torch.zeros_like(g))
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            state.m[k], state.v[k] = m, v
            out[k] = p.detach() - lr * (m / bc1) / (torch.sqrt(v / bc2) + state.eps)
    return out, state


# ---------------------------------------------------------------------------
# objective


@dataclass
class TrainItem:
    """An encounter prepared for the training objective (standardized, truncated)."""

    encounter: Encounter
    grid: GridSpec
    static: np.ndarray
    targets: np.ndarray
    cf_values: Optional[np.ndarray] = None


def prepare_item(e_std: Encounter, window: ReplicationWindow, M: int, P: int, fill_values=None) -> TrainItem:
    """Truncate at anchor + post-window hours (or discharge) and precompute frame parts."""
    if e_std.anchor is None:
        raise ValueError(f"encounter {e_std.id!r} has no anchor; match controls first")
    horizon = min(e_std.anchor + window.post_hours, e_std.los)
    et = truncate_encounter(e_std, horizon)
    grid = GridSpec.for_horizon(horizon)
    static = static_features(et, grid, M, P)
    targets = target_indices(e_std.anchor, grid.n_points, window, e_std.id)
    cf = None if fill_values is None else carry_forward_values(et, grid, fill_values, M)
    return TrainItem(et, grid, static, targets, cf)


def _param_dict(mgp: Optional[MgpParams], rnn: RnnParams) -> dict:
    d = {}
    if mgp is not None:
        d.update({f"mgp.{k}": v for k, v in mgp.tensors().items()})
    d.update({f"rnn.{k}": v for k, v in rnn.tensors().items()})
    return d


def _from_dict(d: dict):
    mgp_part = {k[4:]: v for k, v in d.items() if k.startswith("mgp.")}
    mgp = MgpParams(**mgp_part) if mgp_part else None
    rnn = RnnParams(**{k[4:]: v for k, v in d.items() if k.startswith("rnn.")})
    return mgp, rnn


def draw_noise(key: Sequence[int], item: TrainItem, M: int, S: int) -> np.ndarray:
    """Standard-normal xi for one encounter, seeded by (key, encounter id) only."""
    rng = np.random.default_rng([*key, id_hash(item.encounter.id) % 2**32])
    return rng.standard_normal((S, item.grid.n_points * M))


def encounter_losses(
    items: Sequence[TrainItem],
    mgp: Optional[MgpParams],
    rnn: RnnParams,
    S: int,
    key: Sequence[int],
    xi: Optional[dict] = None,
    stats: Optional[dict] = None,
) -> torch.Tensor:
    """Replicated cross-entropy per encounter, averaged over its S draws.

    ``mgp=None`` evaluates the carry-forward baseline (items need cf_values).
    Encounters whose posterior fails numerically are dropped and counted in
    ``stats["dropped"]``.
    """
    seqs, meta = [], []
    for it in items:
        static = torch.as_tensor(it.static, dtype=DTYPE)
        if mgp is None:
            seqs.append(torch.cat([torch.as_tensor(it.cf_values, dtype=DTYPE), static], 1))
            meta.append((it, 1))
            continue
        M = mgp.M
        X = it.grid.n_points
        noise = xi[it.encounter.id] if xi is not None else draw_noise(key, it, M, S)
        try:
            post = posterior_or_prior(it.encounter, it.grid, mgp, with_cov=True)
            z = draw_exact(post, np.atleast_2d(noise))
        except NumericalError as exc:
            log.warning("dropping %s: %s", it.encounter.id, exc)
            if stats is not None:
                stats["dropped"] = stats.get("dropped", 0) + 1
            continue
        zs = z.reshape(z.shape[0], M, X).transpose(1, 2)
        seqs.extend(torch.cat([zs, static.expand(z.shape[0], X, static.shape[1])], 2))
        meta.append((it, z.shape[0]))
    if not seqs:
        return torch.zeros(0, dtype=DTYPE)
    x, _ = pad_sequences(seqs)
    logits = lstm_logits(rnn, x)
    per_enc = []
    row = 0
    for it, n in meta:
        per_enc.append(replicated_bce_logits(logits[row : row + n], it.targets, it.encounter.is_case).mean())
        row += n
    return torch.stack(per_enc)


def _chunks(items: Sequence[TrainItem], S: int, max_seqs: int):
    items = sorted(items, key=lambda it: (it.grid.n_points, it.encounter.id))
    per = max(1, max_seqs // max(S, 1))
    for i in range(0, len(items), per):
        yield items[i : i + per]


def mc_expected_loss(
    items: Sequence[TrainItem],
    mgp: Optional[MgpParams],
    rnn: RnnParams,
    S: int,
    key: Sequence[int],
    l2_lambda: float = 0.0,
    xi: Optional[dict] = None,
    stats: Optional[dict] = None,
    max_seqs: int = 400,
) -> torch.Tensor:
    """Mean over encounters and S posterior draws of the replicated loss, plus L2.

    ``xi`` optionally maps encounter id to a fixed (S, X*M) noise array;
    otherwise noise is drawn per encounter from (key, id), so the value does
    not depend on batch order.
    """
    items = sorted(items, key=lambda it: it.encounter.id)
    parts = [encounter_losses(c, mgp, rnn, S, key, xi, stats) for c in _chunks(items, S, max_seqs)]
    losses = torch.cat(parts)
    if len(losses) == 0:
        raise NumericalError("every encounter in the batch failed")
    loss = losses.mean()
    if l2_lambda:
        loss = loss + l2_lambda * rnn.l2()
    return loss


def compute_gradients(
    items: Sequence[TrainItem],
    mgp: Optional[MgpParams],
    rnn: RnnParams,
    S: int,
    key: Sequence[int],
    l2_lambda: float = 0.0,
    xi: Optional[dict] = None,
    stats: Optional[dict] = None,
    max_seqs: int = 400,
):
    """Value of mc_expected_loss and its gradient for every parameter block.

    The batch is processed in chunks of at most ``max_seqs`` sequences whose
    gradients are accumulated, which bounds memory without changing the result.
    """
    mgp_g = mgp.detached(requires_grad=True) if mgp is not None else None
    rnn_g = rnn.detached(requires_grad=True)
    params = _param_dict(mgp_g, rnn_g)
    items = sorted(items, key=lambda it: it.encounter.id)
    total, count = 0.0, 0
    for chunk in _chunks(items, S, max_seqs):
        losses = encounter_losses(chunk, mgp_g, rnn_g, S, key, xi, stats)
        if len(losses):
            losses.sum().backward()
            total += float(losses.detach().sum())
            count += len(losses)
    if count == 0:
        raise NumericalError("every encounter in the batch failed")
    out = {}
    for n, p in params.items():
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach() / count
        out[n] = g
    loss = total / count
    if l2_lambda:
        with torch.enable_grad():
            reg = l2_lambda * rnn_g.l2()
            for n in RnnParams.WEIGHTS:
                out[f"rnn.{n}"] = out[f"rnn.{n}"] + 2.0 * l2_lambda * getattr(rnn_g, n).detach()
        loss += float(reg.detach())
    for n, g in out.items():
        if not torch.all(torch.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter block {n!r}")
    return loss, out


# ---------------------------------------------------------------------------
# training loop


def init_model(cfg: TrainConfig, dims, train_encounters: Sequence[Encounter]) -> Model:
    M, B, P = dims
    center, scale, median = series_stats(train_encounters, M)
    rnn = init_rnn_params(frame_width(M, B, P), cfg.hidden, seed=id_hash(cfg.rng_seed, "rnn") % 2**32)
    if cfg.model == RAW:
        fill = (median - center) / scale
        return Model(RAW, rnn, M, B, P, center, scale, fill_values=fill)
    mgp = init_mgp_params(M, P, cfg.n_kernels, cfg.n_med_terms, seed=id_hash(cfg.rng_seed, "mgp") % 2**32)
    return Model(MGP, rnn, M, B, P, center, scale, mgp=mgp)


def validation_auroc(model: Model, encounters: Sequence[Encounter]) -> float:
    if not encounters:
        return float("nan")
    scores = final_step_scores(model, encounters, [e.anchor for e in encounters])
    try:
        return roc_auc(scores, [e.is_case for e in encounters])
    except UndefinedMetricError:
        return float("nan")


def _snapshot(model: Model) -> Model:
    return replace(
        model,
        rnn=model.rnn.detached(),
        mgp=model.mgp.detached() if model.mgp is not None else None,
    )


def train(
    matched: MatchedCohort,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> Checkpoint:
    """Minibatch Adam on the MC objective with early stopping on validation AUROC."""
    cfg.validate()
    if not matched.encounters:
        raise ConfigError("matched cohort is empty")
    splits = split_matched(matched, cfg)
    if not splits[TRAIN]:
        raise ConfigError("training split is empty")
    model = init_model(cfg, matched.dims, splits[TRAIN])
    window = cfg.window
    M, _, P = matched.dims
    fill = model.fill_values if model.kind == RAW else None
    items = [prepare_item(model.standardize(e), window, M, P, fill) for e in splits[TRAIN]]

    meta = {
        "config": asdict(cfg),
        "split_sizes": {k: len(v) for k, v in splits.items()},
        "epoch": 0,
        "best_epoch": 0,
        "history": [],
    }
    best, best_metric = _snapshot(model), -math.inf
    params = _param_dict(model.mgp, model.rnn)
    state = AdamState()
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng([cfg.rng_seed, epoch]).permutation(len(items))
        losses, stats = [], {}
        aborted = None
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [items[i] for i in order[start : start + cfg.batch_size]]
            mgp, rnn = _from_dict(params)
            try:
                loss, grads = compute_gradients(
                    batch, mgp, rnn, cfg.mc_samples, (cfg.rng_seed, epoch, b), cfg.l2_lambda, stats=stats
                )
                if not math.isfinite(loss):
                    raise NumericalError("training loss is not finite")
            except NumericalError as exc:
                aborted = f"epoch {epoch} batch {b}: {exc}"
                break
            params, state = adam_step(params, grads, state, cfg.learning_rate)
            losses.append(loss)
        if aborted:
            log.error("training diverged (%s); returning last good checkpoint", aborted)
            meta["aborted"] = aborted
            break
        model.mgp, model.rnn = _from_dict(params)
        val = validation_auroc(model, splits[VALID])
        rec = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "valid_auroc": val,
            "dropped": stats.get("dropped", 0),
        }
        meta["history"].append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        metric = val if math.isfinite(val) else -math.inf
        if metric > best_metric or best_metric == -math.inf:
            best, best_metric = _snapshot(model), metric
            meta["best_epoch"] = epoch
            stale = 0
        else:
            stale += 1
        meta["epoch"] = epoch
        if stale >= cfg.patience:
            break
    meta["best_valid_auroc"] = best_metric if math.isfinite(best_metric) else None
    return Checkpoint(best, meta)
