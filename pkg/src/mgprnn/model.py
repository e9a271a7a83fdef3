"""Trained model bundle and the scoring paths shared by training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .data import Encounter, id_hash, truncate_encounter
from .errors import DimensionError
from .kernel import GridSpec, MgpParams
from .posterior import draw_exact, posterior_or_prior
from .rnn import RnnParams, assemble_frames, carry_forward_featurize, lstm_logits, pad_sequences

MGP = "mgp"
RAW = "raw"


@dataclass
class Model:
    """MGP-RNN (kind "mgp") or carry-forward RNN baseline (kind "raw").

    Observation values are standardized per series with ``center``/``scale``
    before either featurization.
    """

    kind: str
    rnn: RnnParams
    M: int
    B: int
    P: int
    center: np.ndarray
    scale: np.ndarray
    mgp: Optional[MgpParams] = None
    fill_values: Optional[np.ndarray] = None

    @property
    def dims(self):
        return (self.M, self.B, self.P)

    def check_dims(self, dims) -> None:
        if tuple(dims) != self.dims:
            raise DimensionError(f"model dims (M, B, P) = {self.dims} but data has {tuple(dims)}")

    def standardize(self, e: Encounter) -> Encounter:
        vals = (e.obs_values - self.center[e.obs_series]) / self.scale[e.obs_series]
        return replace(e, obs_values=vals)

    def frames(self, e_std: Encounter, grid: GridSpec) -> torch.Tensor:
        """Deterministic frames: posterior mean for kind "mgp", carry-forward for "raw"."""
        if self.kind == RAW:
            return carry_forward_featurize(e_std, grid, self.fill_values, self.M, self.P)
        post = posterior_or_prior(e_std, grid, self.mgp, with_cov=False)
        return assemble_frames(e_std, grid, post.mean, self.M, self.P)

    def sampled_frames(self, e_std: Encounter, grid: GridSpec, xi) -> torch.Tensor:
        post = posterior_or_prior(e_std, grid, self.mgp, with_cov=True)
        return assemble_frames(e_std, grid, draw_exact(post, xi), self.M, self.P)


def _run(model: Model, seqs, chunk: int = 512) -> list:
    out = []
    for i in range(0, len(seqs), chunk):
        x, lengths = pad_sequences(seqs[i : i + chunk])
        p = torch.sigmoid(lstm_logits(model.rnn, x))
        out.extend(p[k, : lengths[k]] for k in range(len(lengths)))
    return out


@torch.no_grad()
def final_step_scores(
    model: Model, encounters: Sequence[Encounter], cutoffs: Sequence[float], mc_samples: int = 0, seed: int = 0
) -> np.ndarray:
    """Risk at the last grid point using data with time <= cutoff.

    ``mc_samples > 0`` averages the probability over posterior draws instead of
    evaluating at the posterior mean (mgp models only).
    """
    seqs = []
    for e, cut in zip(encounters, cutoffs):
        cut = max(float(cut), 0.0)
        et = truncate_encounter(model.standardize(e), cut)
        grid = GridSpec.for_horizon(cut)
        if mc_samples and model.kind == MGP:
            rng = np.random.default_rng([seed, id_hash(e.id) % (2**32)])
            xi = rng.standard_normal((mc_samples, grid.n_points * model.M))
            seqs.extend(model.sampled_frames(et, grid, xi))
        else:
            seqs.append(model.frames(et, grid))
    probs = _run(model, seqs)
    final = np.array([float(p[-1]) for p in probs])
    if mc_samples and model.kind == MGP:
        final = final.reshape(-1, mc_samples).mean(1)
    return final


def hour_score(model: Model, e_std: Encounter, hour: int) -> float:
    """Risk at ``hour`` from standardized data with time <= hour.

    Each prefix is run through the network on its own so that the batch trace
    and the streaming scorer agree bit for bit.
    """
    frames = model.frames(truncate_encounter(e_std, hour), GridSpec(hour + 1))
    return float(_run(model, [frames])[0][-1])


@torch.no_grad()
def realtime_scores(model: Model, e: Encounter) -> np.ndarray:
    """Hourly risk for h = 0..floor(LOS), each from data with time <= h."""
    e_std = model.standardize(e)
    return np.array([hour_score(model, e_std, h) for h in range(int(np.floor(e.los)) + 1)])
