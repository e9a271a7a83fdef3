"""Two-layer LSTM classifier over hourly input frames.

A frame at grid hour j is [z_j (M), baseline (B), med counts (P), missingness (M)],
where counts and indicators cover the bin (j-1, j] and frame 0 covers t == 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch.func import functional_call

from .errors import DimensionError, NumericalError
from .kernel import DTYPE, GridSpec


def frame_width(M: int, B: int, P: int) -> int:
    return M + B + P + M


def _bins(times: np.ndarray, X: int):
    """Grid bin of each event time: 0 for t == 0, j for t in (j-1, j]."""
    j = np.ceil(np.asarray(times, float)).astype(np.int64)
    keep = j < X
    return j, keep


def static_features(e, grid: GridSpec, M: int, P: int) -> np.ndarray:
    """Baseline, medication counts and missingness indicators, shape (X, B + P + M)."""
    X = grid.n_points
    B = len(e.baseline)
    out = np.zeros((X, B + P + M))
    out[:, :B] = e.baseline
    j, keep = _bins(e.med_times, X)
    np.add.at(out, (j[keep], B + e.med_drugs[keep]), 1.0)
    j, keep = _bins(e.obs_times, X)
    out[j[keep], B + P + e.obs_series[keep]] = 1.0
    return out


def assemble_frames(e, grid: GridSpec, z, M: int, P: int, static: Optional[np.ndarray] = None) -> torch.Tensor:
    """Input frames for one latent draw (shape (X, D)) or a batch of draws ((S, X, D)).

    ``z`` uses the series-major layout of GridSpec.flat_index.
    """
    X = grid.n_points
    z = torch.as_tensor(z, dtype=DTYPE)
    if z.shape[-1] != X * M:
        raise DimensionError(f"latent vector has length {z.shape[-1]}, expected X*M = {X * M}")
    if static is None:
        static = static_features(e, grid, M, P)
    zs = z.reshape(*z.shape[:-1], M, X).transpose(-1, -2)
    st = torch.as_tensor(static, dtype=DTYPE).expand(*zs.shape[:-1], static.shape[-1])
    return torch.cat([zs, st], dim=-1)


def carry_forward_values(e, grid: GridSpec, fill_values, M: int) -> np.ndarray:
    """Hourly bin means, carried forward when a bin is empty, else the fill value."""
    X = grid.n_points
    sums = np.zeros((X, M))
    counts = np.zeros((X, M))
    j, keep = _bins(e.obs_times, X)
    np.add.at(sums, (j[keep], e.obs_series[keep]), e.obs_values[keep])
    np.add.at(counts, (j[keep], e.obs_series[keep]), 1.0)
    out = np.empty((X, M))
    last = np.asarray(fill_values, float).copy()
    for i in range(X):
        seen = counts[i] > 0
        last[seen] = sums[i, seen] / counts[i, seen]
        out[i] = last
    return out


def carry_forward_featurize(e, grid: GridSpec, fill_values, M: int, P: int) -> torch.Tensor:
    """Frames for the carry-forward baseline, same layout as assemble_frames."""
    if len(fill_values) != M:
        raise DimensionError(f"fill_values must have length M={M}")
    vals = carry_forward_values(e, grid, fill_values, M)
    static = static_features(e, grid, M, P)
    return torch.as_tensor(np.concatenate([vals, static], axis=1), dtype=DTYPE)


# ---------------------------------------------------------------------------
# LSTM

GATES = 4  # input, forget, cell, output


@dataclass
class RnnParams:
    w_x1: torch.Tensor  # (D, 4H)
    w_h1: torch.Tensor  # (H, 4H)
    b1: torch.Tensor  # (4H,)
    w_x2: torch.Tensor  # (H, 4H)
    w_h2: torch.Tensor  # (H, 4H)
    b2: torch.Tensor  # (4H,)
    w_out: torch.Tensor  # (H,)
    b_out: torch.Tensor  # (1,)

    WEIGHTS = ("w_x1", "w_h1", "w_x2", "w_h2", "w_out")

    @property
    def hidden(self) -> int:
        return self.w_h1.shape[0]

    @property
    def input_width(self) -> int:
        return self.w_x1.shape[0]

    def tensors(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def numpy(self) -> dict:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.tensors().items()}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "RnnParams":
        return cls(**{f.name: torch.as_tensor(np.asarray(arrays[f.name]), dtype=DTYPE).clone() for f in fields(cls)})

    def detached(self, requires_grad: bool = False) -> "RnnParams":
        return RnnParams(**{k: v.detach().clone().requires_grad_(requires_grad) for k, v in self.tensors().items()})

    def l2(self) -> torch.Tensor:
        return sum((getattr(self, n) ** 2).sum() for n in self.WEIGHTS)


def init_rnn_params(input_width: int, hidden: int = 64, seed: int = 0) -> RnnParams:
    rng = np.random.default_rng(seed)
    H = hidden

    def unif(fan_in, shape):
        a = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-a, a, size=shape)

    def bias():
        b = np.zeros(GATES * H)
        b[H : 2 * H] = 1.0
        return b

    return RnnParams.from_arrays(
        {
            "w_x1": unif(input_width + H, (input_width, GATES * H)),
            "w_h1": unif(input_width + H, (H, GATES * H)),
            "b1": bias(),
            "w_x2": unif(2 * H, (H, GATES * H)),
            "w_h2": unif(2 * H, (H, GATES * H)),
            "b2": bias(),
            "w_out": unif(H, (H,)),
            "b_out": np.zeros(1),
        }
    )


def _layer(x: torch.Tensor, w_x, w_h, b) -> torch.Tensor:
    N, T, _ = x.shape
    H = w_h.shape[0]
    pre_x = x @ w_x + b  # all input projections at once
    h = x.new_zeros(N, H)
    c = x.new_zeros(N, H)
    outs = []
    for t in range(T):
        g = pre_x[:, t] + h @ w_h
        i = torch.sigmoid(g[:, :H])
        f = torch.sigmoid(g[:, H : 2 * H])
        cand = torch.tanh(g[:, 2 * H : 3 * H])
        o = torch.sigmoid(g[:, 3 * H :])
        c = f * c + i * cand
        h = o * torch.tanh(c)
        outs.append(h)
    return torch.stack(outs, 1)


def lstm_logits_reference(params: RnnParams, x: torch.Tensor) -> torch.Tensor:
    """Explicit step-by-step recurrence; slow, kept as an independent check."""
    x = torch.as_tensor(x, dtype=DTYPE)
    h1 = _layer(x, params.w_x1, params.w_h1, params.b1)
    h2 = _layer(h1, params.w_x2, params.w_h2, params.b2)
    return h2 @ params.w_out + params.b_out


_FUSED = {}


def _fused_module(D: int, H: int) -> torch.nn.LSTM:
    if (D, H) not in _FUSED:
        _FUSED[(D, H)] = torch.nn.LSTM(D, H, num_layers=2, batch_first=True).to(DTYPE)
    return _FUSED[(D, H)]


def lstm_logits(params: RnnParams, x: torch.Tensor) -> torch.Tensor:
    """Per-step logits for a batch of sequences x of shape (N, T, D).

    Runs torch's fused LSTM kernel with our weights substituted in; gate
    order (input, forget, cell, output) and single bias per gate match
    lstm_logits_reference.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.shape[-1] != params.input_width:
        raise DimensionError(f"frame width {x.shape[-1]} does not match network input {params.input_width}")
    H = params.hidden
    zero = torch.zeros(GATES * H, dtype=DTYPE)
    weights = {
        "weight_ih_l0": params.w_x1.T,
        "weight_hh_l0": params.w_h1.T,
        "bias_ih_l0": params.b1,
        "bias_hh_l0": zero,
        "weight_ih_l1": params.w_x2.T,
        "weight_hh_l1": params.w_h2.T,
        "bias_ih_l1": params.b2,
        "bias_hh_l1": zero,
    }
    h2, _ = functional_call(_fused_module(x.shape[-1], H), weights, (x,))
    logits = h2 @ params.w_out + params.b_out
    if not torch.all(torch.isfinite(logits)):
        bad = (~torch.isfinite(logits)).any(0).nonzero()
        raise NumericalError(f"non-finite LSTM output first at step {int(bad[0])}")
    return logits


def lstm_forward(params: RnnParams, frames) -> torch.Tensor:
    """Per-step probabilities for one sequence (X, D) or a batch (N, X, D)."""
    frames = torch.as_tensor(frames, dtype=DTYPE)
    single = frames.dim() == 2
    logits = lstm_logits(params, frames[None] if single else frames)
    p = torch.sigmoid(logits)
    return p[0] if single else p


def pad_sequences(seqs) -> tuple:
    """Stack variable-length (T_i, D) tensors into (N, T_max, D) plus lengths."""
    lengths = [s.shape[0] for s in seqs]
    T = max(lengths)
    D = seqs[0].shape[-1]
    out = seqs[0].new_zeros(len(seqs), T, D)
    for i, s in enumerate(seqs):
        out[i, : s.shape[0]] = s
    return out, lengths


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class ReplicationWindow:
    pre_hours: float = 2.0
    post_hours: float = 6.0

    def __post_init__(self):
        if self.pre_hours < 0 or self.post_hours < 0:
            raise ValueError("replication window bounds must be >= 0")


def target_indices(anchor: Optional[float], X: int, window: ReplicationWindow, eid: str = "?") -> np.ndarray:
    """Grid points within [anchor - pre, anchor + post] that lie on the grid."""
    if anchor is None:
        raise ValueError(f"encounter {eid!r} has no anchor (event or prediction time)")
    lo = max(0, math.ceil(anchor - window.pre_hours - 1e-9))
    hi = min(X - 1, math.floor(anchor + window.post_hours + 1e-9))
    if hi < lo:
        raise ValueError(f"encounter {eid!r}: no point of the {X}-point grid within the replication window around {anchor}")
    return np.arange(lo, hi + 1)


def replicated_loss(probs, e, window: ReplicationWindow, l2_lambda: float, params: Optional[RnnParams]) -> torch.Tensor:
    """Mean cross-entropy over the replicated targets plus an L2 penalty on weights."""
    probs = torch.as_tensor(probs, dtype=DTYPE)
    idx = target_indices(e.anchor, probs.shape[0], window, e.id)
    target = torch.full((len(idx),), 1.0 if e.is_case else 0.0, dtype=DTYPE)
    bce = F.binary_cross_entropy(probs[idx], target)
    reg = l2_lambda * params.l2() if (params is not None and l2_lambda) else 0.0
    return bce + reg


def replicated_bce_logits(logits: torch.Tensor, idx: np.ndarray, is_case: bool) -> torch.Tensor:
    """Numerically stable twin of the cross-entropy part of replicated_loss."""
    sel = logits[..., torch.as_tensor(idx)]
    target = torch.full_like(sel, 1.0 if is_case else 0.0)
    return F.binary_cross_entropy_with_logits(sel, target, reduction="none").mean(-1)
