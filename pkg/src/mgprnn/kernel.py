"""MGP prior: OU temporal kernels, coregionalization, noise and medication-effect means.

All differentiable quantities are float64 torch tensors so gradients flow
from the classifier loss back into the kernel hyperparameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import torch

from .errors import DimensionError

DTYPE = torch.float64
JITTER = 1e-6


@dataclass
class MgpParams:
    """Unconstrained MGP hyperparameters.

    Length-scales, noise standard deviations and decay rates are stored on a
    log scale; each coregionalization matrix is L_q L_q^T with L_q the lower
    triangle of ``coreg_factor[q]``.
    """

    log_lengthscale: torch.Tensor  # (Q,)
    coreg_factor: torch.Tensor  # (Q, M, M)
    log_noise: torch.Tensor  # (M,)  sigma_m = exp(log_noise_m)
    med_alpha: torch.Tensor  # (L, P, M)
    med_log_beta: torch.Tensor  # (L, P, M)

    @property
    def Q(self) -> int:
        return self.log_lengthscale.shape[0]

    @property
    def M(self) -> int:
        return self.log_noise.shape[0]

    @property
    def L(self) -> int:
        return self.med_alpha.shape[0]

    @property
    def P(self) -> int:
        return self.med_alpha.shape[1]

    def lengthscales(self) -> torch.Tensor:
        return torch.exp(self.log_lengthscale)

    def noise_var(self) -> torch.Tensor:
        return torch.exp(2.0 * self.log_noise)

    def med_beta(self) -> torch.Tensor:
        return torch.exp(self.med_log_beta)

    def coreg(self) -> torch.Tensor:
        """Coregionalization matrices K_q^M, shape (Q, M, M)."""
        F = torch.tril(self.coreg_factor)
        return F @ F.transpose(-1, -2)

    def tensors(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def numpy(self) -> dict:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.tensors().items()}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "MgpParams":
        return cls(**{f.name: torch.tensor(np.asarray(arrays[f.name]), dtype=DTYPE).clone() for f in fields(cls)})

    def detached(self, requires_grad: bool = False) -> "MgpParams":
        return MgpParams(
            **{k: v.detach().clone().requires_grad_(requires_grad) for k, v in self.tensors().items()}
        )


def init_mgp_params(M: int, P: int, Q: int = 3, L: int = 3, seed: int = 0, noise_sd=None) -> MgpParams:
    """Starting point for training: length-scales spread over 1..24 h, near-identity
    coregionalization, small noise, and null medication effects."""
    rng = np.random.default_rng(seed)
    if Q == 3:
        ls = np.array([1.0, 6.0, 24.0])
    else:
        ls = np.geomspace(1.0, 24.0, Q) if Q > 1 else np.array([6.0])
    factor = np.sqrt(1.0 / Q) * np.eye(M)[None] + 0.01 * np.tril(rng.standard_normal((Q, M, M)))
    noise = np.full(M, 0.1) if noise_sd is None else 0.1 * np.asarray(noise_sd, float)
    return MgpParams.from_arrays(
        {
            "log_lengthscale": np.log(ls),
            "coreg_factor": factor,
            "log_noise": np.log(noise),
            "med_alpha": np.zeros((L, P, M)),
            "med_log_beta": np.zeros((L, P, M)),
        }
    )


def default_truth(M: int, P: int, seed: int = 0, noise_sd: float = 0.3, lengthscales=(3.0, 10.0, 30.0)) -> MgpParams:
    """Ground-truth parameters for synthetic cohorts (Q=3, L=3, unit marginal scale)."""
    rng = np.random.default_rng(10_000 + seed)
    weights = (0.2, 0.3, 0.5)
    factors = []
    for w in weights:
        A = rng.standard_normal((M, M)) / math.sqrt(M)
        K = w * (0.5 * A @ A.T + 0.5 * np.eye(M))
        factors.append(np.linalg.cholesky(K))
    return MgpParams.from_arrays(
        {
            "log_lengthscale": np.log(np.asarray(lengthscales, float)),
            "coreg_factor": np.stack(factors),
            "log_noise": np.full(M, math.log(noise_sd)),
            "med_alpha": rng.normal(0.0, 0.5, size=(3, P, M)),
            "med_log_beta": np.log(np.broadcast_to(np.array([0.05, 0.2, 1.0])[:, None, None], (3, P, M))),
        }
    )


@dataclass(frozen=True)
class GridSpec:
    """Hourly reference grid 0, 1, ..., n_points - 1 (hours since admission)."""

    n_points: int

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError("grid needs at least one point")

    @classmethod
    def for_horizon(cls, horizon: float) -> "GridSpec":
        return cls(int(math.floor(horizon)) + 1)

    def times(self) -> np.ndarray:
        return np.arange(self.n_points, dtype=float)

    def flat_index(self, m, j):
        """Position of (series m, grid point j) in the vectorized latent z."""
        return np.asarray(m) * self.n_points + np.asarray(j)

    def flat_coords(self, M: int):
        """(series, time) for every entry of z, series-major."""
        X = self.n_points
        return np.repeat(np.arange(M), X), np.tile(self.times(), M)


def ou_correlation(t: float, t_prime: float, lengthscale: float) -> float:
    if not lengthscale > 0:
        raise ValueError(f"lengthscale must be > 0, got {lengthscale}")
    if not (math.isfinite(t) and math.isfinite(t_prime)):
        raise ValueError("times must be finite")
    return math.exp(-abs(t - t_prime) / lengthscale)


def medication_effect_t(series, times, med_drugs, med_times, params: MgpParams) -> torch.Tensor:
    """Prior mean mu_m(t) for each (series, time) pair; events count only if t_p < t."""
    n = len(series)
    if len(med_times) == 0 or n == 0:
        return torch.zeros(n, dtype=DTYPE)
    series = torch.tensor(np.asarray(series), dtype=torch.long)
    times = torch.tensor(np.asarray(times, float), dtype=DTYPE)
    drugs = torch.tensor(np.asarray(med_drugs), dtype=torch.long)
    tp = torch.tensor(np.asarray(med_times, float), dtype=DTYPE)
    dt = times[:, None] - tp[None, :]  # (n, E)
    active = dt > 0
    dt = torch.where(active, dt, torch.zeros_like(dt))
    alpha = params.med_alpha[:, drugs[None, :], series[:, None]]  # (L, n, E)
    beta = params.med_beta()[:, drugs[None, :], series[:, None]]
    curves = (alpha * torch.exp(-beta * dt[None])).sum(0)
    return (curves * active).sum(1)


def medication_mean(m: int, t: float, med_events: Sequence, params: MgpParams) -> float:
    """Scalar mu_m(t) for a list of (drug, time) medication events."""
    if t < 0:
        raise ValueError("t must be >= 0")
    drugs = [int(p) for p, _ in med_events]
    tps = [float(tp) for _, tp in med_events]
    with torch.no_grad():
        return float(medication_effect_t([m], [t], drugs, tps, params)[0])


def medication_mean_np(series, times, med_drugs, med_times, arrays: dict) -> np.ndarray:
    """NumPy twin of medication_effect_t used by the simulator."""
    series = np.atleast_1d(series)
    times = np.atleast_1d(np.asarray(times, float))
    if len(med_times) == 0:
        return np.zeros(len(series))
    dt = times[:, None] - np.asarray(med_times)[None, :]
    active = dt > 0
    dt = np.where(active, dt, 0.0)
    alpha = arrays["med_alpha"][:, med_drugs[None, :], series[:, None]]
    beta = np.exp(arrays["med_log_beta"])[:, med_drugs[None, :], series[:, None]]
    return ((alpha * np.exp(-beta * dt[None])).sum(0) * active).sum(1)


def mixture_cov(series_a, times_a, series_b, times_b, params: MgpParams) -> torch.Tensor:
    """sum_q K_q^M[m_a, m_b] * exp(-|t_a - t_b| / l_q) evaluated pairwise."""
    sa = torch.tensor(np.asarray(series_a), dtype=torch.long)
    sb = torch.tensor(np.asarray(series_b), dtype=torch.long)
    ta = torch.tensor(np.asarray(times_a, float), dtype=DTYPE)
    tb = torch.tensor(np.asarray(times_b, float), dtype=DTYPE)
    Kq = params.coreg()[:, sa[:, None], sb[None, :]]  # (Q, na, nb)
    dist = (ta[:, None] - tb[None, :]).abs()
    corr = torch.exp(-dist[None] / params.lengthscales()[:, None, None])
    return (Kq * corr).sum(0)


@dataclass
class CovarianceBundle:
    sigma_obs: torch.Tensor  # (n_obs, n_obs), includes noise, no jitter
    k_cross: torch.Tensor  # (X*M, n_obs)
    k_grid: torch.Tensor  # (X*M, X*M)
    mu_obs: torch.Tensor  # (n_obs,)
    mu_grid: torch.Tensor  # (X*M,)
    y_obs: torch.Tensor  # (n_obs,)


def grid_prior(e, grid: GridSpec, params: MgpParams, with_cov: bool = True):
    gs, gt = grid.flat_coords(params.M)
    mu = medication_effect_t(gs, gt, e.med_drugs, e.med_times, params)
    cov = mixture_cov(gs, gt, gs, gt, params) if with_cov else None
    return mu, cov


def assemble_covariances(e, grid: GridSpec, params: MgpParams, with_grid_cov: bool = True) -> CovarianceBundle:
    """Covariance blocks touching only observed (series, time) pairs and the grid."""
    if e.n_obs == 0:
        raise DimensionError(f"encounter {e.id!r} has no observations; use the prior directly")
    if (len(e.obs_series) and e.obs_series.max() >= params.M) or (
        len(e.med_drugs) and e.med_drugs.max() >= params.P
    ):
        raise DimensionError("encounter indices exceed parameter dims")
    os_, ot = e.obs_series, e.obs_times
    gs, gt = grid.flat_coords(params.M)
    sigma = mixture_cov(os_, ot, os_, ot, params) + torch.diag(params.noise_var()[torch.tensor(os_)])
    k_cross = mixture_cov(gs, gt, os_, ot, params)
    k_grid = mixture_cov(gs, gt, gs, gt, params) if with_grid_cov else None
    mu_obs = medication_effect_t(os_, ot, e.med_drugs, e.med_times, params)
    mu_grid = medication_effect_t(gs, gt, e.med_drugs, e.med_times, params)
    return CovarianceBundle(sigma, k_cross, k_grid, mu_obs, mu_grid, torch.tensor(e.obs_values, dtype=DTYPE))
