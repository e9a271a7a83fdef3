"""Gaussian posterior over latent grid values and reparameterized draws."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .errors import NumericalError
from .kernel import DTYPE, JITTER, GridSpec, MgpParams, assemble_covariances, grid_prior

FACTOR_JITTER = 1e-8


@dataclass
class PosteriorGaussian:
    mean: torch.Tensor
    cov: Optional[torch.Tensor]
    factor: Optional[torch.Tensor] = None

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def ensure_factor(self) -> torch.Tensor:
        if self.factor is None:
            self.factor = robust_cholesky(self.cov, FACTOR_JITTER, what="posterior covariance")
        return self.factor


def robust_cholesky(A: torch.Tensor, jitter: float, what: str = "matrix", max_tries: int = 4) -> torch.Tensor:
    """Cholesky of A + jitter*I, escalating the jitter tenfold on failure."""
    eye = torch.eye(A.shape[0], dtype=A.dtype)
    j = jitter
    for _ in range(max_tries):
        L, info = torch.linalg.cholesky_ex(A + j * eye)
        if int(info) == 0:
            return L
        j *= 10.0
    with torch.no_grad():
        cond = torch.linalg.cond(A).item() if torch.all(torch.isfinite(A)) else float("nan")
    raise NumericalError(f"Cholesky of {what} failed (size {A.shape[0]}, condition estimate {cond:.3g})")


def compute_posterior(e, grid: GridSpec, params: MgpParams, with_cov: bool = True) -> PosteriorGaussian:
    """Condition the MGP on an encounter's observations at the hourly grid.

    mean = mu_grid + K_zy Sigma^-1 (y - mu_obs),  cov = K_zz - K_zy Sigma^-1 K_yz.
    """
    b = assemble_covariances(e, grid, params, with_grid_cov=with_cov)
    L = robust_cholesky(b.sigma_obs, JITTER, what="observation covariance", max_tries=1)
    resid = (b.y_obs - b.mu_obs)[:, None]
    alpha = torch.cholesky_solve(resid, L)[:, 0]
    mean = b.mu_grid + b.k_cross @ alpha
    cov = None
    if with_cov:
        V = torch.linalg.solve_triangular(L, b.k_cross.T, upper=False)
        cov = b.k_grid - V.T @ V
        cov = 0.5 * (cov + cov.T)
    return PosteriorGaussian(mean, cov)


def prior_gaussian(e, grid: GridSpec, params: MgpParams, with_cov: bool = True) -> PosteriorGaussian:
    mu, cov = grid_prior(e, grid, params, with_cov=with_cov)
    return PosteriorGaussian(mu, cov)


def posterior_or_prior(e, grid: GridSpec, params: MgpParams, with_cov: bool = True) -> PosteriorGaussian:
    """Posterior when the encounter has observations, the prior otherwise."""
    if e.n_obs == 0:
        return prior_gaussian(e, grid, params, with_cov)
    return compute_posterior(e, grid, params, with_cov)


def draw_exact(post: PosteriorGaussian, xi) -> torch.Tensor:
    """z = mean + R xi with R the Cholesky factor of the posterior covariance.

    ``xi`` may be a vector or a (S, dim) batch of standard-normal draws.
    """
    xi = torch.as_tensor(xi, dtype=DTYPE)
    R = post.ensure_factor()
    return post.mean + xi @ R.T


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE), True


def _tridiag_sqrt_e1(alphas, betas) -> torch.Tensor:
    k = len(alphas)
    T = torch.diag(torch.stack(alphas))
    if k > 1:
        off = torch.stack(betas[: k - 1])
        T = T + torch.diag(off, 1) + torch.diag(off, -1)
    evals, evecs = torch.linalg.eigh(T)
    evals = torch.clamp(evals, min=0.0)
    return evecs @ (torch.sqrt(evals) * evecs[0])


def lanczos_sqrt_mv(
    matvec: Callable,
    v,
    k: Optional[int] = None,
    tol: float = 1e-7,
):
    """Approximate A^{1/2} v with k Lanczos steps (full reorthogonalization).

    With ``k=None`` the iteration count is min(64, dim) and stops early once
    the last Ritz-weight coefficient falls below ``tol`` relative to the
    coefficient vector. An invariant Krylov space (zero residual) ends the
    iteration with the exact result for that space.
    """
    v, to_numpy = _as_tensor(v)
    n = v.shape[0]
    adaptive = k is None
    if adaptive:
        k = min(64, n)
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, n)

    def mv(x):
        y, _ = _as_tensor(matvec(x.detach().numpy() if to_numpy else x))
        if not torch.all(torch.isfinite(y)):
            raise NumericalError("non-finite value in Lanczos matvec")
        return y

    beta0 = torch.linalg.norm(v)
    if beta0 == 0:
        out = torch.zeros_like(v)
        return out.numpy() if to_numpy else out

    basis = [v / beta0]
    alphas, betas = [], []
    scale = None
    for j in range(k):
        q = basis[-1]
        w = mv(q)
        a = torch.dot(q, w)
        alphas.append(a)
        w = w - a * q
        if j > 0:
            w = w - betas[-1] * basis[-2]
        Qm = torch.stack(basis, 1)
        for _ in range(2):
            w = w - Qm @ (Qm.T @ w)
        b = torch.linalg.norm(w)
        betas.append(b)
        scale = max(scale or 0.0, abs(float(a)), float(b))
        if adaptive and j > 0:
            y = _tridiag_sqrt_e1(alphas, betas)
            if abs(float(y[-1])) < tol * float(torch.linalg.norm(y)):
                break
        if j == k - 1 or float(b) <= 1e-12 * max(scale, 1e-300):
            break
        basis.append(w / b)

    y = _tridiag_sqrt_e1(alphas, betas)
    Qm = torch.stack(basis[: len(alphas)], 1)
    out = beta0 * (Qm @ y)
    return out.detach().numpy() if to_numpy else out


def draw_lanczos(mean, cov_action: Callable, xi, k: Optional[int] = None):
    """z = mean + (Lanczos approximation of Sigma^{1/2}) xi."""
    if isinstance(mean, torch.Tensor):
        return mean + lanczos_sqrt_mv(cov_action, torch.as_tensor(xi, dtype=DTYPE), k)
    return np.asarray(mean, float) + lanczos_sqrt_mv(cov_action, np.asarray(xi, float), k)
