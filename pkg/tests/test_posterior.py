import math

import numpy as np
import pytest
import torch

from conftest import assert_gradients_close, central_differences, dense_conditioning, make_encounter, random_params
from mgprnn.errors import NumericalError
from mgprnn.kernel import GridSpec, MgpParams, grid_prior
from mgprnn.posterior import (
    PosteriorGaussian,
    compute_posterior,
    draw_exact,
    draw_lanczos,
    lanczos_sqrt_mv,
    posterior_or_prior,
    robust_cholesky,
)


def dense_sqrt(A):
    w, V = np.linalg.eigh(A)
    return V @ np.diag(np.sqrt(np.clip(w, 0, None))) @ V.T


def random_instance(rng, M, X, n_obs, Q, P=2):
    p = random_params(rng, M, P=P, Q=Q)
    obs = [(int(rng.integers(M)), float(rng.uniform(0, X - 1)), float(rng.normal())) for _ in range(n_obs)]
    meds = [(int(rng.integers(P)), float(rng.uniform(0, X - 1))) for _ in range(int(rng.integers(0, 3)))]
    return p, obs, meds


class TestComputePosterior:
    def test_single_series_two_obs_matches_dense(self, rng):
        p, _, _ = random_instance(rng, 1, 3, 0, 2, P=1)
        obs = [(0, 0.4, 1.2), (0, 1.9, -0.7)]
        mean, cov, _ = dense_conditioning(p.numpy(), obs, [], 1, 3)
        post = compute_posterior(make_encounter(obs=obs), GridSpec(3), p)
        assert np.abs(post.mean.numpy() - mean).max() < 1e-10
        assert np.abs(post.cov.numpy() - cov).max() < 1e-10

    def test_random_instances_match_dense(self, rng):
        for _ in range(20):
            M, X, Q = int(rng.integers(1, 4)), int(rng.integers(1, 7)), int(rng.integers(1, 4))
            p, obs, meds = random_instance(rng, M, X, int(rng.integers(1, 11)), Q)
            mean, cov, _ = dense_conditioning(p.numpy(), obs, meds, M, X)
            post = compute_posterior(make_encounter(obs=obs, meds=meds), GridSpec(X), p)
            assert np.abs(post.mean.numpy() - mean).max() < 1e-10
            assert np.abs(post.cov.numpy() - cov).max() < 1e-10

    def test_interpolation_limit(self, rng):
        arr = random_params(rng, 2, Q=2).numpy()
        arr["log_noise"][:] = 0.5 * math.log(1e-8)
        p = MgpParams.from_arrays(arr)
        e = make_encounter(obs=[(1, 2.0, 0.83), (0, 0.5, -1.0), (1, 3.6, 0.1)])
        grid = GridSpec(4)
        post = compute_posterior(e, grid, p)
        assert abs(post.mean[grid.flat_index(1, 2)].item() - 0.83) < 1e-4

    def test_variance_not_above_prior(self, rng):
        p, obs, meds = random_instance(rng, 3, 5, 8, 3)
        e = make_encounter(obs=obs, meds=meds)
        post = compute_posterior(e, GridSpec(5), p)
        _, prior = grid_prior(e, GridSpec(5), p)
        assert torch.all(post.cov.diagonal() <= prior.diagonal() + 1e-10)

    def test_extra_observation_reduces_variance(self, rng):
        for _ in range(10):
            p, obs, meds = random_instance(rng, 2, 6, 5, 2)
            grid = GridSpec(6)
            before = compute_posterior(make_encounter(obs=obs, meds=meds), grid, p).cov.diagonal()
            extra = obs + [(int(rng.integers(2)), float(rng.uniform(0, 5)), float(rng.normal()))]
            after = compute_posterior(make_encounter(obs=extra, meds=meds), grid, p).cov.diagonal()
            assert torch.all(after <= before + 1e-10)

    def test_without_observations_falls_back_to_prior(self, rng):
        p = random_params(rng, 2)
        e = make_encounter(meds=[(0, 0.5)])
        post = posterior_or_prior(e, GridSpec(3), p)
        mu, cov = grid_prior(e, GridSpec(3), p)
        assert torch.equal(post.mean, mu) and torch.equal(post.cov, cov)

    def test_factorization_failure_reports_condition(self):
        A = torch.tensor([[1.0, 2.0], [2.0, 1.0]], dtype=torch.float64)
        with pytest.raises(NumericalError, match="condition estimate"):
            robust_cholesky(A, 1e-8)

    def test_jitter_escalation_rescues_singular(self):
        A = torch.ones(3, 3, dtype=torch.float64)
        L = robust_cholesky(A, 1e-8)
        assert torch.allclose(L @ L.T, A, atol=1e-6)


class TestDrawExact:
    def post(self, rng):
        p, obs, meds = random_instance(rng, 2, 4, 5, 2)
        return compute_posterior(make_encounter(obs=obs, meds=meds), GridSpec(4), p)

    def test_zero_noise_is_mean(self, rng):
        post = self.post(rng)
        assert torch.equal(draw_exact(post, torch.zeros(post.dim, dtype=torch.float64)), post.mean)

    def test_factor_reproduces_cov(self, rng):
        post = self.post(rng)
        R = post.ensure_factor()
        # the 1e-8 factorization jitter sits on the diagonal; allow only round-off beyond it
        assert (R @ R.T - post.cov).abs().max() <= 1e-8 + 1e-14

    def test_deterministic(self, rng):
        post = self.post(rng)
        xi = torch.as_tensor(rng.standard_normal(post.dim))
        assert torch.equal(draw_exact(post, xi), draw_exact(post, xi))

    def test_identity_cov_moments(self, rng):
        d = 4
        post = PosteriorGaussian(torch.zeros(d, dtype=torch.float64), torch.eye(d, dtype=torch.float64))
        z = draw_exact(post, torch.as_tensor(rng.standard_normal((10_000, d)))).numpy()
        assert np.abs(np.cov(z.T) - np.eye(d)).max() < 0.05

    def test_sample_mean_within_clt_band(self, rng):
        post = self.post(rng)
        z = draw_exact(post, torch.as_tensor(rng.standard_normal((10_000, post.dim))))
        se = post.cov.diagonal().clamp_min(1e-300).sqrt() / 100.0
        assert torch.all((z.mean(0) - post.mean).abs() <= 4 * se + 1e-12)


class TestLanczos:
    def test_identity(self, rng):
        v = rng.standard_normal(7)
        for k in (1, 3, 7):
            assert np.allclose(lanczos_sqrt_mv(lambda x: x, v, k), v, atol=1e-14)

    def test_two_distinct_eigenvalues(self):
        out = lanczos_sqrt_mv(lambda x: np.array([4.0, 9.0]) * x, np.array([1.0, 1.0]), 2)
        assert np.abs(out - [2.0, 3.0]).max() < 1e-12

    def test_zero_vector(self):
        assert np.array_equal(lanczos_sqrt_mv(lambda x: 2 * x, np.zeros(3), 3), np.zeros(3))

    def test_full_dimension_matches_dense(self, rng):
        n = 50
        B = rng.standard_normal((n, n))
        A = B @ B.T / n + 0.1 * np.eye(n)
        v = rng.standard_normal(n)
        ref = dense_sqrt(A) @ v
        out = lanczos_sqrt_mv(lambda x: A @ x, v, n)
        assert np.linalg.norm(out - ref) / np.linalg.norm(ref) < 1e-8

    def test_small_posterior_covariance(self, rng):
        p, obs, meds = random_instance(rng, 3, 4, 6, 2)
        post = compute_posterior(make_encounter(obs=obs, meds=meds), GridSpec(4), p)
        C = post.cov.numpy()
        xi = rng.standard_normal(12)
        out = lanczos_sqrt_mv(lambda x: C @ x, xi, 12)
        ref = dense_sqrt(C) @ xi
        assert np.linalg.norm(out - ref) <= 1e-8 * np.linalg.norm(ref)

    def test_adaptive_default_stops_early(self, rng):
        A = np.diag([1.0, 4.0, 9.0] * 30)
        calls = []

        def mv(x):
            calls.append(1)
            return A @ x

        v = rng.standard_normal(90)
        out = lanczos_sqrt_mv(mv, v)
        assert len(calls) <= 4
        assert np.abs(out - np.sqrt(np.diag(A)) * v).max() < 1e-10

    def test_near_best_in_krylov_subspace(self, rng):
        # no vector in span{v, Av, ..., A^(k-1) v} beats the orthogonal projection of the true action
        n, k = 100, 32
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        for cond in (1e3, 1e5):
            w = np.logspace(0, np.log10(cond), n)
            A = (Q * w) @ Q.T
            v = rng.standard_normal(n)
            ref = (Q * np.sqrt(w)) @ (Q.T @ v)
            K = np.zeros((n, k))
            K[:, 0] = v / np.linalg.norm(v)
            for j in range(1, k):
                x = A @ K[:, j - 1]
                for _ in range(2):
                    x -= K[:, :j] @ (K[:, :j].T @ x)
                K[:, j] = x / np.linalg.norm(x)
            best = np.linalg.norm(K @ (K.T @ ref) - ref)
            got = np.linalg.norm(lanczos_sqrt_mv(lambda x: A @ x, v, k) - ref)
            assert got <= 2.5 * best + 1e-12 * np.linalg.norm(ref)

    def test_nan_matvec(self):
        with pytest.raises(NumericalError):
            lanczos_sqrt_mv(lambda x: x * np.nan, np.ones(3), 3)

    def test_torch_in_torch_out(self):
        v = torch.ones(3, dtype=torch.float64)
        assert isinstance(lanczos_sqrt_mv(lambda x: 4 * x, v, 2), torch.Tensor)

    def test_draw_lanczos_zero_noise(self, rng):
        mean = rng.standard_normal(5)
        assert np.array_equal(draw_lanczos(mean, lambda x: 3 * x, np.zeros(5), 5), mean)

    def test_draw_lanczos_covariance(self, rng):
        B = rng.standard_normal((6, 6))
        C = B @ B.T / 6 + 0.05 * np.eye(6)
        xs = rng.standard_normal((10_000, 6))
        z = np.stack([draw_lanczos(np.zeros(6), lambda x: C @ x, xi, 6) for xi in xs])
        assert np.abs(np.cov(z.T) - C).max() <= 0.05 * np.abs(C).max()


def test_draw_is_differentiable_in_every_parameter(rng):
    p, obs, meds = random_instance(rng, 2, 3, 4, 2, P=1)
    p = p.detached(requires_grad=True)
    e = make_encounter(obs=obs, meds=meds)
    grid = GridSpec(3)
    xi = torch.as_tensor(rng.standard_normal(6))
    weights = torch.as_tensor(rng.standard_normal(6))

    def functional():
        post = compute_posterior(e, grid, p)
        z = draw_exact(post, xi)
        return (weights * torch.tanh(z)).sum()

    loss = functional()
    grads = dict(zip(p.tensors(), torch.autograd.grad(loss, list(p.tensors().values()))))
    numeric = central_differences(functional, p.tensors())
    assert_gradients_close(grads, numeric)
