import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import kernel_entry, make_encounter, med_entry, random_params
from mgprnn.errors import DimensionError
from mgprnn.kernel import (
    GridSpec,
    MgpParams,
    assemble_covariances,
    default_truth,
    init_mgp_params,
    medication_mean,
    medication_mean_np,
    mixture_cov,
    ou_correlation,
)


def single_term(alpha, beta, M=1, P=1):
    return MgpParams.from_arrays(
        {
            "log_lengthscale": [0.0],
            "coreg_factor": np.eye(M)[None],
            "log_noise": np.zeros(M),
            "med_alpha": np.full((1, P, M), alpha),
            "med_log_beta": np.full((1, P, M), math.log(beta)),
        }
    )


class TestOU:
    def test_values(self):
        assert ou_correlation(0, 1, 1) == pytest.approx(0.367879, abs=1e-6)
        assert ou_correlation(0, 2, 1) == pytest.approx(0.135335, abs=1e-6)
        assert ou_correlation(5.5, 5.5, 3.0) == 1.0

    def test_symmetric(self):
        assert ou_correlation(1.0, 4.0, 2.0) == ou_correlation(4.0, 1.0, 2.0)

    @pytest.mark.parametrize("l", [0.0, -1.0, float("nan")])
    def test_bad_lengthscale(self, l):
        with pytest.raises(ValueError):
            ou_correlation(0, 1, l)


class TestMedicationMean:
    def test_single_event(self):
        p = single_term(2.0, 1.0)
        assert medication_mean(0, 1.0, [(0, 0.0)], p) == pytest.approx(2 * math.exp(-1), abs=1e-12)
        assert medication_mean(0, 1.0, [(0, 0.0)], p) == pytest.approx(0.735759, abs=1e-6)

    def test_no_events_is_zero(self, rng):
        p = random_params(rng, 3, P=2)
        for m in range(3):
            for t in (0.0, 1.5, 100.0):
                assert medication_mean(m, t, [], p) == 0.0

    def test_event_counts_only_strictly_before(self):
        p = single_term(2.0, 1.0)
        assert medication_mean(0, 3.0, [(0, 3.0)], p) == 0.0
        assert medication_mean(0, 3.0, [(0, 4.0)], p) == 0.0

    def test_additive_over_events(self, rng):
        p = random_params(rng, 2, P=3, L=3)
        e1 = [(0, 0.5), (2, 1.0)]
        e2 = [(1, 0.25), (0, 2.0), (2, 3.5)]
        for m in range(2):
            for t in (1.0, 2.5, 7.0):
                both = medication_mean(m, t, e1 + e2, p)
                assert abs(both - medication_mean(m, t, e1, p) - medication_mean(m, t, e2, p)) < 1e-12

    def test_matches_oracle_and_numpy_twin(self, rng):
        p = random_params(rng, 3, P=2, L=3)
        arr = p.numpy()
        meds = [(0, 0.2), (1, 1.7), (1, 3.0)]
        drugs = np.array([d for d, _ in meds])
        times = np.array([t for _, t in meds])
        for m in range(3):
            for t in (0.0, 1.0, 2.0, 5.0):
                ref = med_entry(arr, m, t, meds)
                assert abs(medication_mean(m, t, meds, p) - ref) < 1e-12
                assert abs(medication_mean_np(m, t, drugs, times, arr)[0] - ref) < 1e-12


class TestCovariance:
    def test_bundle_matches_brute_force(self, rng):
        M, P = 3, 2
        p = random_params(rng, M, P=P, Q=3, L=2)
        arr = p.numpy()
        obs = [(0, 0.0, 1.0), (2, 0.7, -0.3), (1, 2.5, 0.4), (0, 3.0, 2.2)]
        meds = [(1, 0.5), (0, 2.0)]
        e = make_encounter(obs=obs, meds=meds)
        grid = GridSpec(4)
        b = assemble_covariances(e, grid, p)
        gs, gt = grid.flat_coords(M)
        noise = np.exp(2 * arr["log_noise"])
        sigma = np.array([[kernel_entry(arr, a[0], a[1], c[0], c[1]) for c in obs] for a in obs]) + np.diag([noise[o[0]] for o in obs])
        cross = np.array([[kernel_entry(arr, m, t, c[0], c[1]) for c in obs] for m, t in zip(gs, gt)])
        kgrid = np.array([[kernel_entry(arr, m, t, m2, t2) for m2, t2 in zip(gs, gt)] for m, t in zip(gs, gt)])
        assert np.abs(b.sigma_obs.numpy() - sigma).max() < 1e-12
        assert np.abs(b.k_cross.numpy() - cross).max() < 1e-12
        assert np.abs(b.k_grid.numpy() - kgrid).max() < 1e-12
        assert np.abs(b.mu_grid.numpy() - [med_entry(arr, m, t, meds) for m, t in zip(gs, gt)]).max() < 1e-12
        assert np.abs(b.mu_obs.numpy() - [med_entry(arr, o[0], o[1], meds) for o in obs]).max() < 1e-12

    def test_single_component_is_kronecker(self, rng):
        M, X = 3, 5
        p = random_params(rng, M, Q=1)
        grid = GridSpec(X)
        gs, gt = grid.flat_coords(M)
        K = mixture_cov(gs, gt, gs, gt, p).numpy()
        KM = p.coreg()[0].numpy()
        l = math.exp(p.numpy()["log_lengthscale"][0])
        KT = np.array([[ou_correlation(a, b, l) for b in range(X)] for a in range(X)])
        assert np.abs(K - np.kron(KM, KT)).max() < 1e-12

    def test_flat_index_matches_coords(self):
        grid = GridSpec(4)
        gs, gt = grid.flat_coords(3)
        for k, (m, t) in enumerate(zip(gs, gt)):
            assert grid.flat_index(m, int(t)) == k

    def test_zero_observations(self):
        with pytest.raises(DimensionError):
            assemble_covariances(make_encounter(), GridSpec(3), init_mgp_params(1, 1))

    def test_index_beyond_dims(self):
        e = make_encounter(obs=[(2, 0.0, 1.0)])
        with pytest.raises(DimensionError):
            assemble_covariances(e, GridSpec(2), init_mgp_params(2, 1))

    def test_grid_for_horizon(self):
        assert GridSpec.for_horizon(10.5).n_points == 11
        assert GridSpec.for_horizon(0.0).n_points == 1
        with pytest.raises(ValueError):
            GridSpec(0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3), st.integers(1, 12))
def test_observed_covariance_eigenvalues_bounded_by_noise(seed, M, Q, n):
    rng = np.random.default_rng(seed)
    p = random_params(rng, M, Q=Q)
    s = rng.integers(0, M, n)
    t = rng.uniform(0, 20, n)
    sigma = mixture_cov(s, t, s, t, p) + torch.diag(p.noise_var()[torch.tensor(s)])
    eig = torch.linalg.eigvalsh(sigma).min().item()
    assert eig >= p.noise_var().min().item() - 1e-9 * max(1.0, sigma.abs().max().item())


def test_default_truth_is_positive_definite():
    t = default_truth(6, 2, seed=3)
    K = t.coreg().sum(0)
    assert torch.linalg.eigvalsh(K).min() > 0
    assert torch.allclose(t.lengthscales(), torch.tensor([3.0, 10.0, 30.0], dtype=torch.float64))
