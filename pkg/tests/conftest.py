import math

import numpy as np
import pytest
import torch

from mgprnn.data import Encounter
from mgprnn.kernel import MgpParams


def make_encounter(
    eid="e0",
    los=20.0,
    label="control",
    obs=(),
    meds=(),
    baseline=(0.0,),
    event_time=None,
    prediction_time=None,
):
    obs = list(obs)
    meds = list(meds)
    return Encounter(
        id=eid,
        los=los,
        label=label,
        baseline=list(baseline),
        obs_series=[o[0] for o in obs],
        obs_times=[o[1] for o in obs],
        obs_values=[o[2] for o in obs],
        med_drugs=[m[0] for m in meds],
        med_times=[m[1] for m in meds],
        event_time=event_time,
        prediction_time=prediction_time,
    )


def random_params(rng, M, P=1, Q=2, L=2, noise=0.3) -> MgpParams:
    return MgpParams.from_arrays(
        {
            "log_lengthscale": np.log(rng.uniform(0.5, 8.0, Q)),
            "coreg_factor": np.tril(rng.normal(0, 0.7, (Q, M, M))) + 0.3 * np.eye(M),
            "log_noise": np.log(rng.uniform(0.5, 1.5, M) * noise),
            "med_alpha": rng.normal(0, 0.5, (L, P, M)),
            "med_log_beta": np.log(rng.uniform(0.1, 2.0, (L, P, M))),
        }
    )


def kernel_entry(arr, m1, t1, m2, t2):
    """Sum-of-separable covariance by direct definition (plain python floats)."""
    total = 0.0
    F = np.tril(arr["coreg_factor"])
    for q in range(F.shape[0]):
        K = F[q] @ F[q].T
        total += K[m1, m2] * math.exp(-abs(t1 - t2) / math.exp(arr["log_lengthscale"][q]))
    return total


def med_entry(arr, m, t, meds):
    total = 0.0
    for p, tp in meds:
        if tp < t:
            for l in range(arr["med_alpha"].shape[0]):
                total += arr["med_alpha"][l, p, m] * math.exp(-math.exp(arr["med_log_beta"][l, p, m]) * (t - tp))
    return total


def dense_conditioning(arr, obs, meds, M, X, jitter=1e-6):
    """Independent Gaussian conditioning on the joint (grid, observed) vector."""
    grid = [(m, float(j)) for m in range(M) for j in range(X)]
    noise = np.exp(2 * arr["log_noise"])
    Kgg = np.array([[kernel_entry(arr, a[0], a[1], b[0], b[1]) for b in grid] for a in grid])
    Kgo = np.array([[kernel_entry(arr, a[0], a[1], o[0], o[1]) for o in obs] for a in grid])
    Koo = np.array([[kernel_entry(arr, a[0], a[1], b[0], b[1]) for b in obs] for a in obs])
    Koo += np.diag([noise[o[0]] + jitter for o in obs])
    mu_g = np.array([med_entry(arr, m, t, meds) for m, t in grid])
    mu_o = np.array([med_entry(arr, o[0], o[1], meds) for o in obs])
    y = np.array([o[2] for o in obs])
    mean = mu_g + Kgo @ np.linalg.solve(Koo, y - mu_o)
    cov = Kgg - Kgo @ np.linalg.solve(Koo, Kgo.T)
    return mean, cov, Kgg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def central_differences(fn, tensors: dict, step=1e-5):
    """Central finite differences of scalar fn() w.r.t. every entry of every tensor (mutated in place)."""
    out = {}
    with torch.no_grad():
        for name, t in tensors.items():
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(fn())
                flat[i] = orig - step
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            out[name] = g
    return out


def assert_gradients_close(analytic: dict, numeric: dict, rel=1e-4, floor=1e-6):
    for name, g in numeric.items():
        a = analytic[name]
        err = (a - g).abs()
        bound = rel * torch.maximum(a.abs(), g.abs()) + floor
        worst = int(torch.argmax(err - bound))
        assert torch.all(err <= bound), f"{name}[{worst}]: analytic {a.view(-1)[worst]:.8g} vs fd {g.view(-1)[worst]:.8g}"


_MATCHED = {}


def small_matched(n=120, seed=5):
    """A small matched synthetic cohort (M=2, B=1, P=1), cached per (n, seed)."""
    from mgprnn.data import SimConfig, match_case_controls, simulate_cohort

    if (n, seed) not in _MATCHED:
        cfg = SimConfig(
            n_encounters=n, M=2, B=1, P=1, case_rate=0.15, mean_los_hours=12, sd_los_hours=4,
            obs_rate_per_series=0.5, med_rate_per_drug=0.1, hazard_weights=[2.0, 2.0], rng_seed=seed,
        )
        _MATCHED[(n, seed)] = match_case_controls(simulate_cohort(cfg), 4)
    return _MATCHED[(n, seed)]


def small_train_config(**kw):
    from mgprnn.trainer import TrainConfig

    base = dict(hidden=6, mc_samples=2, max_epochs=2, batch_size=20, learning_rate=0.01, rng_seed=3)
    base.update(kw)
    return TrainConfig(**base)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
