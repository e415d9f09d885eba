import itertools
import math

import numpy as np
import pytest

from jem_lab.diffcore import Network
from jem_lab.energy import JemModel, QuadraticEnergy
from jem_lab.errors import ConfigError, DivergenceError
from jem_lab.rng import Rng
from jem_lab.sampler import (
    ReplayBuffer, SamplerConfig, chain_noise, draw_init, pcd_transition, run_chain, sample_px_method1,
    sample_px_method2, sgld_step,
)


class _NanEnergy:
    input_dim = 2
    num_classes = 1

    def grad_logp_x(self, x):
        return np.full_like(np.asarray(x, dtype=np.float64), np.nan)


@pytest.fixture
def gaussian():
    return QuadraticEnergy(2, scale=1.0)


def test_improper_step_is_drift_plus_scaled_noise(gaussian):
    cfg = SamplerConfig(alpha=0.1, sigma=0.5)
    x = np.array([1.0, -2.0])
    noise = np.array([0.2, 0.4])
    np.testing.assert_allclose(sgld_step(gaussian, x, cfg, noise=noise), x - 0.1 * x + 0.5 * noise)


def test_proper_step_uses_half_drift_and_root_alpha_noise(gaussian):
    cfg = SamplerConfig(alpha=0.04, proper_mode=True)
    x = np.array([1.0, -2.0])
    noise = np.array([1.0, 1.0])
    np.testing.assert_allclose(sgld_step(gaussian, x, cfg, noise=noise), x - 0.02 * x + 0.2 * noise)


def test_proper_mode_decay_schedule():
    cfg = SamplerConfig(alpha=0.1, proper_mode=True, decay_power=0.5)
    step, noise = cfg.step_and_noise(3)
    assert step == pytest.approx(0.5 * 0.1 / 2.0)
    assert noise == pytest.approx(np.sqrt(0.05))


def test_proper_chains_reach_the_target_variance(gaussian):
    cfg = SamplerConfig(alpha=0.01, proper_mode=True)
    rng = Rng(0)
    x = run_chain(gaussian, rng.substream("init").normal((10_000, 2)), cfg, 1000, rng=rng.substream("noise"))
    assert x.var() == pytest.approx(1.0, rel=0.05)
    assert abs(x.mean()) < 0.05


@pytest.mark.slow
def test_single_long_chain_forgets_a_distant_start(gaussian):
    cfg = SamplerConfig(alpha=0.01, proper_mode=True)
    steps, burn_in = 1_000_000, 10_000
    noise = Rng(4).normal((steps, 2))
    x = np.array([5.0, -5.0])
    total, total_sq = np.zeros(2), np.zeros(2)
    for t in range(steps):
        x = sgld_step(gaussian, x, cfg, noise=noise[t])
        if t >= burn_in:
            total += x
            total_sq += x * x
    kept = steps - burn_in
    mean = total / kept
    variance = total_sq / kept - mean ** 2
    assert np.mean(variance) == pytest.approx(1.0, rel=0.05)
    assert np.all(np.abs(mean) < 0.1)


def test_improper_mode_with_matched_noise_reproduces_proper_mode():
    model = JemModel(Network.mlp(2, (8,), 3, activation="tanh", rng=Rng(5)))
    alpha = 0.03
    proper = SamplerConfig(alpha=alpha, proper_mode=True, clamp=2.0)
    improper = SamplerConfig(alpha=alpha / 2, sigma=math.sqrt(alpha), clamp=2.0)
    x0 = Rng(6).uniform(-1.0, 1.0, (20, 2))
    np.testing.assert_array_equal(run_chain(model, x0, proper, 50, rng=Rng(7)),
                                  run_chain(model, x0, improper, 50, rng=Rng(7)))
    x, y = sample_px_method1(model, proper, Rng(8), steps=20, n=10)
    x_improper, y_improper = sample_px_method1(model, improper, Rng(8), steps=20, n=10)
    np.testing.assert_array_equal(x, x_improper)
    np.testing.assert_array_equal(y, y_improper)


def test_noiseless_steps_below_the_stability_limit_always_lower_the_energy():
    # E = ||x||^2 / (2 * 0.5^2) has Lipschitz gradient with L = 4
    energy = QuadraticEnergy(2, scale=0.5)
    cfg = SamplerConfig(alpha=0.45, sigma=0.0)
    starts = Rng(9).uniform(-3.0, 3.0, (100, 2))
    for x in starts:
        energies = [energy.energy_x(x)]
        for _ in range(30):
            x = sgld_step(energy, x, cfg, rng=Rng(0))
            energies.append(energy.energy_x(x))
        assert np.all(np.diff(energies) < 0)


def test_clamp_bounds_states(gaussian):
    cfg = SamplerConfig(alpha=0.1, sigma=10.0, clamp=1.5)
    x = run_chain(gaussian, np.zeros((50, 2)), cfg, 5, rng=Rng(1))
    assert np.all(np.abs(x) <= 1.5)


def test_non_finite_drift_raises():
    with pytest.raises(DivergenceError):
        sgld_step(_NanEnergy(), np.zeros(2), SamplerConfig(), rng=Rng(0))


def test_invalid_configs_are_rejected():
    with pytest.raises(ConfigError):
        SamplerConfig(alpha=0.0)
    with pytest.raises(ConfigError):
        SamplerConfig(rho=1.5)
    with pytest.raises(ConfigError):
        SamplerConfig(init="laplace")


def test_buffer_grows_then_overwrites_in_ring_order():
    buf = ReplayBuffer(3, 1)
    assert [buf.insert_fresh(np.array([float(v)])) for v in range(3)] == [0, 1, 2]
    assert buf.is_full()
    assert buf.insert_fresh(np.array([10.0])) == 0
    assert buf.insert_fresh(np.array([11.0])) == 1
    np.testing.assert_array_equal(buf.states[:, 0], [10.0, 11.0, 2.0])


def test_store_replaces_non_finite_states():
    cfg = SamplerConfig()
    buf = ReplayBuffer(4, 2)
    buf.fill(cfg, Rng(0))
    buf.store(np.array([[np.nan, 0.0]]), np.array([1]), cfg, Rng(1))
    assert np.all(np.isfinite(buf.states))
    assert np.all(np.abs(buf.states) <= 1.0)


def _sorted_rows(states):
    return states[np.lexsort(states.T[::-1])]


def test_store_result_does_not_depend_on_chain_order():
    cfg = SamplerConfig()
    states = np.array([[0.1, 0.1], [0.2, 0.2], [0.3, 0.3], [0.4, 0.4]])
    # two write-backs, one of them into the slot the first fresh state overwrites
    slots = np.array([0, 3, -1, -1])
    reference = None
    for order in itertools.permutations(range(4)):
        buf = ReplayBuffer(6, 2)
        buf.fill(cfg, Rng(0))
        buf.store(states[list(order)], slots[list(order)], cfg, Rng(1))
        rows = _sorted_rows(buf.states)
        if reference is None:
            reference = rows
        np.testing.assert_array_equal(rows, reference)
    assert not np.any(np.all(reference == [0.1, 0.1], axis=1))
    assert np.any(np.all(reference == [0.2, 0.2], axis=1))


def test_chains_start_from_distinct_slots():
    cfg = SamplerConfig(rho=0.0)
    buf = ReplayBuffer(10, 2)
    buf.fill(cfg, Rng(0))
    for seed in range(50):
        _, slots = draw_init(buf, cfg, Rng(seed), 10)
        assert sorted(slots) == list(range(10))


def test_small_buffer_starts_surplus_chains_fresh():
    cfg = SamplerConfig(rho=0.0)
    buf = ReplayBuffer(10, 2)
    buf.fill(cfg, Rng(0), count=3)
    _, slots = draw_init(buf, cfg, Rng(1), 5)
    assert sorted(slots[slots >= 0]) == [0, 1, 2]
    assert np.sum(slots == -1) == 2


def test_empty_buffer_draws_every_chain_fresh():
    buf = ReplayBuffer(10, 2)
    states, slots = draw_init(buf, SamplerConfig(rho=0.0), Rng(0), 5)
    assert np.all(slots == -1)
    assert states.shape == (5, 2)


def test_rho_zero_reuses_buffer_states():
    cfg = SamplerConfig(rho=0.0)
    buf = ReplayBuffer(10, 2)
    buf.fill(cfg, Rng(0))
    states, slots = draw_init(buf, cfg, Rng(1), 6)
    assert np.all(slots >= 0)
    np.testing.assert_array_equal(states, buf.states[slots])


def test_rho_one_draws_everything_from_p0():
    cfg = SamplerConfig(rho=1.0)
    buf = ReplayBuffer(10, 2)
    buf.fill(cfg, Rng(0))
    _, slots = draw_init(buf, cfg, Rng(1), 6)
    assert np.all(slots == -1)


def test_chain_noise_is_per_chain():
    rng = Rng(0)
    full = chain_noise(rng, [3, 5], 4, 2)
    alone = chain_noise(rng, [3], 4, 2)
    np.testing.assert_array_equal(full[:, 0], alone[:, 0])


def test_pcd_transition_updates_buffer(gaussian):
    cfg = SamplerConfig(alpha=0.01, sigma=0.01, eta=5, rho=0.0, buffer_size=8)
    buf = ReplayBuffer(cfg.buffer_size, 2)
    first = pcd_transition(gaussian, buf, cfg, Rng(0), 4)
    assert len(buf) == 4 and buf.transitions == 1
    np.testing.assert_array_equal(buf.states, first)
    pcd_transition(gaussian, buf, cfg, Rng(0), 4)
    assert buf.transitions == 2
    assert len(buf) == 4


def test_pcd_transition_is_deterministic(gaussian):
    cfg = SamplerConfig(alpha=0.01, eta=3, rho=0.3, buffer_size=5)
    a, b = ReplayBuffer(5, 2), ReplayBuffer(5, 2)
    for _ in range(3):
        np.testing.assert_array_equal(pcd_transition(gaussian, a, cfg, Rng(2), 3),
                                      pcd_transition(gaussian, b, cfg, Rng(2), 3))


def test_sampling_methods_shapes(gaussian):
    cfg = SamplerConfig(alpha=0.01)
    assert sample_px_method2(gaussian, cfg, Rng(0), steps=3, n=7).shape == (7, 2)
    x, y = sample_px_method1(gaussian, cfg, Rng(0), steps=3, n=7)
    assert x.shape == (7, 2)
    np.testing.assert_array_equal(y, 0)


def test_long_pcd_run_is_reproducible_and_bounded(gaussian):
    cfg = SamplerConfig(alpha=0.01, sigma=0.01, eta=2, rho=0.1, buffer_size=16)
    a, b = ReplayBuffer(16, 2), ReplayBuffer(16, 2)
    for _ in range(1000):
        pcd_transition(gaussian, a, cfg, Rng(8), 4)
        pcd_transition(gaussian, b, cfg, Rng(8), 4)
        assert len(a) <= 16
    np.testing.assert_array_equal(a.states, b.states)
    assert np.all(np.isfinite(a.states))
    assert a.transitions == 1000
