import numpy as np
import pytest

from mnif.datasets import ring_gaussian_mixture
from mnif.diffusion import (
    STD_FLOOR,
    DenoiserMlp,
    DiffusionConfig,
    LatentStats,
    NoiseSchedule,
    denoiser_param_count,
    forward_noise,
    sample,
    sample_by_interpolation,
    timestep_embedding,
    train_denoiser,
)
from mnif.numerics import ContractError
from mnif.trainers import LatentTable, log_line


class ExactNoisePredictor:
    """Optimal noise predictor when the data is a single standardised point."""

    def __init__(self, point, schedule):
        self.point = np.asarray(point, np.float64)
        self.abar = schedule.alpha_bars

    def predict_noise(self, x, t):
        ab = self.abar[np.asarray(t)][:, None]
        return ((x - np.sqrt(ab) * self.point) / np.sqrt(1.0 - ab)).astype(np.float32)


class ZeroPredictor:
    def predict_noise(self, x, t):
        return np.zeros_like(x)


# -- schedules ------------------------------------------------------------------


def test_config_invariants():
    with pytest.raises(ValueError):
        DiffusionConfig(timesteps=0)
    with pytest.raises(ValueError):
        DiffusionConfig(denoiser_width=0)
    with pytest.raises(ValueError):
        DiffusionConfig(schedule="sigmoid")
    assert DiffusionConfig.full_size().denoiser_width == 4096


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_schedule_sanity(kind):
    abar = NoiseSchedule.from_config(DiffusionConfig(schedule=kind)).alpha_bars
    assert len(abar) == 1000
    assert (np.diff(abar) < 0).all()
    assert abar[0] > 0.99 and abar[-1] < 0.05
    assert np.sqrt(abar[-1]) <= 0.1


def test_linear_schedule_first_step():
    abar = NoiseSchedule.from_config(DiffusionConfig(schedule="linear")).alpha_bars
    assert abar[0] >= 0.999


def test_forward_noise_closed_form():
    s = NoiseSchedule.from_config(DiffusionConfig())
    phi, eps = np.array([[1.0, -2.0]]), np.array([[0.5, 0.25]])
    ab = s.alpha_bars[300]
    np.testing.assert_allclose(forward_noise(phi, np.array([300]), eps, s), np.sqrt(ab) * phi + np.sqrt(1 - ab) * eps,
                               rtol=1e-6)


def test_forward_noise_t0_keeps_signal():
    s = NoiseSchedule.from_config(DiffusionConfig(schedule="linear"))
    phi = np.array([[0.3, -0.7, 1.1]])
    np.testing.assert_allclose(forward_noise(phi, np.array([0]), np.zeros_like(phi), s), phi, rtol=1e-3)


@pytest.mark.parametrize("t", [-1, 1000])
def test_forward_noise_rejects_bad_t(t):
    s = NoiseSchedule.from_config(DiffusionConfig())
    with pytest.raises(ContractError):
        forward_noise(np.zeros((1, 2)), np.array([t]), np.zeros((1, 2)), s)


@pytest.mark.parametrize("t", [0, 250, 999])
def test_forward_noise_monte_carlo_moments(t):
    s = NoiseSchedule.from_config(DiffusionConfig())
    phi = np.array([1.5, -0.5, 0.2])
    noise = np.random.default_rng(t).standard_normal((100_000, 3))
    xt = forward_noise(np.broadcast_to(phi, noise.shape), np.full(len(noise), t), noise, s).astype(np.float64)
    ab = s.alpha_bars[t]
    np.testing.assert_allclose(xt.mean(axis=0), np.sqrt(ab) * phi, atol=1e-2)
    np.testing.assert_allclose(xt.var(axis=0), np.full(3, 1 - ab), atol=1e-2)


# -- standardisation ----------------------------------------------------------------


def test_stats_round_trip():
    x = np.random.default_rng(0).normal(3.0, 0.01, (40, 5))
    x[:, 2] = 7.0
    st = LatentStats.fit(x)
    assert st.std[2] == STD_FLOOR
    np.testing.assert_allclose(st.destandardize(st.standardize(x)), x, atol=1e-6)


def test_timestep_embedding_shape_and_range():
    e = timestep_embedding(np.arange(10), 16)
    assert e.shape == (10, 16) and np.abs(e).max() <= 1.0
    assert not np.allclose(e[0], e[1])


# -- denoiser ------------------------------------------------------------------------


def test_param_count_by_enumeration():
    net = DenoiserMlp(2, 8, 2, 4, seed=0)
    inventory = {
        "in_proj.w": (8, 2), "in_proj.b": (8,),
        **{f"block{i}.time.w": (8, 4) for i in range(2)}, **{f"block{i}.time.b": (8,) for i in range(2)},
        **{f"block{i}.fc{j}.w": (8, 8) for i in range(2) for j in (1, 2)},
        **{f"block{i}.fc{j}.b": (8,) for i in range(2) for j in (1, 2)},
        "out_proj.w": (2, 8), "out_proj.b": (2,),
    }
    assert {n: p.shape for n, p in net.named_parameters()} == inventory
    expected = sum(int(np.prod(s)) for s in inventory.values())
    assert expected == 410
    assert net.num_params() == denoiser_param_count(2, 8, 2, 4) == expected


def test_untrained_denoiser_predicts_zero():
    net = DenoiserMlp(3, 16, 2, 8, seed=1)
    out = net.predict_noise(np.ones((4, 3)), np.array([0, 1, 2, 3]))
    np.testing.assert_array_equal(out, 0.0)


def test_step0_loss_matches_random_predictor_expectation():
    table = LatentTable(np.random.default_rng(0).standard_normal((512, 8)).astype(np.float32))
    _, _, hist = train_denoiser(table, DiffusionConfig(epochs=1, batch_size=512, denoiser_width=32, denoiser_blocks=1), 0)
    assert abs(hist[0]["loss"] - 1.0) <= 0.2


def test_training_deterministic():
    table = LatentTable(ring_gaussian_mixture(64, 0))
    cfg = DiffusionConfig(epochs=3, batch_size=16, denoiser_width=16, denoiser_blocks=1)
    m1, _, h1 = train_denoiser(table, cfg, 3)
    m2, _, h2 = train_denoiser(table, cfg, 3)
    assert [log_line(r) for r in h1] == [log_line(r) for r in h2]
    for a, b in zip(m1.parameters(), m2.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_degenerate_table_engages_floor_and_learns():
    table = LatentTable(np.tile([[0.5, -1.0]], (64, 1)).astype(np.float32))
    cfg = DiffusionConfig(epochs=200, batch_size=64, denoiser_width=32, denoiser_blocks=1, lr=3e-3)
    _, stats, hist = train_denoiser(table, cfg, 0)
    np.testing.assert_array_equal(stats.std, STD_FLOOR)
    # every standardised latent is 0, so x_t is pure scaled noise and the optimal loss is 0
    assert hist[0]["loss"] > 0.9
    assert np.mean([h["loss"] for h in hist[-20:]]) < 0.15


def test_empty_table_rejected():
    with pytest.raises(ContractError):
        train_denoiser(LatentTable(np.zeros((0, 2), np.float32)), DiffusionConfig(), 0)


# -- sampling --------------------------------------------------------------------------


def test_sample_shape_and_zero_count():
    stats = LatentStats(np.zeros(3), np.ones(3))
    cfg = DiffusionConfig(timesteps=50)
    assert sample(ZeroPredictor(), stats, cfg, 0, seed=0).shape == (0, 3)
    out = sample(ZeroPredictor(), stats, cfg, 7, seed=0)
    assert out.shape == (7, 3) and np.isfinite(out).all()


def test_sample_reproducible():
    net = DenoiserMlp(2, 16, 1, 8, seed=0)
    for p in net.parameters():
        p.data[:] = np.random.default_rng(1).normal(0, 0.1, p.shape)
    stats = LatentStats(np.array([1.0, 2.0]), np.array([0.5, 3.0]))
    cfg = DiffusionConfig(timesteps=100)
    np.testing.assert_array_equal(sample(net, stats, cfg, 5, seed=4), sample(net, stats, cfg, 5, seed=4))
    assert not np.array_equal(sample(net, stats, cfg, 5, seed=4), sample(net, stats, cfg, 5, seed=5))


def test_exact_noise_predictor_concentrates_on_point():
    cfg = DiffusionConfig(timesteps=200)
    point = np.array([1.0, -0.5])
    stats = LatentStats(np.zeros(2), np.ones(2))
    exact = sample(ExactNoisePredictor(point, NoiseSchedule.from_config(cfg)), stats, cfg, 256, seed=0)
    base = sample(ZeroPredictor(), stats, cfg, 256, seed=0)
    d_exact = np.linalg.norm(exact - point, axis=1).mean()
    d_base = np.linalg.norm(base - point, axis=1).mean()
    assert d_exact < 0.05 and d_exact < 0.1 * d_base


# -- interpolation sampler ---------------------------------------------------------------


def test_interpolation_identical_pair():
    t = LatentTable(np.array([[0.3, 0.4], [0.3, 0.4]], np.float32))
    np.testing.assert_array_equal(sample_by_interpolation(t, 1, seed=0), t.latents[0])


def test_interpolation_alpha_one_returns_anchor():
    t = LatentTable(np.random.default_rng(0).standard_normal((20, 3)).astype(np.float32))
    out, (i, j, a) = sample_by_interpolation(t, 3, seed=2, alpha=1.0, return_draw=True)
    np.testing.assert_array_equal(out, t.latents[i])


def test_interpolation_lies_on_segment_with_near_neighbour():
    lat = np.random.default_rng(1).standard_normal((50, 4)).astype(np.float32)
    t = LatentTable(lat)
    for seed in range(30):
        out, (i, j, a) = sample_by_interpolation(t, 5, seed=seed, return_draw=True)
        assert i != j and 0 <= a <= 1
        np.testing.assert_array_equal(out, (a * lat[i].astype(np.float64) + (1 - a) * lat[j].astype(np.float64)).astype(np.float32))
        d = np.linalg.norm(lat - lat[i], axis=1)
        d[i] = np.inf
        assert d[j] <= np.sort(d)[4]


def test_interpolation_needs_two_rows():
    with pytest.raises(ContractError):
        sample_by_interpolation(LatentTable(np.zeros((1, 2), np.float32)), 1, seed=0)
