"""Diffusion tests: schedule oracles, forward/reverse steps, guidance, training."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffupt.diffusion import (
    DiffusionTrainConfig,
    DivergenceError,
    GuidanceSpec,
    MlpDenoiser,
    NULL_TOKEN,
    SampleMethod,
    UNetDenoiser,
    cfg_epsilon,
    ddim_step,
    ddim_timesteps,
    ddpm_step,
    diffusion_loss,
    linear_schedule,
    q_sample,
    sample,
    sample_raw,
    smoothed,
    train_diffusion,
)
from diffupt.numcore import RngStream, ShapeError, Tensor, backward


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_schedule_two_step_explicit():
    s = linear_schedule(2, 0.1, 0.2)
    assert np.allclose(s.beta, [0.1, 0.2])
    assert np.allclose(s.alpha, [0.9, 0.8])
    assert np.allclose(s.alpha_bar, [0.9, 0.72])


def test_schedule_default_tail_is_tiny():
    s = linear_schedule(1000)
    assert s.alpha_bar[-1] < 5e-5


@pytest.mark.parametrize("T", [2, 10, 100, 1000])
def test_schedule_product_oracle_exact(T):
    s = linear_schedule(T)
    prod = 1.0
    for t in range(1, T + 1):
        prod *= 1.0 - s.beta[t - 1]
        assert s.alpha_bar[t - 1] == pytest.approx(prod, rel=0, abs=0)  # exact


def test_schedule_monotone_and_posterior_sigma():
    s = linear_schedule(500)
    assert np.all(np.diff(s.beta) > 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < s.alpha_bar[0] < 1.0
    # sigma_t^2 == beta_t (1 - abar_{t-1}) / (1 - abar_t), with abar_0 := 1
    for t in (1, 2, 77, 500):
        ab_prev = 1.0 if t == 1 else s.alpha_bar[t - 2]
        expect = s.beta[t - 1] * (1 - ab_prev) / (1 - s.alpha_bar[t - 1])
        assert s.sigma[t - 1] ** 2 == pytest.approx(expect, abs=1e-15)
    assert s.sigma[0] == 0.0


def test_schedule_rejects_bad_bounds():
    with pytest.raises(ValueError):
        linear_schedule(1)
    with pytest.raises(ValueError):
        linear_schedule(10, 0.2, 0.1)
    with pytest.raises(ValueError):
        linear_schedule(10, 0.0, 0.5)


# ---------------------------------------------------------------------------
# q_sample
# ---------------------------------------------------------------------------


def test_q_sample_zero_noise():
    s = linear_schedule(100)
    x0 = np.full((2, 3), 0.5)
    z = q_sample(x0, 40, np.zeros_like(x0), s)
    assert np.allclose(z, np.sqrt(s.alpha_bar[39]) * x0)


def test_q_sample_zero_signal():
    s = linear_schedule(100)
    eps = np.ones((2, 3))
    z = q_sample(np.zeros((2, 3)), 70, eps, s)
    assert np.allclose(z, np.sqrt(1 - s.alpha_bar[69]) * eps)


def test_q_sample_out_of_range_t():
    s = linear_schedule(10)
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 11, np.zeros(3), s)
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 0, np.zeros(3), s)


def test_q_sample_variance_preservation():
    s = linear_schedule(1000)
    rng = RngStream(1)
    n = 10_000
    for t in (1, 250, 500, 1000):
        x0 = rng.normal((n,))
        eps = rng.normal((n,))
        z = q_sample(x0, t, eps, s)
        assert z.var() == pytest.approx(1.0, rel=0.05)


# ---------------------------------------------------------------------------
# guidance
# ---------------------------------------------------------------------------


def test_cfg_w_zero_identity():
    rng = RngStream(2)
    a, b = rng.normal((4,)), rng.normal((4,))
    assert np.array_equal(cfg_epsilon(a, b, 0.0), a)


def test_cfg_equal_inputs_any_w():
    a = np.array([1.0, -2.0])
    for w in (0.0, 1.0, 3.0, 10.0):
        assert np.allclose(cfg_epsilon(a, a, w), a)


def test_cfg_direct_evaluation():
    assert cfg_epsilon(np.array([1.0]), np.array([0.0]), 3.0)[0] == pytest.approx(4.0)


def test_cfg_shape_mismatch():
    with pytest.raises(ShapeError):
        cfg_epsilon(np.zeros(3), np.zeros(4), 1.0)


@given(w=st.floats(min_value=0.0, max_value=10.0), seed=st.integers(0, 100))
@settings(max_examples=30)
def test_cfg_is_affine(w, seed):
    rng = RngStream(seed)
    a, b, c, d = (rng.normal((5,)) for _ in range(4))
    lhs = cfg_epsilon(a, b, w) + cfg_epsilon(c, d, w)
    rhs = cfg_epsilon(a + c, b + d, w)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_guidance_spec_validation():
    assert GuidanceSpec().w == 3.0
    with pytest.raises(ValueError):
        GuidanceSpec(-0.5)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


class _EchoNoise:
    """Mock denoiser returning exactly the realized forward noise."""

    null_token = NULL_TOKEN

    def __init__(self, sched):
        self.sched = sched
        self.calls = 0

    def __call__(self, z_t, t, y):
        # invert q_sample for x0 = 0: z_t = sqrt(1-abar) eps
        ab = self.sched.alpha_bar[np.asarray(t) - 1].reshape((-1,) + (1,) * (z_t.ndim - 1))
        self.calls += 1
        return Tensor(z_t.data / np.sqrt(1 - ab))


class _Zero:
    null_token = NULL_TOKEN

    def __call__(self, z_t, t, y):
        return Tensor(np.zeros_like(z_t.data))


def test_loss_zero_for_perfect_model():
    s = linear_schedule(50)
    rng = RngStream(3)
    x0 = np.zeros((8, 2))  # x0=0 so the echo model can reconstruct eps exactly
    y = np.zeros(8, dtype=np.int64)
    loss = diffusion_loss(_EchoNoise(s), x0, y, s, rng, p_uncond=0.0)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_loss_of_zero_model_is_unit():
    s = linear_schedule(50)
    rng = RngStream(4)
    vals = []
    for _ in range(40):
        x0 = np.zeros((25, 4))
        loss = diffusion_loss(_Zero(), x0, np.zeros(25, dtype=np.int64), s, rng)
        vals.append(loss.item())
    assert np.mean(vals) == pytest.approx(1.0, rel=0.05)


def test_loss_null_drop_spares_class_rows():
    s = linear_schedule(20)
    rng = RngStream(5)
    model = MlpDenoiser(3, 16, 8, RngStream(6))
    x0 = rng.normal((12, 3))
    y = rng.integers((12,), 0, 2)
    loss = diffusion_loss(model, x0, y, s, rng, p_uncond=1.0)
    backward(loss)
    grad = model.class_embed.table.tensor.grad
    assert grad is not None
    assert np.all(grad[0] == 0.0) and np.all(grad[1] == 0.0)
    assert np.any(grad[2] != 0.0)


def test_loss_rejects_empty_batch():
    s = linear_schedule(10)
    with pytest.raises(ValueError):
        diffusion_loss(_Zero(), np.zeros((0, 2)), np.zeros(0), s, RngStream(0))


# ---------------------------------------------------------------------------
# reverse steps
# ---------------------------------------------------------------------------


def test_ddpm_step_t1_adds_no_noise():
    s = linear_schedule(10)
    x = np.array([0.3])
    eps = np.array([0.1])
    out1 = ddpm_step(x, 1, eps, s, RngStream(7))
    out2 = ddpm_step(x, 1, eps, s, RngStream(8))  # different rng, same result
    assert np.array_equal(out1, out2)


def test_ddpm_step_marginal_mean_scalar_algebra():
    # With eps_hat equal to the true forward noise and sigma path zeroed,
    # averaging the update over eps and -eps cancels the (zero-mean) noise
    # coefficient exactly, leaving sqrt(abar_{t-1}) * x0.
    s = linear_schedule(100)
    x0 = np.array([0.8])
    t = 37
    rng = RngStream(9)
    eps = rng.normal((1,))

    def posterior_mean(e):
        z_t = q_sample(x0, t, e, s)
        return (z_t - (s.beta[t - 1] / np.sqrt(1 - s.alpha_bar[t - 1])) * e) / np.sqrt(s.alpha[t - 1])

    avg = 0.5 * (posterior_mean(eps) + posterior_mean(-eps))
    assert avg[0] == pytest.approx(np.sqrt(s.alpha_bar[t - 2]) * x0[0], abs=1e-12)


def test_ddpm_step_deterministic_given_stream():
    s = linear_schedule(50)
    x = np.full((3,), 0.2)
    eps = np.full((3,), 0.4)
    a = ddpm_step(x, 20, eps, s, RngStream(10, counter=5))
    b = ddpm_step(x, 20, eps, s, RngStream(10, counter=5))
    assert np.array_equal(a, b)


def test_ddim_eta0_deterministic():
    s = linear_schedule(50)
    x = np.array([0.5, -0.5])
    eps = np.array([0.1, 0.2])
    assert np.array_equal(ddim_step(x, 30, 20, eps, s), ddim_step(x, 30, 20, eps, s))


def test_ddim_inversion_identity():
    s = linear_schedule(100)
    rng = RngStream(11)
    x0 = rng.normal((4,))
    eps = rng.normal((4,))
    t = 60
    z_t = q_sample(x0, t, eps, s)
    # one full jump to t_prev=0 with the true noise recovers x0 exactly
    out = ddim_step(z_t, t, 0, eps, s, eta=0.0)
    assert np.allclose(out, x0, atol=1e-12)


def test_ddim_requires_earlier_t_prev():
    s = linear_schedule(10)
    with pytest.raises(ValueError):
        ddim_step(np.zeros(2), 5, 5, np.zeros(2), s)


def test_ddim_eta1_full_sequence_matches_ddpm_marginals():
    # mock predictor eps_hat = 0.3 * x_t; 1k single-pixel trajectories
    s = linear_schedule(40)
    n = 1000

    def run(kind):
        rng = RngStream(12 if kind == "ddpm" else 13)
        x = RngStream(99).normal((n,))
        for t in range(s.T, 0, -1):
            eps = 0.3 * x
            if kind == "ddpm":
                x = ddpm_step(x, t, eps, s, rng)
            else:
                x = ddim_step(x, t, t - 1, eps, s, eta=1.0, rng=rng)
        return x

    a, b = run("ddpm"), run("ddim")
    assert a.mean() == pytest.approx(b.mean(), abs=0.05 * max(1.0, abs(a.mean())) + 0.05)
    assert a.var() == pytest.approx(b.var(), rel=0.05)


def test_ddim_timesteps_accounting():
    ts = ddim_timesteps(1000, 50)
    assert len(ts) == 50
    assert ts[0] == 1000 and ts[-1] == 1
    assert np.all(np.diff(ts) < 0)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


class _CountingModel:
    null_token = NULL_TOKEN

    def __init__(self, shape):
        self.data_shape = shape
        self.calls = 0

    def predict(self, x, t, y):
        self.calls += 1
        return np.zeros_like(x)


def test_sample_empty_batch():
    s = linear_schedule(10)
    m = _CountingModel((1, 4, 4))
    out = sample(m, 0, 1, GuidanceSpec(), SampleMethod("ddim", 5), s, RngStream(14))
    assert out.shape == (0, 1, 4, 4)
    assert m.calls == 0


def test_sample_ddim_model_pair_accounting():
    s = linear_schedule(1000)
    m = _CountingModel((1, 2, 2))
    sample(m, 3, 1, GuidanceSpec(), SampleMethod("ddim", 50), s, RngStream(15))
    assert m.calls == 100  # 50 steps x (conditional + unconditional)


def test_sample_clamps_to_unit_interval():
    s = linear_schedule(20)
    m = _CountingModel((1, 2, 2))
    out = sample(m, 5, 0, GuidanceSpec(), SampleMethod("ddim", 10), s, RngStream(16))
    assert out.min() >= 0.0 and out.max() <= 1.0


def _toy_setup(seed):
    rng = RngStream(seed)
    sched = linear_schedule(400)
    mu = np.array([0.5, 0.5])
    n = 512
    x0 = np.concatenate([rng.normal((n, 2), 0, 0.1) - mu, rng.normal((n, 2), 0, 0.1) + mu])
    y = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    return rng, sched, mu, x0, y


@pytest.mark.slow
def test_sample_two_gaussian_toy_means():
    rng, sched, mu, x0, y = _toy_setup(7)
    model = MlpDenoiser(2, 96, 32, rng.split("model"))
    cfg = DiffusionTrainConfig(iterations=4000, batch=64, lr=2e-3, p_uncond=0.15)
    train_diffusion(model, x0, y, cfg, sched, rng.split("train"))
    tol = 0.15 * np.linalg.norm(mu)
    for cls, target in [(0, -mu), (1, mu)]:
        s = sample_raw(model, 300, cls, GuidanceSpec(1.0), SampleMethod("ddim", 50), sched, rng.split(f"s{cls}"))
        assert np.linalg.norm(s.mean(axis=0) - target) < tol


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def test_train_zero_iterations_unchanged():
    rng = RngStream(17)
    model = MlpDenoiser(2, 8, 8, rng)
    before = model.weight_bytes()
    losses = train_diffusion(model, np.zeros((4, 2)), np.zeros(4, dtype=np.int64), DiffusionTrainConfig(iterations=0), linear_schedule(10), rng)
    assert len(losses) == 0
    assert model.weight_bytes() == before


def test_train_converges_on_constant_image():
    rng = RngStream(18)
    sched = linear_schedule(100)
    x0 = np.full((16, 1, 4, 4), 0.5)
    y = np.zeros(16, dtype=np.int64)
    model = UNetDenoiser((1, 4, 4), 8, rng.split("m"), emb_dim=16, depth=1)
    losses = train_diffusion(model, x0, y, DiffusionTrainConfig(iterations=500, batch=16, lr=3e-3), sched, rng.split("t"))
    ema = smoothed(losses)
    assert ema[-1] < 0.1 * ema[0]
    assert ema[-1] < ema[0]


def test_train_loss_curve_reproducible():
    def run():
        rng = RngStream(19)
        model = MlpDenoiser(2, 16, 8, rng.split("m"))
        return train_diffusion(
            model,
            RngStream(20).normal((32, 2)),
            np.zeros(32, dtype=np.int64),
            DiffusionTrainConfig(iterations=50, batch=8, lr=1e-3),
            linear_schedule(50),
            rng.split("t"),
        )

    assert np.array_equal(run(), run())


def test_train_divergence_aborts():
    rng = RngStream(21)
    model = MlpDenoiser(2, 16, 8, rng.split("m"))
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergenceError):
        train_diffusion(
            model,
            RngStream(22).normal((16, 2)),
            np.zeros(16, dtype=np.int64),
            DiffusionTrainConfig(iterations=10, batch=8, lr=1e150),
            linear_schedule(50),
            rng.split("t"),
        )


def test_unet_output_shape_matches_input():
    rng = RngStream(23)
    model = UNetDenoiser((3, 8, 8), 8, rng, emb_dim=16)
    x = Tensor(RngStream(24).normal((2, 3, 8, 8)))
    out = model(x, np.array([5, 9]), np.array([0, 2]))
    assert out.shape == (2, 3, 8, 8)
    assert model.class_embed.table.shape[0] == 3
