import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from diffsr.diffusion import (ConditionMode, DenoiserConfig, NoiseSchedule, PatchData, assemble_condition,
                              build_denoiser, build_schedule, denoiser_forward, diffusion_loss_step,
                              forward_sample, load_denoiser, reverse_step, sample, train_diffusion)
from diffsr.errors import ConditionError, NonFiniteError, ShapeError
from diffsr.substrate import grad_check, philox

TOY = DenoiserConfig(base_channels=8, depth=2, time_dim=16, mode="both")


# --- schedule ---------------------------------------------------------------

def test_alpha_bar_at_T1000():
    s = build_schedule(1000, 1e-4, 0.02)
    assert 3e-5 <= s.alpha_bar[-1] <= 5e-5


def test_single_step_schedule():
    s = build_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.alpha_bar, [0.5])


@given(T=st.integers(1, 300), lo=st.floats(1e-5, 0.05), span=st.floats(0, 0.3))
def test_alpha_bar_is_cumulative_product(T, lo, span):
    s = build_schedule(T, lo, lo + span)
    ref = np.array([math.prod(1 - b for b in s.beta[: t + 1]) for t in range(T)])
    np.testing.assert_allclose(s.alpha_bar, ref, rtol=1e-12, atol=0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    np.testing.assert_array_equal(s.sigma, np.sqrt(s.beta))


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_respace_preserves_endpoints():
    s = build_schedule(200, 5e-4, 0.1)
    r = s.respace(20)
    assert r.T == 20 and r.timesteps[0] == 1 and r.timesteps[-1] == 200
    assert r.alpha_bar[-1] == pytest.approx(s.alpha_bar[-1], rel=1e-12)
    np.testing.assert_allclose(r.alpha_bar, s.alpha_bar[r.timesteps - 1], rtol=1e-12)


# --- forward / reverse ------------------------------------------------------

def test_forward_sample_example():
    s = NoiseSchedule.from_betas([0.25])
    y = forward_sample(torch.tensor([1.0], dtype=torch.float64), 1, torch.tensor([0.5], dtype=torch.float64), s)
    assert y.item() == pytest.approx(math.sqrt(0.75) + 0.25, abs=1e-7)
    assert y.item() == pytest.approx(1.1160254, abs=1e-7)


def test_forward_sample_beta_zero_limit():
    s = NoiseSchedule.from_betas([0.0], check=False)
    y0 = torch.randn(5, dtype=torch.float64)
    assert torch.equal(forward_sample(y0, 1, torch.randn(5, dtype=torch.float64), s), y0)


def test_forward_sample_moments():
    s = build_schedule(200, 1e-4, 0.02)
    t = 120
    gen = torch.Generator().manual_seed(0)
    eps = torch.randn(200_000, generator=gen, dtype=torch.float64)
    y = forward_sample(torch.full_like(eps, 0.7), t, eps, s)
    ab = s.alpha_bar[t - 1]
    assert y.mean().item() == pytest.approx(math.sqrt(ab) * 0.7, abs=5e-3)
    assert y.var().item() == pytest.approx(1 - ab, rel=2e-2)


def test_forward_sample_per_sample_t():
    s = build_schedule(50, 1e-3, 0.05)
    y0, eps = torch.ones(3, 1, 2, 2), torch.zeros(3, 1, 2, 2)
    y = forward_sample(y0, torch.tensor([1, 10, 50]), eps, s)
    np.testing.assert_allclose(y[:, 0, 0, 0].numpy(), np.sqrt(s.alpha_bar[[0, 9, 49]]), rtol=1e-6)
    with pytest.raises(ValueError):
        forward_sample(y0, 51, eps, s)


def test_reverse_step_recovers_y0_at_t1():
    s = NoiseSchedule.from_betas([0.2])
    y0, eps = torch.tensor([1.0], dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64)
    y1 = forward_sample(y0, 1, eps, s)
    assert y1.item() == pytest.approx(1.1180340, abs=1e-7)
    assert reverse_step(y1, 1, eps, None, s).item() == pytest.approx(1.0, abs=1e-7)
    # z is ignored at t = 1
    assert reverse_step(y1, 1, eps, torch.tensor([3.0], dtype=torch.float64), s).item() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("t", [2, 7, 40])
def test_reverse_step_closed_form(t):
    s = build_schedule(40, 1e-3, 0.05)
    y0, eps = torch.tensor([0.3], dtype=torch.float64), torch.tensor([-1.2], dtype=torch.float64)
    y_t = forward_sample(y0, t, eps, s)
    out = reverse_step(y_t, t, eps, torch.zeros(1, dtype=torch.float64), s).item()
    ab_prev, ab, a = s.alpha_bar[t - 2], s.alpha_bar[t - 1], s.alpha[t - 1]
    ref = math.sqrt(ab_prev) * 0.3 + math.sqrt(a) * (1 - ab_prev) / math.sqrt(1 - ab) * -1.2
    assert out == pytest.approx(ref, abs=1e-6)


def test_reverse_step_beta_zero_is_identity():
    s = NoiseSchedule.from_betas([0.1, 0.0], check=False)
    y = torch.randn(4, dtype=torch.float64)
    assert torch.equal(reverse_step(y, 2, torch.randn(4, dtype=torch.float64), torch.randn(4, dtype=torch.float64), s), y)
    with pytest.raises(ValueError):
        reverse_step(y, 3, y, None, s)


# --- conditioning -----------------------------------------------------------

def test_assemble_condition_channels():
    sat, est = torch.randn(2, 4, 8, 8), torch.randn(2, 1, 8, 8)
    both = assemble_condition("both", sat, est)
    assert both.shape[1] == 5 and torch.equal(both[:, :4], sat) and torch.equal(both[:, 4:], est)
    assert assemble_condition(ConditionMode.SATELLITE, sat, est).shape[1] == 4
    assert assemble_condition(ConditionMode.ESTIMATE, None, est).shape[1] == 1
    with pytest.raises(ConditionError):
        assemble_condition("both", sat, None)
    with pytest.raises(ConditionError):
        assemble_condition("satellite", None, est)
    with pytest.raises(ShapeError):
        assemble_condition("both", sat, torch.randn(2, 1, 4, 4))
    with pytest.raises(ValueError):
        assemble_condition("radar", sat, est)


# --- denoiser ---------------------------------------------------------------

def test_denoiser_shape():
    model = build_denoiser(DenoiserConfig(base_channels=8, mode="both"), seed=0)
    out = denoiser_forward(torch.randn(1, 1, 64, 64), torch.randn(1, 5, 64, 64), torch.tensor([17]), model)
    assert out.shape == (1, 1, 64, 64)
    with pytest.raises(ShapeError):
        denoiser_forward(torch.randn(1, 1, 64, 64), torch.randn(1, 4, 64, 64), torch.tensor([17]), model)
    with pytest.raises(ShapeError):
        denoiser_forward(torch.randn(1, 1, 64, 64), torch.randn(1, 5, 32, 32), torch.tensor([17]), model)


def test_time_embedding_is_live():
    model = build_denoiser(TOY, seed=0)
    y, c = torch.randn(1, 1, 16, 16), torch.randn(1, 5, 16, 16)
    with torch.no_grad():
        assert not torch.allclose(model(y, c, torch.tensor([1])), model(y, c, torch.tensor([200])))


class Packed(torch.nn.Module):
    def __init__(self, model, t):
        super().__init__()
        self.model, self.t = model, t

    def forward(self, x):
        return self.model(x[:, :1], x[:, 1:], self.t)


@pytest.mark.parametrize("dtype, tol", [(torch.float64, 1e-5), (torch.float32, 1e-3)])
def test_denoiser_grad_check(dtype, tol):
    torch.manual_seed(0)
    model = build_denoiser(TOY, seed=1).to(dtype)
    x = torch.randn(2, 6, 8, 8, dtype=dtype)
    assert grad_check(Packed(model, torch.tensor([3, 150])), x, n_samples=12) < tol


V_TOY = DenoiserConfig(base_channels=8, depth=2, time_dim=16, mode="both", prediction="v")


def test_v_output_is_mapped_to_eps():
    s = build_schedule(50, 1e-3, 0.05)
    eps_model, v_model = build_denoiser(TOY, seed=2), build_denoiser(V_TOY, seed=2, s=s)
    gen = torch.Generator().manual_seed(0)
    y, c = torch.randn(3, 1, 16, 16, generator=gen), torch.randn(3, 5, 16, 16, generator=gen)
    t = torch.tensor([1, 20, 50])
    with torch.no_grad():
        raw, out = eps_model(y, c, t), v_model(y, c, t)
    ab = torch.tensor(s.alpha_bar[t.numpy() - 1], dtype=torch.float32).reshape(-1, 1, 1, 1)
    torch.testing.assert_close(out, torch.sqrt(1 - ab) * y + torch.sqrt(ab) * raw)


@given(ab=st.floats(1e-4, 1 - 1e-4), y0=st.floats(-1, 1), eps=st.floats(-4, 4))
def test_true_v_recovers_true_eps(ab, y0, eps):
    y_t = math.sqrt(ab) * y0 + math.sqrt(1 - ab) * eps
    v = math.sqrt(ab) * eps - math.sqrt(1 - ab) * y0
    assert math.sqrt(1 - ab) * y_t + math.sqrt(ab) * v == pytest.approx(eps, abs=1e-12)


def test_v_prediction_needs_schedule():
    with pytest.raises(ValueError):
        build_denoiser(V_TOY, seed=0)
    with pytest.raises(ValueError):
        DenoiserConfig(prediction="x0")


def test_v_bundle_round_trip_keeps_schedule():
    s = NoiseSchedule.from_betas(np.geomspace(1e-3, 0.2, 12))
    res = train_diffusion(_patches(), "both", V_TOY, s, steps=2, seed=0, batch_size=2)
    model = load_denoiser(res.bundle)
    np.testing.assert_array_equal(model.alpha_bar.numpy(), s.alpha_bar)
    y, c = torch.randn(2, 1, 16, 16), torch.randn(2, 5, 16, 16)
    with torch.no_grad():
        a = model(y, c, torch.tensor([1, 12]))
    trained = build_denoiser(V_TOY, seed=0, s=s)
    res.bundle.load_into(trained)
    with torch.no_grad():
        torch.testing.assert_close(a, trained(y, c, torch.tensor([1, 12])), rtol=0, atol=0)


def test_v_denoiser_grad_check():
    torch.manual_seed(0)
    model = build_denoiser(V_TOY, seed=1, s=build_schedule(200, 1e-4, 0.02)).to(torch.float64)
    x = torch.randn(2, 6, 8, 8, dtype=torch.float64)
    assert grad_check(Packed(model, torch.tensor([3, 150])), x, n_samples=12) < 1e-5


# --- losses and sampling ----------------------------------------------------

def test_loss_with_oracle_and_zero_models():
    s = build_schedule(100, 1e-4, 0.02)
    gen = torch.Generator().manual_seed(0)
    y0 = torch.rand(8, 1, 32, 32, generator=gen) * 2 - 1
    eps = torch.randn(8, 1, 32, 32, generator=gen)
    cond = torch.zeros(8, 5, 32, 32)
    t = torch.randint(1, 101, (8,), generator=gen)
    assert diffusion_loss_step(y0, cond, t, eps, lambda y, c, tt: eps, s).item() == 0.0
    zero = diffusion_loss_step(y0, cond, t, eps, lambda y, c, tt: torch.zeros_like(y), s).item()
    assert zero == pytest.approx(1.0, abs=0.05)


def test_loss_gradient_matches_finite_differences():
    s = build_schedule(10, 1e-3, 0.02)
    gen = torch.Generator().manual_seed(0)
    eps = torch.randn(1, 1, 4, 4, generator=gen, dtype=torch.float64)
    y0 = torch.rand(1, 1, 4, 4, generator=gen, dtype=torch.float64)

    def loss_of(pred):
        return diffusion_loss_step(y0, torch.zeros(1, 5, 4, 4, dtype=torch.float64), 4, eps,
                                   lambda y, c, tt: pred, s).reshape(1)

    assert grad_check(loss_of, torch.randn(1, 1, 4, 4, dtype=torch.float64)) < 1e-4


def test_loss_raises_on_non_finite():
    s = build_schedule(10, 1e-3, 0.02)
    y0 = torch.zeros(1, 1, 4, 4)
    with pytest.raises(NonFiniteError):
        diffusion_loss_step(y0, y0, 1, y0, lambda y, c, tt: torch.full_like(y, float("nan")), s)


def test_sample_is_deterministic():
    model = build_denoiser(TOY, seed=0)
    s = build_schedule(5, 1e-2, 0.2)
    cond = torch.randn(2, 5, 8, 8)
    a, b = sample(cond, model, s, seed=7), sample(cond, model, s, seed=7)
    assert torch.equal(a, b) and a.shape == (2, 1, 8, 8)
    assert not torch.equal(a, sample(cond, model, s, seed=8))
    assert a.min() >= -1 and a.max() <= 1


def test_sample_single_step_closed_form():
    s = NoiseSchedule.from_betas([0.3])
    cond = torch.zeros(1, 5, 4, 4)
    out = sample(cond, lambda y, c, t: torch.zeros_like(y), s, seed=11)
    y1 = philox(11).standard_normal((1, 1, 4, 4), dtype=np.float32)
    ref = np.clip(y1 / np.float32(math.sqrt(0.7)), -1, 1)
    np.testing.assert_allclose(out.numpy(), ref, rtol=1e-6)


def test_sample_reports_failing_step():
    s = build_schedule(3, 0.1, 0.2)
    calls = []

    def stub(y, c, t):
        calls.append(int(t[0]))
        return torch.full_like(y, float("inf") if len(calls) == 2 else 0.0)

    with pytest.raises(NonFiniteError, match="t=2"):
        sample(torch.zeros(1, 5, 4, 4), stub, s, seed=0)


# --- training ---------------------------------------------------------------

def _patches(n=4, size=8, with_estimate=True):
    rng = np.random.default_rng(0)
    sat = rng.standard_normal((n, 4, size, size)).astype(np.float32)
    radar = np.tanh(sat[:, :1]).astype(np.float32)
    est = (radar * 0.8).astype(np.float32) if with_estimate else None
    return PatchData(sat, radar, est)


def test_zero_steps_returns_initialization():
    s = build_schedule(20, 1e-3, 0.1)
    res = train_diffusion(_patches(), "both", TOY, s, steps=0, seed=4)
    init = build_denoiser(TOY, seed=4)
    ref = np.concatenate([p.detach().numpy().ravel() for p in init.parameters()])
    assert res.bundle.weights.tobytes() == ref.tobytes() and res.losses == []


def test_estimate_only_mode_trains():
    s = build_schedule(20, 1e-3, 0.1)
    cfg = DenoiserConfig(base_channels=8, depth=2, time_dim=16, mode="estimate")
    res = train_diffusion(_patches(), "estimate", cfg, s, steps=5, seed=0, batch_size=2)
    model = load_denoiser(res.bundle)
    assert model.cfg.condition_channels == 1 and len(res.losses) == 5
    assert all(np.isfinite(res.losses))


def test_training_mode_checks():
    s = build_schedule(20, 1e-3, 0.1)
    with pytest.raises(ConditionError):
        train_diffusion(_patches(with_estimate=False), "both", TOY, s, steps=1, seed=0)
    with pytest.raises(ConditionError):
        train_diffusion(_patches(), "satellite", TOY, s, steps=1, seed=0)


def test_training_is_deterministic():
    s = build_schedule(20, 1e-3, 0.1)
    a = train_diffusion(_patches(), "both", TOY, s, steps=4, seed=3, batch_size=2)
    b = train_diffusion(_patches(), "both", TOY, s, steps=4, seed=3, batch_size=2)
    assert a.losses == b.losses and a.bundle.weights.tobytes() == b.bundle.weights.tobytes()
    assert a.bundle.meta["T"] == 20
