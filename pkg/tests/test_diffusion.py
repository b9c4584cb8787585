import math

import pytest
import torch

from controllab.diffusion import (
    PredictionKind,
    ShapeMismatchError,
    ancestral_sample,
    ddpm_step,
    diffusion_loss,
    loss_weight,
    make_schedule,
    predict_x0,
    q_sample,
    respace,
    schedule_from_alpha_bar,
)


def full(value, shape=(1, 1, 2, 2)):
    return torch.full(shape, value, dtype=torch.float64)


def test_make_schedule_single_step():
    """A single-step schedule has zero posterior variance."""
    sched = make_schedule(1, 0.1, 0.1)
    assert sched.alpha_bar.tolist() == pytest.approx([0.9], rel=1e-12)
    assert sched.posterior_var.tolist() == [0.0]


def test_make_schedule_two_steps_matches_hand_values():
    """Posterior variance follows (1 - ab_prev) / (1 - ab) * beta."""
    sched = make_schedule(2, 0.1, 0.2)
    assert sched.alpha_bar.tolist() == pytest.approx([0.9, 0.72], rel=1e-12)
    assert sched.posterior_var[0] == 0.0
    assert float(sched.posterior_var[1]) == pytest.approx(0.1 / 0.28 * 0.2, rel=1e-12)


def test_make_schedule_default_posterior_var_brute_force():
    """Every posterior variance of the default schedule matches a python-float oracle."""
    sched = make_schedule(1000, 1e-4, 0.02)
    betas = sched.beta.tolist()
    assert betas[0] == 1e-4 and betas[-1] == pytest.approx(0.02, rel=1e-15)
    ab, prev = 1.0, 1.0
    for t, beta in enumerate(betas):
        ab *= 1.0 - beta
        expected = (1.0 - prev) / (1.0 - ab) * beta
        assert float(sched.posterior_var[t]) == pytest.approx(expected, rel=1e-12, abs=1e-300)
        prev = ab
    assert float(sched.alpha_bar[-1]) == pytest.approx(4.0e-5, rel=0.05)


@pytest.mark.parametrize(
    "args",
    [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)],
)
def test_make_schedule_rejects_invalid_arguments(args):
    """T < 1 and beta bounds outside 0 < start <= end < 1 are rejected."""
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_make_schedule_rejects_unknown_kind():
    """Only the linear schedule is available."""
    with pytest.raises(ValueError, match="linear"):
        make_schedule(10, 1e-4, 0.02, kind="cosine")


def test_q_sample_hand_value():
    """alpha_bar = 0.25, x0 = 1, eps = 2 gives 0.5 + sqrt(0.75) * 2."""
    sched = schedule_from_alpha_bar(torch.tensor([0.25]))
    out = q_sample(full(1.0), 1, full(2.0), sched)
    assert torch.allclose(out, full(0.5 + math.sqrt(0.75) * 2.0), rtol=1e-12, atol=0)


def test_q_sample_limits():
    """Near alpha_bar = 1 the output is x0; near alpha_bar = 0 it is eps."""
    sched = schedule_from_alpha_bar(torch.tensor([1.0 - 1e-15, 1e-15]))
    x0, eps = full(0.7), full(-1.3)
    assert torch.allclose(q_sample(x0, 1, eps, sched), x0, atol=1e-7)
    assert torch.allclose(q_sample(x0, 2, eps, sched), eps, atol=1e-7)


def test_q_sample_per_sample_timesteps_match_scalar_calls(tiny_schedule, random_maps):
    """A (b,) timestep tensor applies each sample's own coefficients."""
    x0, eps = random_maps(3, 1, 4, 4).double(), random_maps(3, 1, 4, 4).double()
    t = torch.tensor([1, 25, 50])
    batched = q_sample(x0, t, eps, tiny_schedule)
    for i, step in enumerate(t.tolist()):
        single = q_sample(x0[i : i + 1], step, eps[i : i + 1], tiny_schedule)
        assert torch.allclose(batched[i : i + 1], single, rtol=1e-12, atol=0)


def test_q_sample_errors(tiny_schedule):
    """Shape mismatches and out-of-range timesteps are rejected."""
    with pytest.raises(ShapeMismatchError):
        q_sample(full(0.0), 1, full(0.0, (1, 1, 3, 3)), tiny_schedule)
    with pytest.raises(ValueError, match="out of range"):
        q_sample(full(0.0), 0, full(0.0), tiny_schedule)
    with pytest.raises(ValueError, match="out of range"):
        q_sample(full(0.0), 51, full(0.0), tiny_schedule)


def test_q_sample_follows_the_marginal_variance_law():
    """Over many noise draws x_t has mean sqrt(ab) * x0 and variance 1 - ab."""
    # Arrange
    sched = make_schedule(1000, 1e-4, 0.02)
    generator = torch.Generator().manual_seed(7)
    x0 = full(0.6, (1, 1, 400, 500))

    for t in (1, 250, 700, 1000):
        eps = torch.randn(x0.shape, generator=generator, dtype=torch.float64)

        # Act
        x_t = q_sample(x0, t, eps, sched)

        # Assert
        ab = float(sched.alpha_bar[t - 1])
        assert float(x_t.mean()) == pytest.approx(math.sqrt(ab) * 0.6, abs=0.01)
        assert float(x_t.var()) == pytest.approx(1.0 - ab, rel=0.02)


@pytest.mark.parametrize("T, beta_start, beta_end", [(1000, 1e-4, 0.02), (50, 1e-4, 0.02), (2, 0.1, 0.9)])
def test_posterior_variance_is_bounded_by_beta(T, beta_start, beta_end):
    """0 <= posterior variance <= beta_t at every timestep."""
    sched = make_schedule(T, beta_start, beta_end)
    assert torch.all(sched.posterior_var >= 0.0)
    assert torch.all(sched.posterior_var <= sched.beta)


def test_loss_weight_values():
    """x weight is 1; at alpha_bar = 0.5 eps weighs 1 and v weighs 2."""
    sched = schedule_from_alpha_bar(torch.tensor([0.5, 1e-12]))
    assert loss_weight(1, PredictionKind.X, sched) == 1.0
    assert loss_weight(1, PredictionKind.EPS, sched) == pytest.approx(1.0, rel=1e-12)
    assert loss_weight(1, PredictionKind.V, sched) == pytest.approx(2.0, rel=1e-12)
    assert loss_weight(2, PredictionKind.EPS, sched) == pytest.approx(0.0, abs=1e-11)


def test_v_weight_exceeds_eps_weight_by_one():
    """The v weight exceeds the eps weight by exactly one."""
    sched = make_schedule(1000, 1e-4, 0.02)
    for t in (10, 100, 500, 1000):
        diff = loss_weight(t, "v", sched) - loss_weight(t, "eps", sched)
        assert diff == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("kind", list(PredictionKind))
def test_diffusion_loss_zero_for_exact_model(kind, tiny_schedule, random_maps):
    """A model that returns the exact native target has zero loss."""
    x0, eps = random_maps(2, 1, 4, 4).double(), random_maps(2, 1, 4, 4).double()
    t = 30
    ab = float(tiny_schedule.alpha_bar[t - 1])

    def exact(x_t, step, control):
        if kind is PredictionKind.X:
            return x0
        if kind is PredictionKind.EPS:
            return eps
        return math.sqrt(ab) * eps - math.sqrt(1 - ab) * x0

    loss = diffusion_loss(x0, t, None, exact, kind, tiny_schedule, eps)
    assert float(loss) == pytest.approx(0.0, abs=1e-18)


def test_diffusion_loss_unit_residual(tiny_schedule):
    """A unit x-space residual gives the loss weight itself."""
    x0 = full(0.3)
    loss = diffusion_loss(x0, 7, None, lambda x, t, c: x0 + 1.0, "x", tiny_schedule, full(0.1))
    assert float(loss) == pytest.approx(1.0, rel=1e-12)


def test_diffusion_loss_eps_brute_force():
    """Constant eps model at alpha_bar = 0.5 reduces to the eps-space MSE."""
    sched = schedule_from_alpha_bar(torch.tensor([0.5]))
    x0 = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=torch.float64)
    eps = torch.tensor([[[[0.5, -0.5], [1.0, 0.0]]]], dtype=torch.float64)
    loss = diffusion_loss(x0, 1, None, lambda x, t, c: torch.full_like(x, 0.25), "eps", sched, eps)
    expected = sum((e - 0.25) ** 2 for e in (0.5, -0.5, 1.0, 0.0)) / 4
    assert float(loss) == pytest.approx(expected, rel=1e-12)


def test_predict_x0_round_trips_native_targets(tiny_schedule, random_maps):
    """Each native target converts back to the clean image."""
    x0, eps = random_maps(1, 1, 4, 4).double(), random_maps(1, 1, 4, 4).double()
    t = 20
    ab = float(tiny_schedule.alpha_bar[t - 1])
    x_t = q_sample(x0, t, eps, tiny_schedule)
    v = math.sqrt(ab) * eps - math.sqrt(1 - ab) * x0
    assert torch.allclose(predict_x0(eps, x_t, t, "eps", tiny_schedule), x0, atol=1e-12)
    assert torch.allclose(predict_x0(v, x_t, t, "v", tiny_schedule), x0, atol=1e-12)


def test_ddpm_step_first_step_ignores_noise():
    """At t = 1 the posterior variance is zero, so the result is the mean."""
    sched = make_schedule(10, 1e-4, 0.02)
    x_t, x0_hat = full(0.4), full(-0.2)
    a = ddpm_step(x_t, 1, x0_hat, full(5.0), sched)
    b = ddpm_step(x_t, 1, x0_hat, full(-5.0), sched)
    assert torch.equal(a, b)
    assert torch.allclose(a, x0_hat, atol=1e-12)


def test_ddpm_step_two_step_oracle():
    """A two-step schedule matches the hand-derived posterior mean."""
    sched = make_schedule(2, 0.1, 0.2)
    x_t, x0_hat, noise = 0.3, -0.5, 1.0
    mean = math.sqrt(0.9) * 0.2 / 0.28 * x0_hat + math.sqrt(0.8) * 0.1 / 0.28 * x_t
    expected = mean + math.sqrt(0.1 / 0.28 * 0.2) * noise
    out = ddpm_step(full(x_t), 2, full(x0_hat), full(noise), sched)
    assert torch.allclose(out, full(expected), rtol=1e-12, atol=0)


def test_ddpm_step_fixed_point():
    """When alpha_bar barely moves and x0_hat = x_t, the step returns x_t."""
    sched = schedule_from_alpha_bar(torch.tensor([1.0 - 1e-12, 1.0 - 2e-12]))
    x = full(0.6)
    assert torch.allclose(ddpm_step(x, 2, x, full(0.0), sched), x, atol=1e-6)


def test_respace_endpoints_and_coefficients():
    """Respacing keeps T and recomputes beta from alpha_bar."""
    sched = make_schedule(1000, 1e-4, 0.02)
    sub, timesteps = respace(sched, 20)
    assert len(timesteps) == 20
    assert timesteps[0] == 1 and timesteps[-1] == 1000
    assert all(a < b for a, b in zip(timesteps, timesteps[1:]))
    for k, t in enumerate(timesteps):
        assert float(sub.alpha_bar[k]) == float(sched.alpha_bar[t - 1])


def test_respace_single_step_and_errors():
    """One-step respacing works; zero or too many steps do not."""
    sched = make_schedule(50, 1e-4, 0.02)
    assert respace(sched, 1)[1] == [50]
    with pytest.raises(ValueError):
        respace(sched, 0)
    with pytest.raises(ValueError):
        respace(sched, 51)


def test_ancestral_sample_is_reproducible(tiny_schedule):
    """Same generator seed gives identical samples; all draws come from it."""
    sub, timesteps = respace(tiny_schedule, 5)
    model = lambda x, t, c: torch.zeros_like(x)  # noqa: E731
    a = ancestral_sample(model, (2, 1, 4, 4), sub, timesteps, "eps", torch.Generator().manual_seed(3))
    b = ancestral_sample(model, (2, 1, 4, 4), sub, timesteps, "eps", torch.Generator().manual_seed(3))
    assert a.shape == (2, 1, 4, 4)
    assert torch.equal(a, b)


def test_ancestral_sample_queries_model_with_original_timesteps(tiny_schedule, mocker):
    """The sampler queries the model with the original timesteps."""
    sub, timesteps = respace(tiny_schedule, 4)
    model = mocker.MagicMock(side_effect=lambda x, t, c: torch.zeros_like(x))
    ancestral_sample(model, (1, 1, 2, 2), sub, timesteps, "eps", torch.Generator().manual_seed(0))
    called = [call.args[1] for call in model.call_args_list]
    assert called == list(reversed(timesteps))


def test_ancestral_sample_rejects_mismatched_timesteps(tiny_schedule):
    """Timesteps must match the schedule length."""
    with pytest.raises(ValueError, match="model timesteps"):
        ancestral_sample(
            lambda x, t, c: x, (1, 1, 2, 2), tiny_schedule, [1, 2], "x", torch.Generator()
        )
