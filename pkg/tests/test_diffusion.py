import numpy as np
import pytest
import torch
import torch.nn as nn

from hardgen.conditioning import PromptEmbedder, Vocabulary, create_difficulty_encoder
from hardgen.dataset import DifficultySample, LabeledImage
from hardgen.diffusion import (
    NoiseSchedule,
    TrainConfig,
    diffusion_loss,
    finetune_with_difficulty,
    forward_noise,
    predict_noise,
    pretrain_base,
)
from hardgen.errors import ConfigError, InvariantViolation
from hardgen.lora import create_adapters
from hardgen.unet import create_unet, parameter_checksum


def test_schedule_invariants():
    schedule = NoiseSchedule.linear(1000)
    assert schedule.T == 1000
    assert np.all(schedule.beta > 0) and np.all(schedule.beta < 1)
    assert np.all(np.diff(schedule.alpha_bar) < 0)
    assert schedule.alpha_bar[0] < 1.0
    snr = schedule.alpha_bar / (1.0 - schedule.alpha_bar)
    assert np.all(np.diff(snr) < 0)
    assert schedule.alpha_bar_at(0) == 1.0
    assert schedule.alpha_bar_at(1000) == schedule.alpha_bar[-1]


def test_schedule_validation():
    with pytest.raises(ValueError, match="beta"):
        NoiseSchedule(np.array([0.0, 0.1]))
    with pytest.raises(ValueError, match="beta"):
        NoiseSchedule(np.array([0.5, 1.0]))
    with pytest.raises(ValueError, match="timesteps"):
        NoiseSchedule.linear(0)


def test_forward_noise_endpoints():
    z0 = torch.randn(2, 1, 4, 4)
    eps = torch.randn(2, 1, 4, 4)
    nearly_clean = NoiseSchedule(np.array([1e-12]))
    assert torch.allclose(forward_noise(z0, 1, eps, nearly_clean), z0, atol=1e-5)
    nearly_noise = NoiseSchedule(np.full(40, 0.5))  # alpha_bar ~ 9e-13
    out = forward_noise(z0, 40, eps, nearly_noise)
    assert torch.allclose(out, eps, atol=1e-5)


def test_forward_noise_range_checks():
    schedule = NoiseSchedule.linear(10)
    z0 = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ValueError, match="t must be"):
        forward_noise(z0, 0, torch.zeros_like(z0), schedule)
    with pytest.raises(ValueError, match="t must be"):
        forward_noise(z0, 11, torch.zeros_like(z0), schedule)
    with pytest.raises(ValueError, match="shape"):
        forward_noise(z0, 1, torch.zeros(1, 1, 2, 3), schedule)


def test_forward_noise_monte_carlo_moments(rng):
    schedule = NoiseSchedule.linear(100)
    t = 50
    abar = schedule.alpha_bar_at(t)
    z0 = torch.full((1, 1, 2, 2), 0.7)
    draws = 20000
    eps = torch.from_numpy(rng.standard_normal((draws, 1, 2, 2))).float()
    zt = forward_noise(z0.expand(draws, -1, -1, -1), torch.full((draws,), t), eps, schedule)
    mean = zt.mean().item()
    var = zt.var().item()
    se = np.sqrt((1 - abar) / (draws * 4))
    assert abs(mean - np.sqrt(abar) * 0.7) < 3 * se
    assert abs(var - (1 - abar)) / (1 - abar) < 0.05


class _StubDenoiser(nn.Module):
    """Returns a fixed tensor (plus an offset), ignoring all inputs."""

    def __init__(self, output: torch.Tensor, offset: float = 0.0, cond_dim: int = 4):
        super().__init__()
        self.register_buffer("output", output)
        self.offset = offset
        self.cond_dim = cond_dim
        self.calls = 0

    def forward(self, z, t, cond, adapters=None):
        self.calls += 1
        return self.output[: z.shape[0]] + self.offset


def _fixed_draws(rng, batch_shape, timesteps):
    t = rng.integers(1, timesteps + 1, size=batch_shape[0])
    eps = rng.standard_normal(batch_shape)
    drop = np.zeros(batch_shape[0], dtype=bool)
    return t, eps, drop


def test_loss_zero_when_denoiser_returns_noise(rng):
    schedule = NoiseSchedule.linear(20)
    z0 = torch.randn(3, 1, 4, 4)
    draws = _fixed_draws(rng, tuple(z0.shape), schedule.T)
    stub = _StubDenoiser(torch.from_numpy(draws[1]).float())
    conds = [torch.zeros(2, 4)] * 3
    loss = diffusion_loss(z0, conds, stub, schedule, draws=draws)
    assert loss.item() == 0.0


def test_loss_one_when_denoiser_off_by_one(rng):
    schedule = NoiseSchedule.linear(20)
    z0 = torch.randn(3, 1, 4, 4)
    draws = _fixed_draws(rng, tuple(z0.shape), schedule.T)
    stub = _StubDenoiser(torch.from_numpy(draws[1]).float(), offset=1.0)
    conds = [torch.zeros(2, 4)] * 3
    loss = diffusion_loss(z0, conds, stub, schedule, draws=draws)
    assert abs(loss.item() - 1.0) < 1e-6


def test_loss_matches_straight_line_recomputation(rng):
    # double precision, tiny real model, explicit recomputation of every term
    schedule = NoiseSchedule.linear(50)
    model = create_unet(image_size=8, channels=1, cond_dim=4, widths=(4, 4, 4), time_dim=8, seed=3).double()
    z0 = torch.from_numpy(rng.standard_normal((2, 1, 8, 8)))
    conds = [torch.from_numpy(rng.standard_normal((3, 4))) for _ in range(2)]
    draws = _fixed_draws(rng, tuple(z0.shape), schedule.T)
    loss = diffusion_loss(z0, conds, model, schedule, draws=draws)

    t_np, eps_np, _ = draws
    total = 0.0
    with torch.no_grad():
        for i in range(2):
            abar = schedule.alpha_bar[t_np[i] - 1]
            z_t = np.sqrt(abar) * z0[i].numpy() + np.sqrt(1 - abar) * eps_np[i]
            eps_hat = model(
                torch.from_numpy(z_t)[None],
                torch.tensor([float(t_np[i])], dtype=torch.float64),
                conds[i][None],
            )[0].numpy()
            total += float(np.mean((eps_np[i] - eps_hat) ** 2))
    expected = total / 2
    assert abs(loss.item() - expected) <= 1e-8 * max(abs(expected), 1e-12)


def test_loss_invariant_to_batch_order(rng):
    schedule = NoiseSchedule.linear(50)
    model = create_unet(image_size=8, channels=1, cond_dim=4, widths=(4, 4, 4), time_dim=8, seed=3).double()
    z0 = torch.from_numpy(rng.standard_normal((4, 1, 8, 8)))
    conds = [torch.from_numpy(rng.standard_normal((3, 4))) for _ in range(4)]
    t, eps, drop = _fixed_draws(rng, tuple(z0.shape), schedule.T)
    loss = diffusion_loss(z0, conds, model, schedule, draws=(t, eps, drop))
    perm = [2, 0, 3, 1]
    loss_perm = diffusion_loss(
        z0[perm], [conds[i] for i in perm], model, schedule,
        draws=(t[perm], eps[perm], drop[perm]),
    )
    assert abs(loss.item() - loss_perm.item()) < 1e-12


def test_loss_condition_dropout_uses_null_rows(rng):
    schedule = NoiseSchedule.linear(50)
    model = create_unet(image_size=8, channels=1, cond_dim=4, widths=(4, 4, 4), time_dim=8, seed=3)
    z0 = torch.from_numpy(rng.standard_normal((2, 1, 8, 8))).float()
    conds = [torch.from_numpy(rng.standard_normal((3, 4))).float() for _ in range(2)]
    t, eps, _ = _fixed_draws(rng, tuple(z0.shape), schedule.T)
    dropped = diffusion_loss(z0, conds, model, schedule, draws=(t, eps, np.array([True, True])))
    explicit_null = [torch.zeros(1, 4)] * 2
    reference = diffusion_loss(z0, explicit_null, model, schedule, draws=(t, eps, np.array([False, False])))
    assert dropped.item() == reference.item()


def test_loss_argument_validation(rng):
    schedule = NoiseSchedule.linear(10)
    model = create_unet(image_size=8, channels=1, cond_dim=4, widths=(4, 4, 4), time_dim=8)
    z0 = torch.zeros(2, 1, 8, 8)
    with pytest.raises(ValueError, match="non-empty"):
        diffusion_loss(torch.zeros(0, 1, 8, 8), [], model, schedule, rng=rng)
    with pytest.raises(ValueError, match="conditions"):
        diffusion_loss(z0, [torch.zeros(1, 4)], model, schedule, rng=rng)
    with pytest.raises(ValueError, match="rng or draws"):
        diffusion_loss(z0, [torch.zeros(1, 4)] * 2, model, schedule)


def _tiny_annotated(rng, n_per_class=4, size=8, k=2):
    samples = []
    for label in range(k):
        for i in range(n_per_class):
            pixels = rng.uniform(0, 1, (size, size, 1)).astype(np.float32)
            img = LabeledImage(pixels=pixels, label=label, id=f"t{label}-{i}")
            samples.append(DifficultySample(image=img, difficulty=float(rng.uniform()), prompt=(1, 2, 3 + label)))
    return samples


@pytest.fixture(scope="module")
def tiny_embedder():
    vocab = Vocabulary.build(["circle", "square"])
    return PromptEmbedder.create(vocab, dim=8, max_len=6, seed=0)


def test_pretrain_deterministic_and_loss_recorded(rng, tiny_embedder):
    samples = _tiny_annotated(rng)
    schedule = NoiseSchedule.linear(20)
    cfg = TrainConfig(steps=6, batch_size=4, seed=5)
    arch = {"widths": (4, 4, 4), "time_dim": 8, "cond_dim": 8}
    prompts = [[1, 2, 3], [1, 2, 4]]
    model_a, report_a = pretrain_base(samples, prompts, tiny_embedder, schedule, cfg, arch)
    model_b, report_b = pretrain_base(samples, prompts, tiny_embedder, schedule, cfg, arch)
    assert len(report_a.loss_curve) == 6
    assert report_a.loss_curve == report_b.loss_curve
    for (name, pa), (_, pb) in zip(model_a.state_dict().items(), model_b.state_dict().items()):
        assert torch.equal(pa, pb), name


def test_pretrain_validation(tiny_embedder, rng):
    schedule = NoiseSchedule.linear(20)
    with pytest.raises(ValueError, match="non-empty"):
        pretrain_base([], [[1]], tiny_embedder, schedule, TrainConfig(steps=1))
    with pytest.raises(ConfigError, match="learning_rate"):
        TrainConfig(steps=1, learning_rate=0.0).validate()
    with pytest.raises(ConfigError, match="p_uncond"):
        TrainConfig(steps=1, p_uncond=1.0).validate()
    with pytest.raises(ConfigError, match="optimizer"):
        TrainConfig(steps=1, optimizer="sgd").validate()


def test_finetune_freezes_base_and_trains_rest(rng, tiny_embedder):
    samples = _tiny_annotated(rng)
    schedule = NoiseSchedule.linear(20)
    model = create_unet(image_size=8, channels=1, cond_dim=8, widths=(4, 4, 4), time_dim=8, seed=1)
    base_before = parameter_checksum(model)
    adapters = create_adapters(model, rank=2, seed=2)
    encoder = create_difficulty_encoder(num_classes=2, heads=3, dim=8, seed=3)
    encoder_before = parameter_checksum(encoder)
    adapters_before = parameter_checksum(adapters)
    adapters, encoder, report = finetune_with_difficulty(
        samples, model, adapters, encoder, tiny_embedder, schedule,
        TrainConfig(steps=8, batch_size=4, learning_rate=1e-2, seed=4),
    )
    assert parameter_checksum(model) == base_before
    assert parameter_checksum(encoder) != encoder_before
    assert parameter_checksum(adapters) != adapters_before
    assert len(report.loss_curve) == 8


def test_finetune_detects_base_mutation(rng, tiny_embedder, monkeypatch):
    samples = _tiny_annotated(rng)
    schedule = NoiseSchedule.linear(20)
    model = create_unet(image_size=8, channels=1, cond_dim=8, widths=(4, 4, 4), time_dim=8, seed=1)
    adapters = create_adapters(model, rank=2, seed=2)
    encoder = create_difficulty_encoder(num_classes=2, heads=3, dim=8, seed=3)

    original_loss = diffusion_loss

    def corrupting_loss(*args, **kwargs):
        with torch.no_grad():
            model.stem.weight.add_(1.0)
        return original_loss(*args, **kwargs)

    monkeypatch.setattr("hardgen.diffusion.diffusion_loss", corrupting_loss)
    with pytest.raises(InvariantViolation, match="base"):
        finetune_with_difficulty(
            samples, model, adapters, encoder, tiny_embedder, schedule,
            TrainConfig(steps=1, batch_size=4, seed=4),
        )


def test_finetune_width_mismatch_rejected(rng, tiny_embedder):
    samples = _tiny_annotated(rng)
    schedule = NoiseSchedule.linear(20)
    model = create_unet(image_size=8, channels=1, cond_dim=8, widths=(4, 4, 4), time_dim=8, seed=1)
    adapters = create_adapters(model, rank=2, seed=2)
    encoder = create_difficulty_encoder(num_classes=2, heads=3, dim=16, seed=3)
    with pytest.raises(ConfigError, match="width"):
        finetune_with_difficulty(
            samples, model, adapters, encoder, tiny_embedder, schedule, TrainConfig(steps=1)
        )


def test_predict_noise_shape_and_adapter_identity(rng):
    model = create_unet(image_size=8, channels=1, cond_dim=4, widths=(4, 4, 4), time_dim=8, seed=7)
    adapters = create_adapters(model, rank=2, seed=8)
    adapters.set_scale(0.0)
    with torch.no_grad():
        for _, a in adapters:
            a.B.normal_()
    z = torch.from_numpy(rng.standard_normal((2, 1, 8, 8))).float()
    cond = torch.from_numpy(rng.standard_normal((2, 5, 4))).float()
    with torch.inference_mode():
        base_out = predict_noise(z, 3, cond, model, None)
        adapted_out = predict_noise(z, 3, cond, model, adapters)
    assert base_out.shape == z.shape
    assert torch.equal(base_out, adapted_out)  # scale-0 adapters bypass exactly


def test_predict_noise_width_mismatch():
    model = create_unet(image_size=8, channels=1, cond_dim=4, widths=(4, 4, 4), time_dim=8)
    with pytest.raises(ValueError, match="width"):
        predict_noise(torch.zeros(1, 1, 8, 8), 1, torch.zeros(1, 2, 8), model)


def test_predict_noise_invariant_to_permuting_identical_rows(rng):
    model = create_unet(image_size=8, channels=1, cond_dim=4, widths=(4, 4, 4), time_dim=8, seed=9)
    z = torch.from_numpy(rng.standard_normal((1, 1, 8, 8))).float()
    row = torch.from_numpy(rng.standard_normal((1, 4))).float()
    cond = row.repeat(6, 1)[None]
    with torch.inference_mode():
        out_a = predict_noise(z, 2, cond, model)
        out_b = predict_noise(z, 2, cond.flip(1), model)  # permute identical rows
    assert torch.equal(out_a, out_b)
