"""Mask-conditioned modulation identities, adversarial training mechanics,
and deterministic generation."""

import numpy as np
import pytest
import torch

from histobalance.checkpoints import load_checkpoint, save_checkpoint
from histobalance.errors import ValidationError
from histobalance.gan import (
    SPADE,
    GanConfig,
    StyleVector,
    gan_generate,
    load_generator,
    spade_modulation,
    train_gan,
)
from histobalance.patches import extract_patches
from histobalance.phantom import generate_phantom_slide


@pytest.fixture(scope="module")
def corpus():
    image, mask, instances, doc = generate_phantom_slide(seed=41, size=128, n_instances=12)
    return extract_patches(image, mask, instances, 64, 64, slide_id=doc.slide_id)


@pytest.fixture(scope="module")
def small_config():
    return GanConfig(base_channels=8, style_dim=8, steps=3, batch_size=4, learning_rate=1e-4)


@pytest.fixture(scope="module")
def trained_payload(corpus, small_config):
    payload, _ = train_gan(corpus, small_config, seed=19)
    return payload


def onehot(codes: np.ndarray) -> torch.Tensor:
    out = torch.zeros(6, *codes.shape)
    for c in range(6):
        out[c][codes == c] = 1.0
    return out


def zero_heads(spade: SPADE):
    for head in (spade.gamma_head, spade.beta_head):
        torch.nn.init.zeros_(head.weight)
        torch.nn.init.zeros_(head.bias)


# ---------------------------------------------------------------- modulation


def test_identity_modulation_returns_normalized_activations():
    torch.manual_seed(0)
    spade = SPADE(channels=5)
    zero_heads(spade)
    x = torch.randn(5, 9, 9)
    mask = onehot(np.random.default_rng(0).integers(0, 6, (9, 9)))
    out = spade_modulation(x, mask, spade)
    mean = x.mean(dim=(1, 2), keepdim=True)
    var = x.var(dim=(1, 2), unbiased=False, keepdim=True)
    expected = (x - mean) / torch.sqrt(var + 1e-5)
    assert torch.allclose(out, expected, atol=1e-6)


def test_constant_channels_map_to_beta_exactly():
    torch.manual_seed(1)
    spade = SPADE(channels=3)
    # exactly representable constants on an 8x8 grid keep the mean exact
    x = torch.ones(3, 8, 8) * torch.tensor([0.5, -2.0, 8.0])[:, None, None]
    mask = onehot(np.random.default_rng(1).integers(0, 6, (8, 8)))
    out = spade_modulation(x, mask, spade)
    with torch.no_grad():
        _, beta = spade.maps(mask.unsqueeze(0))
    assert torch.equal(out, beta[0])


def test_modulation_statistics_are_per_channel():
    torch.manual_seed(2)
    spade = SPADE(channels=2)
    zero_heads(spade)
    # one flat channel, one spread channel: each normalizes independently
    x = torch.stack([torch.full((6, 6), 4.0), torch.linspace(-1, 1, 36).reshape(6, 6)])
    mask = onehot(np.zeros((6, 6), dtype=int))
    out = spade_modulation(x, mask, spade)
    assert torch.allclose(out[0], torch.zeros(6, 6), atol=1e-6)
    assert float(out[1].mean()) == pytest.approx(0.0, abs=1e-6)
    assert float(out[1].var(unbiased=False)) == pytest.approx(1.0, abs=1e-2)


def test_modulation_receptive_field_bounds_mask_influence():
    torch.manual_seed(3)
    spade = SPADE(channels=4)  # 3x3 shared + 3x3 heads -> radius 2
    x = torch.randn(4, 16, 16)
    codes = np.zeros((16, 16), dtype=int)
    changed = codes.copy()
    changed[8, 8] = 3
    out_a = spade_modulation(x, onehot(codes), spade)
    out_b = spade_modulation(x, onehot(changed), spade)
    diff = (out_a - out_b).abs().sum(dim=0).numpy()
    affected = np.argwhere(diff > 0)
    assert len(affected) > 0
    assert np.abs(affected - np.array([8, 8])).max() <= spade.field_radius


def test_modulation_rejects_bad_inputs():
    spade = SPADE(channels=2)
    x = torch.randn(2, 8, 8)
    good = onehot(np.zeros((8, 8), dtype=int))
    with pytest.raises(ValidationError):
        spade_modulation(torch.randn(2, 8, 4), good, spade)
    with pytest.raises(ValidationError):
        spade_modulation(x, good * 0.5, spade)  # not one-hot
    bad = x.clone()
    bad[0, 0, 0] = float("nan")
    with pytest.raises(ValidationError):
        spade_modulation(bad, good, spade)


def test_pointwise_modulation_is_permutation_equivariant():
    torch.manual_seed(4)
    spade = SPADE(channels=3, kernel_size=1)
    x = torch.randn(3, 5, 7)
    codes = np.random.default_rng(4).integers(0, 6, (5, 7))
    mask = onehot(codes)
    out = spade_modulation(x, mask, spade)

    rng = np.random.default_rng(5)
    perm = rng.permutation(35)
    x_p = x.reshape(3, -1)[:, perm].reshape(3, 5, 7)
    mask_p = mask.reshape(6, -1)[:, perm].reshape(6, 5, 7)
    out_p = spade_modulation(x_p, mask_p, spade)
    assert torch.allclose(out_p, out.reshape(3, -1)[:, perm].reshape(3, 5, 7), atol=1e-6)


# ---------------------------------------------------------------- config


def test_config_rejects_bad_image_sizes():
    for size in (8, 24, 48, 20):
        with pytest.raises(ValidationError):
            GanConfig(image_size=size)
    GanConfig(image_size=16)
    GanConfig(image_size=128)


def test_config_rejects_bad_weights_and_lr():
    with pytest.raises(ValidationError):
        GanConfig(loss_weights={"adversarial": 1.0})
    with pytest.raises(ValidationError):
        GanConfig(loss_weights={"adversarial": 1.0, "feature_matching": -1.0, "kl": 0.1})
    with pytest.raises(ValidationError):
        GanConfig(learning_rate=0.0)


# ---------------------------------------------------------------- training


def test_zero_steps_checkpoint_reproducible(corpus, small_config):
    config = GanConfig(**{**small_config.__dict__, "steps": 0})
    p1, h1 = train_gan(corpus, config, seed=7)
    p2, _ = train_gan(corpus, config, seed=7)
    assert h1 == {"d_loss": [], "g_loss": [], "adversarial": [], "feature_matching": [], "kl": []}
    for module in ("generator", "style_encoder", "discriminator"):
        for key, value in p1["modules"][module].items():
            assert torch.equal(value, p2["modules"][module][key])


def test_training_is_deterministic(corpus, small_config):
    p1, h1 = train_gan(corpus, small_config, seed=23)
    p2, h2 = train_gan(corpus, small_config, seed=23)
    assert h1 == h2
    for key, value in p1["modules"]["generator"].items():
        assert torch.equal(value, p2["modules"]["generator"][key])


def test_all_loss_terms_finite(trained_payload, corpus, small_config):
    _, history = train_gan(corpus, small_config, seed=29)
    for series in history.values():
        assert len(series) == small_config.steps
        assert all(np.isfinite(v) for v in series)


def _payloads_equal(a, b) -> bool:
    if isinstance(a, dict):
        return isinstance(b, dict) and a.keys() == b.keys() and all(_payloads_equal(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_payloads_equal(x, y) for x, y in zip(a, b))
    if torch.is_tensor(a):
        return torch.is_tensor(b) and a.dtype == b.dtype and torch.equal(a, b)
    return a == b


def test_resume_zero_steps_is_identity(corpus, small_config, trained_payload):
    config = GanConfig(**{**small_config.__dict__, "steps": 0})
    resumed, history = train_gan(corpus, config, seed=19, resume=trained_payload)
    assert history["g_loss"] == []
    assert resumed["step"] == trained_payload["step"]
    assert _payloads_equal(
        {k: v for k, v in trained_payload.items() if k != "config"},
        {k: v for k, v in resumed.items() if k != "config"},
    )


def test_resume_continues_step_count(corpus, small_config, trained_payload):
    resumed, _ = train_gan(corpus, small_config, seed=19, resume=trained_payload)
    assert resumed["step"] == 2 * small_config.steps


def test_resume_rejects_wrong_kind(corpus, small_config):
    with pytest.raises(ValidationError):
        train_gan(corpus, small_config, seed=1, resume={"kind": "ldm"})


def test_empty_training_set_rejected(small_config):
    with pytest.raises(ValidationError):
        train_gan([], small_config, seed=1)


def test_checkpoint_round_trip(tmp_path, trained_payload):
    path = tmp_path / "gan.pt"
    save_checkpoint(path, trained_payload)
    loaded = load_checkpoint(path, expect_kind="gan")
    gen_a, _ = load_generator(trained_payload)
    gen_b, _ = load_generator(loaded)
    for pa, pb in zip(gen_a.parameters(), gen_b.parameters()):
        assert torch.equal(pa, pb)


# ---------------------------------------------------------------- generation


def test_generation_is_deterministic(trained_payload):
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[10:50, 10:50] = 2
    a = gan_generate(trained_payload, mask, 31)
    b = gan_generate(trained_payload, mask, 31)
    assert np.array_equal(a, b)
    assert a.shape == (64, 64, 3) and a.dtype == np.uint8


def test_different_styles_differ(trained_payload):
    mask = np.full((64, 64), 3, dtype=np.uint8)
    a = gan_generate(trained_payload, mask, 1)
    b = gan_generate(trained_payload, mask, 2)
    assert np.abs(a.astype(int) - b.astype(int)).mean() > 0


def test_explicit_style_vector(trained_payload):
    mask = np.zeros((64, 64), dtype=np.uint8)
    style = StyleVector(np.linspace(-1, 1, 8))
    a = gan_generate(trained_payload, mask, style)
    b = gan_generate(trained_payload, mask, StyleVector(np.linspace(-1, 1, 8)))
    assert np.array_equal(a, b)


def test_generate_rejects_wrong_mask_size(trained_payload):
    with pytest.raises(ValidationError):
        gan_generate(trained_payload, np.zeros((32, 32), dtype=np.uint8), 0)


def test_generate_rejects_wrong_style_length(trained_payload):
    with pytest.raises(ValidationError):
        gan_generate(trained_payload, np.zeros((64, 64), dtype=np.uint8), StyleVector(np.zeros(5)))


def test_load_generator_rejects_wrong_kind():
    with pytest.raises(ValidationError):
        load_generator({"kind": "autoencoder"})


def test_style_vector_validation():
    with pytest.raises(ValidationError):
        StyleVector(np.array([1.0, float("inf")]))
    with pytest.raises(ValidationError):
        StyleVector(np.zeros((2, 2)))
