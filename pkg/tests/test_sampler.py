import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from posegen.dit import DiT
from posegen.errors import ConfigError, UsageError
from posegen.numerics import Rng
from posegen.sampler import (
    FrameMask,
    SamplerConfig,
    build_frame_mask,
    noise,
    retention_mask,
    sample,
    unpack_frame_mask,
)

from conftest import random_bundle, tiny_config


def test_schedule():
    assert SamplerConfig(T=4).schedule() == [1.0, 0.75, 0.5, 0.25, 0.0]
    with pytest.raises(ConfigError):
        SamplerConfig(T=0)


def test_noise_endpoints_and_velocity():
    x0, eps = Rng(0).normal(3, 4), Rng(1).normal(3, 4)
    assert torch.equal(noise(x0, eps, 0.0), x0)
    assert torch.equal(noise(x0, eps, 1.0), eps)
    # d/dt x_t = eps - x0
    assert torch.allclose((noise(x0, eps, 0.6) - noise(x0, eps, 0.4)) / 0.2, eps - x0, atol=1e-5)


def test_euler_with_exact_velocity_recovers_x0():
    x0, eps = Rng(2).normal(8, 2, 2, 2), Rng(0).normal(8, 2, 2, 2)

    class Oracle:
        cfg = tiny_config()

        def __call__(self, bundle, t, ctrl=None):
            return eps - x0

    b = random_bundle(tiny_config(), 2, 2, 2)
    out = sample(Oracle(), b, SamplerConfig(T=5, seed=0))
    assert torch.allclose(out, x0, atol=1e-5)


@given(k=st.integers(0, 6), data=st.data())
def test_frame_mask_pack_unpack_roundtrip(k, data):
    F = 4 * k + 1
    flags = data.draw(st.lists(st.integers(0, 1), min_size=F, max_size=F))
    fm = FrameMask(flags, 4)
    assert unpack_frame_mask(fm.latent_mask(2, 3)) == flags
    assert fm.latent_slots().shape == (4, k + 1)


def test_latent_frame_zero_repeats_pixel_frame_zero():
    slots = FrameMask([1, 0, 0, 0, 0], 4).latent_slots()
    assert torch.equal(slots[:, 0], torch.ones(4)) and torch.equal(slots[:, 1], torch.zeros(4))


def test_frame_mask_validation():
    with pytest.raises(ConfigError):
        FrameMask([0] * 16, 4)
    with pytest.raises(ValueError):
        FrameMask([0, 2, 0, 0, 0], 4)


def test_build_frame_mask():
    assert build_frame_mask("base", 17, 4).pixel_flags == [0] * 17
    m = build_frame_mask("stitch", 17, 4, 0.25)
    assert m.pixel_flags == [1] * 4 + [0] * 9 + [1] * 4
    with pytest.raises(ConfigError):
        build_frame_mask("stitch", 1, 4)
    with pytest.raises(ConfigError):
        build_frame_mask("middle", 17, 4)


def test_retention_mask_pinned_frames():
    m = retention_mask(17, 4, 4, tail=5)
    assert m.pixel_flags == [1] * 4 + [0] * 8 + [1] * 5
    # latent 0 = frame 0, latent 1 = frames 1..4 (frame 4 generated), latent 3 = 9..12, latent 4 = 13..16
    assert m.pinned_latent_frames() == [0, 4]


def test_stitch_sampling_needs_preserved_latents():
    cfg = tiny_config()
    with pytest.raises(UsageError):
        sample(DiT(cfg), random_bundle(cfg, 2, 4, 4), SamplerConfig(T=2), mask=retention_mask(5, 1, 4))


def test_pinned_latents_are_exact_at_the_end():
    cfg = tiny_config()
    model = DiT(cfg)
    b = random_bundle(cfg, 3, 4, 4)
    preserved = Rng(11).normal(*b.z_vid.shape)
    mask = retention_mask(9, 1, 4, tail=4)
    out = sample(model, b, SamplerConfig(T=3, seed=4), mask=mask, preserved=preserved)
    assert mask.pinned_latent_frames() == [0, 2]
    assert torch.equal(out[:, [0, 2]], preserved[:, [0, 2]])
    assert not torch.equal(out[:, 1], preserved[:, 1])


def test_mask_latent_count_must_match_bundle():
    cfg = tiny_config()
    with pytest.raises(ConfigError):
        sample(DiT(cfg), random_bundle(cfg, 2, 4, 4), SamplerConfig(T=2), mask=FrameMask([0] * 9, 4))


def test_sampling_is_seed_deterministic():
    cfg = tiny_config()
    model = DiT(cfg)
    b = random_bundle(cfg)
    assert torch.equal(sample(model, b, SamplerConfig(3, 5)), sample(model, b, SamplerConfig(3, 5)))
    assert not torch.equal(sample(model, b, SamplerConfig(3, 5)), sample(model, b, SamplerConfig(3, 6)))
