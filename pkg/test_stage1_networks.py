import numpy as np
import pytest
import torch
import torch.nn.functional as F

from config import Stage1NetworkSettings
from conftest import GRADCHECK_SEEDS, params_gradcheck
from errors import ValidationError
from media import MfccWindow
from stage1_networks import (
    SPADE,
    FrameDiscriminator,
    LandmarkHead,
    SpadeGenerator,
    SpeechEncoder,
    Stage1Generator,
    SyncDiscriminator,
    TemporalDiscriminator,
    build_stage1_networks,
    encode_speech,
    frame_discriminate,
    generate_frame,
    spade_normalize,
    standardize,
    sync_embed,
    temporal_discriminate,
)


def _tiny_settings(**overrides):
    values = dict(
        resolution=16, base_channels=4, spade_hidden=4, encoder_hidden=4, embedding_dim=8,
        disc_channels=4, disc_layers=2, temporal_window=4, sync_resolution=16, sync_channels=4,
        sync_dim=8, landmark_channels=2,
    )
    values.update(overrides)
    return Stage1NetworkSettings(**values)


def _zero_spade(channels):
    spade = SPADE(channels, hidden=4)
    for conv in (spade.mlp_gamma, spade.mlp_beta):
        torch.nn.init.zeros_(conv.weight)
        torch.nn.init.zeros_(conv.bias)
    return spade


# --- speech encoder ---

def test_silent_window_gives_finite_embedding():
    encoder = SpeechEncoder(embedding_dim=256).eval()
    window = MfccWindow(np.zeros((21, 13), dtype=np.float32), center_frame_index=3)
    emb = encode_speech(window, encoder)
    assert emb.vector.shape == (1, 256)
    assert emb.source_window_index == 3
    assert torch.isfinite(emb.vector).all()


def test_encoder_is_deterministic_in_eval_mode():
    encoder = SpeechEncoder().eval()
    window = np.random.default_rng(0).normal(size=(21, 13)).astype(np.float32)
    assert torch.equal(encode_speech(window, encoder).vector, encode_speech(window, encoder).vector)


def test_encoder_rejects_wrong_coefficient_count():
    with pytest.raises(ValidationError):
        SpeechEncoder()(torch.zeros(1, 21, 20))


# --- SPADE ---

def test_zero_modulation_equals_standardization():
    torch.manual_seed(0)
    x = torch.randn(2, 6, 8, 8)
    out = spade_normalize(x, torch.rand(2, 3, 64, 64), _zero_spade(6))
    assert (out - standardize(x)).abs().max() < 1e-6


def test_constant_channel_standardizes_to_beta():
    spade = _zero_spade(2)
    torch.nn.init.constant_(spade.mlp_beta.bias, 0.25)
    x = torch.ones(1, 2, 4, 4)
    out = spade(x, torch.rand(1, 3, 16, 16))
    assert torch.allclose(out, torch.full_like(out, 0.25))


def test_modulation_maps_follow_activation_size():
    mod = SPADE(5, hidden=4).modulation(torch.rand(1, 3, 64, 64), (8, 8))
    assert mod.gamma.shape == (1, 5, 8, 8)
    assert mod.beta.shape == (1, 5, 8, 8)


# --- generator ---

def test_generated_frame_matches_identity_shape_and_range():
    gen = Stage1Generator(_tiny_settings())
    identity = torch.rand(2, 3, 16, 16) * 2 - 1
    out = gen(identity, torch.randn(2, 21, 13))
    assert out.shape == identity.shape
    assert out.abs().max() <= 1.0


def test_generator_rejects_wrong_embedding_dim():
    gen = Stage1Generator(_tiny_settings())
    emb = encode_speech(torch.randn(1, 21, 13), SpeechEncoder(embedding_dim=12))
    with pytest.raises(ValidationError):
        generate_frame(torch.rand(1, 3, 16, 16), emb, gen)


def test_generator_rejects_non_power_of_two():
    with pytest.raises(ValidationError):
        SpadeGenerator(resolution=24)


def test_generator_parameter_gradients_match_finite_differences():
    torch.manual_seed(0)
    gen = SpadeGenerator(resolution=8, embedding_dim=4, base_channels=2, hidden=2).double()
    identity = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    emb = torch.randn(2, 4, dtype=torch.float64)
    weight = gen.conv_img.weight

    def readout():
        return gen(identity, emb)[:, :, 3, 5].sum()

    readout().backward()
    analytic = weight.grad[0, 0, 1, 1].item()
    h = 1e-6
    with torch.no_grad():
        weight[0, 0, 1, 1] += h
        plus = readout().item()
        weight[0, 0, 1, 1] -= 2 * h
        minus = readout().item()
        weight[0, 0, 1, 1] += h
    numeric = (plus - minus) / (2 * h)
    assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), 1e-8)


# --- discriminators ---

def test_frame_discriminator_has_three_scales():
    disc = FrameDiscriminator(32, channels=4, n_layers=2)
    x = torch.rand(1, 6, 32, 32)
    assert [p.shape[-1] for p in disc.pyramid(x)] == [32, 16, 8]
    assert torch.equal(disc.pyramid(x)[2], F.avg_pool2d(x, 4))
    frame, identity = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
    out = frame_discriminate(frame, identity, disc)
    again = frame_discriminate(frame, identity, disc)
    assert len(out.score_maps) == 3 and len(out.features) == 3
    assert all(len(layers) > 0 for layers in out.features)
    assert all(torch.equal(a, b) for a, b in zip(out.score_maps, again.score_maps))


def test_frame_discriminator_checks_resolution():
    with pytest.raises(ValidationError):
        FrameDiscriminator(32, channels=4)(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16))


def test_temporal_discriminator_stacks_window_on_channels():
    disc = TemporalDiscriminator(5, channels=4, n_layers=2)
    assert disc.in_channels == 15
    window = torch.rand(1, 1, 3, 16, 16).expand(1, 5, 3, 16, 16)
    out = temporal_discriminate(window, disc)
    assert all(s.shape[1] == 5 for s in out.score_maps)
    assert all(torch.isfinite(s).all() for s in out.score_maps)
    with pytest.raises(ValidationError):
        disc(torch.rand(1, 4, 3, 16, 16))


def test_sync_embeddings_share_dimension():
    disc = SyncDiscriminator(resolution=32, channels=4, dim=16)
    pair = sync_embed(torch.zeros(2, 5, 3, 8, 16), torch.zeros(2, 21, 13), disc)
    assert pair.v.shape == pair.a.shape == (2, 16)
    assert torch.isfinite(pair.v).all() and torch.isfinite(pair.a).all()


def test_sync_needs_five_frames():
    with pytest.raises(ValidationError):
        SyncDiscriminator(resolution=32)(torch.zeros(1, 4, 3, 8, 16), torch.zeros(1, 21, 13))


def test_networks_stay_finite_on_random_inputs():
    torch.manual_seed(1)
    nets = build_stage1_networks(_tiny_settings())
    for _ in range(20):
        identity = torch.rand(1, 3, 16, 16) * 2 - 1
        mfcc = torch.randn(1, 21, 13) * 10
        frame = nets.generator(identity, mfcc)
        assert torch.isfinite(frame).all()
        out = nets.frame_d(frame, identity)
        assert all(torch.isfinite(s).all() for s in out.score_maps)
        assert torch.isfinite(nets.landmark_head(frame)).all()


# --- parameter gradients ---

@pytest.mark.parametrize("seed", GRADCHECK_SEEDS)
def test_frame_discriminator_parameter_gradients(seed):
    torch.manual_seed(seed)
    disc = FrameDiscriminator(8, channels=2, n_layers=2)
    assert sum(p.numel() for p in disc.parameters()) < 10_000

    def readout(out):
        return sum(s.sum() for s in out.score_maps) + sum(f.mean() for layers in out.features for f in layers)

    assert params_gradcheck(disc, readout, torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8))


@pytest.mark.parametrize("seed", GRADCHECK_SEEDS)
def test_temporal_discriminator_parameter_gradients(seed):
    torch.manual_seed(seed)
    disc = TemporalDiscriminator(2, channels=2, n_layers=2)
    assert params_gradcheck(disc, lambda out: sum(s.sum() for s in out.score_maps), torch.rand(1, 2, 3, 8, 8))


@pytest.mark.parametrize("seed", GRADCHECK_SEEDS)
def test_sync_discriminator_parameter_gradients(seed):
    torch.manual_seed(seed)
    disc = SyncDiscriminator(resolution=16, channels=2, dim=4)
    assert sum(p.numel() for p in disc.parameters()) < 10_000
    assert params_gradcheck(
        disc, lambda pair: (pair.v * pair.a).sum(), torch.rand(1, 5, 3, 8, 16), torch.randn(1, 5, 13)
    )


@pytest.mark.parametrize("seed", GRADCHECK_SEEDS)
def test_landmark_head_parameter_gradients(seed):
    torch.manual_seed(seed)
    assert params_gradcheck(LandmarkHead(channels=2), lambda points: points.sum(), torch.rand(1, 3, 16, 16))


# --- landmark head ---

def test_landmark_head_never_collapses_eye_corners():
    head = LandmarkHead(channels=2)
    points = head(torch.randn(3, 3, 16, 16) * 5)
    assert points.shape == (3, 2, 6, 2)
    width = (points[..., 0, :] - points[..., 3, :]).norm(dim=-1)
    assert (width > 0.01).all()
