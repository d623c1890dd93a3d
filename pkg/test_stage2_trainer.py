import math

import pandas as pd
import pytest
import torch

from checkpoints import list_checkpoints, write_checkpoint
from config import Stage2LossWeights, Stage2NetworkSettings, Stage2Settings
from conftest import write_raw_clip
from errors import ValidationError
from stage1_losses import LossBundle
from stage1_networks import LandmarkHead
from stage2_networks import TemporalPredictor, build_stage2_networks
import stage2_trainer
from stage2_trainer import (
    build_stage2_optimizers,
    cam_loss,
    identity_loss,
    lip_sync_loss,
    lsgan_loss,
    predictor_loss,
    recycle_loss,
    stage2_blink_loss,
    stage2_objective,
    stage2_train_step,
    train_stage2,
)


class ShiftPredictor:
    """Repeats the last frame plus a constant offset."""

    def __init__(self, shift, past_frames=2):
        self.shift = shift
        self.past_frames = past_frames

    def __call__(self, frames):
        return frames[:, -1] + self.shift


def same(x):
    return x


def _tiny():
    return Stage2NetworkSettings(
        resolution=16, base_channels=4, n_res_blocks=1, disc_channels=4,
        local_layers=1, global_layers=2, past_frames=2, predictor_channels=4,
    )


def _eyes(h, batch):
    eye = torch.tensor([[0.0, 0.0], [1.0, h], [3.0, h], [4.0, 0.0], [3.0, -h], [1.0, -h]])
    return torch.stack([eye, eye + torch.tensor([8.0, 0.0])])[None].expand(batch, 2, 6, 2)


# --- adversarial / CAM ---

def test_lsgan_values():
    ones, zeros, halves = torch.ones(2, 1, 4, 4), torch.zeros(2, 1, 4, 4), torch.full((2, 1, 4, 4), 0.5)
    assert float(lsgan_loss(ones, zeros)) == 0.0
    assert float(lsgan_loss(halves, halves)) == pytest.approx(0.5)
    assert float(lsgan_loss([halves, halves], [halves, halves])) == pytest.approx(1.0)
    assert float(lsgan_loss(None, ones, "generator")) == 0.0
    assert float(lsgan_loss(None, halves, "generator")) > 0


def test_lsgan_discriminator_minimum_on_grid():
    grid = torch.linspace(-1, 2, 31)
    values = torch.tensor([[float(lsgan_loss(r.view(1), f.view(1))) for f in grid] for r in grid])
    best = divmod(int(values.argmin()), len(grid))
    assert (float(grid[best[0]]), float(grid[best[1]])) == pytest.approx((1.0, 0.0), abs=1e-6)
    assert float(values.min()) == pytest.approx(0.0, abs=1e-10)


def test_cam_loss_values():
    boundary = torch.zeros(3, 1)
    assert float(cam_loss(boundary, boundary)) == pytest.approx(2 * math.log(2))
    assert float(cam_loss(torch.full((3, 1), 50.0), torch.full((3, 1), -50.0))) < 1e-12
    inf = float("inf")
    saturated = cam_loss(torch.tensor([[inf]]), torch.tensor([[-inf]]))
    assert torch.isfinite(saturated) and float(saturated) < 1e-12
    assert float(cam_loss(torch.tensor([[-inf]]), torch.tensor([[inf]]))) == pytest.approx(100.0)
    a, b = torch.randn(6, 1), torch.randn(6, 1)
    perm = torch.randperm(6)
    assert float(cam_loss(a, b, "discriminator")) == pytest.approx(float(cam_loss(a[perm], b, "discriminator")))
    with pytest.raises(ValidationError):
        cam_loss(a, b, "critic")


# --- cycle terms ---

def test_recycle_loss_on_constant_clip():
    clip = torch.full((1, 3, 3, 4, 4), 0.5)
    assert float(recycle_loss(clip, same, same, ShiftPredictor(0.0))) == 0.0
    assert float(recycle_loss(clip, same, same, ShiftPredictor(0.1))) == pytest.approx(0.01, abs=1e-6)
    with pytest.raises(ValidationError):
        recycle_loss(clip[:, :2], same, same, ShiftPredictor(0.1))


def test_recycle_loss_reaches_all_three_networks():
    torch.manual_seed(0)
    nets = build_stage2_networks(_tiny())
    x = torch.rand(1, 3, 3, 16, 16) * 2 - 1
    recycle_loss(x, nets.gen_s2t, nets.gen_t2s, nets.predictor_t).backward()
    for net in (nets.gen_s2t, nets.gen_t2s, nets.predictor_t):
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in net.parameters())


def test_recycle_with_identity_generators_is_predictor_loss():
    torch.manual_seed(0)
    pred = build_stage2_networks(_tiny()).predictor_t.double()
    clip = torch.rand(1, 5, 3, 16, 16, dtype=torch.float64)
    assert abs(float(recycle_loss(clip, same, same, pred)) - float(predictor_loss(clip, pred))) < 1e-9


def test_identity_loss():
    x = torch.rand(2, 3, 8, 8)
    assert float(identity_loss(x, same)) == 0.0
    assert float(identity_loss(x, lambda v: v + 0.2)) == pytest.approx(0.2, abs=1e-6)


def test_lip_sync_loss_sees_only_the_lower_half():
    x = torch.rand(1, 3, 8, 8)

    def top_only(v):
        out = v.clone()
        out[:, :, :4] += 0.3
        return out

    assert float(lip_sync_loss(x, same, same)) == 0.0
    assert float(lip_sync_loss(x, same, top_only)) == 0.0
    assert float(lip_sync_loss(x, same, lambda v: v + 0.3)) == pytest.approx(0.3, abs=1e-6)


def test_stage2_blink_loss():
    def landmarks(image):
        return _eyes(float(image.mean()), image.shape[0])

    x, cycled = torch.full((1, 3, 8, 8), 0.28), torch.full((1, 3, 8, 8), 0.33)
    assert float(stage2_blink_loss(x, x, landmarks)) == 0.0
    assert float(stage2_blink_loss(x, cycled, landmarks)) == pytest.approx(0.05, abs=1e-6)
    assert float(stage2_blink_loss(cycled, x, landmarks)) == pytest.approx(float(stage2_blink_loss(x, cycled, landmarks)))


def test_predictor_loss_counts_windows():
    clip = torch.full((1, 5, 3, 4, 4), 0.2)
    assert float(predictor_loss(clip, ShiftPredictor(0.0))) == 0.0
    assert float(predictor_loss(clip, ShiftPredictor(0.1))) == pytest.approx(0.03, abs=1e-6)
    with pytest.raises(ValidationError):
        predictor_loss(clip[:, :2], ShiftPredictor(0.1))


# --- gradients ---

@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients_match_finite_differences(seed):
    torch.manual_seed(seed)
    f64 = torch.float64
    gradcheck = torch.autograd.gradcheck

    real = torch.randn(1, 1, 3, 3, dtype=f64)
    fake = torch.randn(1, 1, 3, 3, dtype=f64, requires_grad=True)
    assert gradcheck(lambda f: lsgan_loss([real], [f]), (fake,))
    assert gradcheck(lambda f: lsgan_loss(None, [f], "generator"), (fake,))

    other = torch.randn(3, 1, dtype=f64)
    logits = torch.randn(3, 1, dtype=f64, requires_grad=True)
    assert gradcheck(lambda a: cam_loss(a, other), (logits,))
    assert gradcheck(lambda b: cam_loss(other, b, "discriminator"), (logits,))

    pred = TemporalPredictor(past_frames=2, channels=2).double()
    clip = torch.rand(1, 3, 3, 4, 4, dtype=f64, requires_grad=True)
    assert gradcheck(lambda v: recycle_loss(v, torch.tanh, torch.sin, pred), (clip,))
    assert gradcheck(lambda v: predictor_loss(v, pred), (clip,))

    # inputs in (0, 1) keep |v - 0.5 tanh(v)| away from its kink
    frames = torch.rand(2, 3, 4, 4, dtype=f64, requires_grad=True)
    assert gradcheck(lambda v: identity_loss(v, lambda u: 0.5 * torch.tanh(u)), (frames,))
    assert gradcheck(lambda v: lip_sync_loss(v, torch.tanh, lambda u: 0.5 * u), (frames,))


# --- objective / settings ---

def test_default_weights_and_optimizers():
    settings = Stage2Settings()
    w = settings.weights
    assert (w.lambda_cam, w.lambda_recycle, w.lambda_identity, w.lambda_lip, w.lambda_BL) == (2000, 100, 10, 100, 100)
    opts = build_stage2_optimizers(build_stage2_networks(_tiny()), settings.optimizer)
    assert set(opts) == {"gen_s2t", "gen_t2s", "disc_t", "disc_s", "predictor_s", "predictor_t"}
    for opt in opts.values():
        group = opt.param_groups[0]
        assert group["lr"] == pytest.approx(1e-4)
        assert group["betas"] == (0.5, 0.999)


def test_zero_weight_terms_drop_out_of_objective():
    bundle = LossBundle({k: torch.tensor(1.0) for k in ("G_GAN", "G_CAM", "recycle", "identity", "lip", "BL")})
    full = float(stage2_objective(bundle, Stage2LossWeights()))
    assert full == pytest.approx(1 + 2000 + 100 + 10 + 100 + 100)
    no_identity = float(stage2_objective(bundle, Stage2LossWeights(lambda_identity=0)))
    assert full - no_identity == pytest.approx(10)


# --- step / loop ---

def test_train_step_reports_finite_losses_and_clips_rho():
    torch.manual_seed(0)
    nets = build_stage2_networks(_tiny())
    opts = build_stage2_optimizers(nets, Stage2Settings().optimizer)
    head = LandmarkHead(2).requires_grad_(False)
    x, y = torch.rand(3, 3, 16, 16) * 2 - 1, torch.rand(3, 3, 16, 16) * 2 - 1
    bundle = stage2_train_step(x, y, nets, opts, Stage2LossWeights(), landmark_fn=lambda img: head(img) * 16)
    assert {"D_GAN", "D_CAM", "P_s", "P_t", "G_GAN", "G_CAM", "identity", "recycle", "lip", "BL"} <= set(bundle.values)
    assert all(math.isfinite(v) for v in bundle.scalars().values())
    for gen in (nets.gen_s2t, nets.gen_t2s):
        for name, p in gen.named_parameters():
            if name.endswith("rho"):
                assert p.min() >= 0 and p.max() <= 1


def test_train_step_uses_the_public_loss_helpers(monkeypatch):
    calls = {"identity": 0, "lip": 0}

    def counting(name, fn):
        def wrapped(*args, **kwargs):
            calls[name] += 1
            return fn(*args, **kwargs)

        return wrapped

    monkeypatch.setattr(stage2_trainer, "identity_loss", counting("identity", identity_loss))
    monkeypatch.setattr(stage2_trainer, "lip_sync_loss", counting("lip", lip_sync_loss))
    torch.manual_seed(0)
    nets = build_stage2_networks(_tiny())
    opts = build_stage2_optimizers(nets, Stage2Settings().optimizer)
    x, y = torch.rand(3, 3, 16, 16) * 2 - 1, torch.rand(3, 3, 16, 16) * 2 - 1
    stage2_train_step(x, y, nets, opts, Stage2LossWeights())
    assert calls == {"identity": 2, "lip": 1}


def test_cached_translations_give_the_same_terms():
    x = torch.rand(2, 3, 8, 8)

    def shift(v):
        return v + 0.1

    assert float(identity_loss(x, shift, shift(x))) == pytest.approx(float(identity_loss(x, shift)))
    cycled = shift(shift(x))
    assert float(lip_sync_loss(x, shift, shift, cycled)) == pytest.approx(float(lip_sync_loss(x, shift, shift)))


def test_train_step_needs_full_windows():
    nets = build_stage2_networks(_tiny())
    opts = build_stage2_optimizers(nets, Stage2Settings().optimizer)
    with pytest.raises(ValidationError):
        stage2_train_step(torch.rand(2, 3, 16, 16), torch.rand(3, 3, 16, 16), nets, opts, Stage2LossWeights())


def _domains(cfg):
    for k in range(2):
        write_raw_clip(f"{cfg.paths.source_dir}/h{k}", n_frames=4, seed=k, audio_name=None)
    write_raw_clip(f"{cfg.paths.target_dir}/a0", n_frames=5, seed=7, audio_name=None)


def test_train_stage2_writes_namespaced_checkpoints(toy_config, tmp_path):
    _domains(toy_config)
    head_dir = write_checkpoint(tmp_path / "s1", 1, {"landmark_head": LandmarkHead(4)}, {"network_hash": "x"})
    toy_config.paths.stage1_checkpoint = str(head_dir)
    written = train_stage2(toy_config, tmp_path / "run")
    assert [p.name for p in written] == ["epoch_0001", "epoch_0002"]
    for name in ("gen_s2t", "gen_t2s", "disc_t", "disc_s", "predictor_s", "predictor_t"):
        assert (written[-1] / f"{name}.bin").is_file()
    log = pd.read_csv(tmp_path / "run" / "stage2" / "loss_log.csv")
    assert set(log["phase"]) == {0}
    assert {"recycle", "BL", "P_s"} <= set(log["loss_name"])


def test_train_stage2_resume(toy_config, tmp_path):
    _domains(toy_config)
    train_stage2(toy_config, tmp_path / "straight")
    toy_config.stage2.epochs = 1
    train_stage2(toy_config, tmp_path / "resumed")
    toy_config.stage2.epochs = 2
    train_stage2(toy_config, tmp_path / "resumed", resume=True)
    assert len(list_checkpoints(tmp_path / "resumed" / "stage2" / "checkpoints")) == 2
    pd.testing.assert_frame_equal(
        pd.read_csv(tmp_path / "straight" / "stage2" / "loss_log.csv"),
        pd.read_csv(tmp_path / "resumed" / "stage2" / "loss_log.csv"),
    )


@pytest.mark.slow
def test_toy_run_reduces_recycle_loss():
    torch.manual_seed(0)
    nets = build_stage2_networks(_tiny())
    opts = build_stage2_optimizers(nets, Stage2Settings().optimizer)
    t = torch.linspace(0, 1, 3).view(3, 1, 1, 1)
    x = (torch.rand(1, 3, 16, 16) * 0.5 + 0.25 * t).mul(2).sub(1)
    y = (torch.rand(1, 3, 16, 16) * 0.5 + 0.25 * (1 - t)).mul(2).sub(1)
    recycle = []
    for _ in range(300):
        recycle.append(float(stage2_train_step(x, y, nets, opts, Stage2LossWeights())["recycle"]))
    assert recycle[-1] <= 0.7 * recycle[19]
