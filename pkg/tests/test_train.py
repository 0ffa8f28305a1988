import numpy as np
import pytest

from magic_core import autodiff as ad
from magic_core.checkpoint import load_checkpoint
from magic_core.config import BlockSpec, NetworkConfig, ScaleSpec, reference_config
from magic_core.data import distort, psnr, synthetic_images
from magic_core.errors import ConfigError, InputError, TrainingError
from magic_core.model import build_model, forward
from magic_core.train import TrainConfig, batch_loss, evaluate, sample_batch, train

from conftest import toy_config


def iir_toy():
    return NetworkConfig("iir-toy", (ScaleSpec(1, 6, (BlockSpec("group_conv", 3, groups=3),)),
                                     ScaleSpec(4, 6, (BlockSpec("depthwise_separable", 3),)),
                                     ScaleSpec(16, 6, (BlockSpec("hybrid_fir_iir"),))), (), 3, 3).validate()


def toy_pairs(rng, n=4, size=32):
    out = []
    for _ in range(n):
        y = rng.uniform(size=(3, size, size))
        x = np.clip(y + rng.normal(0, 0.05, size=y.shape), 0, 1)
        out.append((x, y))
    return out


SMALL = TrainConfig(patch=32, batch=2, epochs=1, patches_per_image=2, eval_each_epoch=False)


def test_single_patch_overfit():
    m = build_model(reference_config(3, 3), 0)
    p = distort(next(iter(synthetic_images(1, 0, 64, 64))), seed=0)
    pair = [(p.input, p.target)]
    cfg = TrainConfig(patch=64, batch=1, epochs=500, patches_per_image=1, lr=3e-3, lr_final=3e-3,
                      eval_each_epoch=False)
    res = train(m, pair, cfg)
    assert len(res.step_losses) == 500
    assert res.step_losses[-1] <= res.step_losses[0] / 10


def test_zero_lr_leaves_parameters(rng):
    m = build_model(iir_toy(), 0)
    before = {n: p.data.tobytes() for n, p in m.params.items()}
    train(m, toy_pairs(rng), TrainConfig(patch=32, batch=2, epochs=1, lr=0, lr_final=0, eval_each_epoch=False))
    assert all(p.data.tobytes() == before[n] for n, p in m.params.items())


def test_deterministic(rng, tmp_path):
    pairs = toy_pairs(rng)
    runs = []
    for d in ("a", "b"):
        m = build_model(iir_toy(), 0)
        runs.append(train(m, pairs, SMALL, pairs[:1], tmp_path / d))
    assert runs[0].step_losses == runs[1].step_losses
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    assert load_checkpoint(tmp_path / "a" / "model.ckpt").config == iir_toy()
    lines = (tmp_path / "a" / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,test_psnr,test_ssim" and len(lines) == 2


def test_fixed_batch_loss_reproducible(rng):
    m = build_model(iir_toy(), 1)
    x, y = sample_batch(toy_pairs(rng), [0, 1], 32, np.random.default_rng(0))
    values = []
    for _ in range(2):
        with ad.Graph():
            values.append(batch_loss(m, x, y).data.tobytes())
    assert values[0] == values[1]


def test_every_parameter_moves(rng):
    m = build_model(iir_toy(), 0)
    before = {n: p.data.copy() for n, p in m.params.items()}
    train(m, toy_pairs(rng), TrainConfig(patch=32, batch=2, epochs=1, patches_per_image=1, eval_each_epoch=False))
    for n, p in m.params.items():
        assert not np.array_equal(p.data, before[n]), n


def test_w1_projection(rng):
    m = build_model(iir_toy(), 0)
    w1 = m.params["enc2.b0.iir.w1"]
    w1.data[...] = 0.989
    train(m, toy_pairs(rng), TrainConfig(patch=32, batch=2, epochs=2, lr=0.5, lr_final=0.5, eval_each_epoch=False))
    assert np.abs(w1.data).max() <= 0.99


def test_empty_dataset():
    with pytest.raises(InputError):
        train(build_model(toy_config(), 0), [], SMALL)
    with pytest.raises(InputError):
        evaluate(build_model(toy_config(), 0), [])


def test_nan_aborts(rng):
    pairs = toy_pairs(rng)
    pairs[0] = (np.full_like(pairs[0][0], np.nan), pairs[0][1])
    with pytest.raises(TrainingError, match="non-finite"):
        train(build_model(toy_config(), 0), pairs, TrainConfig(patch=32, batch=4, epochs=1, eval_each_epoch=False))


def test_patch_larger_than_image(rng):
    with pytest.raises(InputError):
        train(build_model(toy_config(), 0), toy_pairs(rng, 2, 16), SMALL)


def test_config_invariants():
    with pytest.raises(ConfigError):
        TrainConfig(patch=40)
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1)


def test_evaluate_is_pure(rng):
    m = build_model(iir_toy(), 2)
    pairs = toy_pairs(rng)
    a, b = evaluate(m, pairs), evaluate(m, pairs)
    assert a.table() == b.table() and a.per_image == b.per_image
    assert len(a.per_image) == 4 and a.input_psnr == pytest.approx(np.mean([psnr(x, y) for x, y in pairs]))


def test_zero_head_is_constant_image(rng):
    m = build_model(iir_toy(), 0)
    m.params["head.w"].data[...] = 0
    m.params["head.b"].data[...] = 0.5
    pairs = toy_pairs(rng)
    res = evaluate(m, pairs)
    assert res.psnr == pytest.approx(np.mean([psnr(np.full_like(y, 0.5), y) for _, y in pairs]), abs=1e-9)


def test_removing_trained_skip_changes_output(rng):
    pairs = toy_pairs(rng, 4, 64)
    m = build_model(toy_config(), 0)
    train(m, pairs, TrainConfig(patch=32, batch=2, epochs=2, eval_each_epoch=False))
    cut = m.copy()
    cut.params["skip0.expand.w"].data[...] = 0
    cut.params["skip0.expand.b"].data[...] = 0
    x = pairs[0][0]
    assert np.abs(forward(m, x).data - forward(cut, x).data).mean() > 1e-3
