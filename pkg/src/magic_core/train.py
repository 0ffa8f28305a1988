"""Patch-based training with Adam and full-frame evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .data import psnr, ssim
from .errors import ConfigError, InputError, TrainingError
from .fileio import atomic_write_text
from .model import MagicModel, forward, prepare_input

log = logging.getLogger(__name__)

Pair = tuple[np.ndarray, np.ndarray]   # (distorted input, target)


@dataclass(frozen=True)
class TrainConfig:
    patch: int = 64
    batch: int = 8
    epochs: int = 12
    patches_per_image: int = 16     # patches drawn per training image per epoch
    lr: float = 2e-3
    lr_final: float = 2e-4          # cosine decay target; equal to lr for a constant rate
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_each_epoch: bool = True

    def __post_init__(self):
        if self.patch < 16 or self.patch % 16:
            raise ConfigError(f"patch={self.patch} must be a positive multiple of 16")
        if self.batch < 1 or self.epochs < 0 or self.patches_per_image < 1:
            raise ConfigError("batch, epochs and patches_per_image must be positive")
        if self.lr < 0 or self.lr_final < 0:
            raise ConfigError("learning rates must be non-negative")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    test_psnr: float | None
    test_ssim: float | None
    seconds: float


@dataclass
class TrainResult:
    model: MagicModel
    epochs: list[EpochStats] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def curve_csv(self) -> str:
        # no timings here: the curve is a deterministic artifact of the seed
        rows = ["epoch,train_loss,test_psnr,test_ssim"]
        for e in self.epochs:
            tp = "" if e.test_psnr is None else f"{e.test_psnr:.6f}"
            ts = "" if e.test_ssim is None else f"{e.test_ssim:.6f}"
            rows.append(f"{e.epoch},{e.train_loss:.8f},{tp},{ts}")
        return "\n".join(rows) + "\n"


class Adam:
    def __init__(self, params: list[ad.Parameter], cfg: TrainConfig):
        self.params = [p for p in params if p.trainable]
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            update = (lr / bc1) * m / (np.sqrt(v / bc2) + c.eps)
            p.data -= update.astype(p.data.dtype, copy=False)
            p.project()


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if total <= 1 or cfg.lr_final == cfg.lr:
        return cfg.lr
    t = step / (total - 1)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * t))


def sample_batch(pairs: list[Pair], idx: list[int], patch: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for i in idx:
        x, y = pairs[i]
        h, w = x.shape[1:]
        if h < patch or w < patch:
            raise InputError(f"image {i} is {h}x{w}, smaller than patch {patch}")
        r = int(rng.integers(0, h - patch + 1))
        c = int(rng.integers(0, w - patch + 1))
        xs.append(x[:, r:r + patch, c:c + patch])
        ys.append(y[:, r:r + patch, c:c + patch])
    return np.stack(xs), np.stack(ys)


def batch_loss(model: MagicModel, x: np.ndarray, y: np.ndarray) -> ad.Tensor:
    """Mean absolute error over the active output channels; call inside a Graph."""
    xin, _ = prepare_input(model, x)
    out = model.run(ad.Tensor(xin))
    k = model.config.n_active_out
    if y.shape[1] != k:
        raise InputError(f"target has {y.shape[1]} channels, model has {k} active outputs")
    return ad.mean_abs_error(ad.channel_slice(out, 0, k), y)


def train(model: MagicModel, train_pairs: list[Pair], cfg: TrainConfig = TrainConfig(),
          test_pairs: list[Pair] | None = None, out_dir: str | Path | None = None) -> TrainResult:
    """Train ``model`` in place; writes ``model.ckpt`` and ``loss.csv`` to ``out_dir`` if given."""
    if not train_pairs:
        raise InputError("training set is empty")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7A1)))
    dtype = model.dtype
    pairs = [(x.astype(dtype), y.astype(dtype)) for x, y in train_pairs]
    opt = Adam(model.parameters(), cfg)
    n = len(pairs)
    per_epoch = math.ceil(n * cfg.patches_per_image / cfg.batch)
    total = per_epoch * cfg.epochs
    result = TrainResult(model)
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.process_time()
        order = np.concatenate([rng.permutation(n) for _ in range(cfg.patches_per_image)])
        losses = []
        for s in range(per_epoch):
            idx = [int(i) for i in order[s * cfg.batch:(s + 1) * cfg.batch]]
            if not idx:
                break
            x, y = sample_batch(pairs, idx, cfg.patch, rng)
            model.zero_grad()
            with ad.Graph():
                loss = batch_loss(model, x, y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch} step {s};"
                                    f" last finite loss {losses[-1] if losses else 'n/a'}")
            ad.backward(loss)
            opt.step(_lr_at(cfg, step, total))
            losses.append(value)
            step += 1
        tp = ts = None
        if test_pairs and cfg.eval_each_epoch:
            ev = evaluate(model, test_pairs)
            tp, ts = ev.psnr, ev.ssim
        stats = EpochStats(epoch, float(np.mean(losses)), tp, ts, time.process_time() - t0)
        log.info("epoch %d loss %.5f psnr %s ssim %s (%.1f cpu-s)", epoch, stats.train_loss, tp, ts,
                 stats.seconds)
        result.epochs.append(stats)
        result.step_losses.extend(losses)
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(model, out / "model.ckpt")
        atomic_write_text(out / "loss.csv", result.curve_csv())
    return result


@dataclass
class EvalResult:
    psnr: float
    ssim: float
    input_psnr: float
    input_ssim: float
    per_image: list[tuple[int, float, float, float, float]]

    @property
    def psnr_gain(self) -> float:
        return self.psnr - self.input_psnr

    def table(self) -> str:
        rows = ["image,psnr,ssim,input_psnr,input_ssim"]
        rows += [f"{i},{a:.4f},{b:.6f},{c:.4f},{d:.6f}" for i, a, b, c, d in self.per_image]
        rows.append(f"mean,{self.psnr:.4f},{self.ssim:.6f},{self.input_psnr:.4f},{self.input_ssim:.6f}")
        return "\n".join(rows) + "\n"


def evaluate(model: MagicModel, pairs: list[Pair]) -> EvalResult:
    """Full-frame PSNR/SSIM of model outputs, plus the distorted inputs as a baseline."""
    if not pairs:
        raise InputError("evaluation set is empty")
    k = model.config.n_active_out
    rows = []
    for i, (x, y) in enumerate(pairs):
        out = forward(model, x).data[:k].astype(np.float64)
        base = x[:k] if x.shape[0] >= k else x
        rows.append((i, psnr(out, y), ssim(out, y), psnr(base, y), ssim(base, y)))
    a = np.array([r[1:] for r in rows])
    m = a.mean(axis=0)
    return EvalResult(float(m[0]), float(m[1]), float(m[2]), float(m[3]), rows)
