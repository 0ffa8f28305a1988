"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL summary that is printed in the pytest
terminal summary (see conftest.record).
"""

import time

import numpy as np
import pytest

from magic_core import autodiff as ad
from magic_core.cli import main
from magic_core.config import BlockSpec, NetworkConfig, ScaleSpec, fir_ablation_config, reference_config
from magic_core.cost import HardwareParams, memory_logic_report, quantized_forward_delta, shift_sum_approx
from magic_core.data import DistortionConfig, load_dataset, synthetic_images, write_dataset
from magic_core.dpcm import DpcmConfig, dpcm_decode, dpcm_encode
from magic_core.model import build_model, forward, run_layers
from magic_core.streaming import plan_schedule, stream_frame
from magic_core.train import TrainConfig, evaluate, train

from conftest import randomize, record, toy_config

# desk-scale experiment
N_IMAGES = 96
IMAGE_SIZE = 96
DATA_SEED = 0
TRAIN = TrainConfig(patch=64, batch=4, epochs=20, patches_per_image=8, lr=3e-3, lr_final=3e-4, seed=0,
                    eval_each_epoch=False)
CPU_BUDGET_S = 30 * 60


# --------------------------------------------------------------------------- 1

def _linear_loss(out, rng):
    return ad.weighted_sum(out, rng.normal(size=out.shape))


def _op_trials(rng):
    """Yield (name, fn, tensors) for randomized single-operator checks."""
    def leaf(*shape, scale=1.0):
        return ad.Tensor(rng.normal(scale=scale, size=shape), True)

    def param(*shape, name="p"):
        return ad.Parameter(rng.normal(size=shape), name)

    for _ in range(15):
        c, g = int(rng.choice([2, 4, 6])), 1
        if rng.random() < 0.5:
            g = int(rng.choice([d for d in (1, 2) if c % d == 0]))
        k = int(rng.choice([1, 3, 5]))
        x, w, b = leaf(1, c, 6, 7), param(c, c // g, k, k, name="w"), param(c, name="b")
        wt = rng.normal(size=(1, c, 6, 7))
        yield "grouped_conv", (lambda x=x, w=w, b=b, g=g, k=k, wt=wt:
                               ad.weighted_sum(ad.conv2d_grouped(x, w, b, g, k, k), wt)), [x, w, b]
    for _ in range(15):
        cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        x, w, b = leaf(2, cin, 4, 5), param(cout, cin, 1, 1, name="w"), param(cout, name="b")
        wt = rng.normal(size=(2, cout, 4, 5))
        yield "pointwise", (lambda x=x, w=w, b=b, wt=wt:
                            ad.weighted_sum(ad.conv2d_grouped(x, w, b, 1, 1, 1), wt)), [x, w, b]
    for _ in range(15):
        c = int(rng.integers(1, 4))
        x, w, b = leaf(1, c, 3, 9), param(c, 1, 1, 3, name="w"), param(c, name="b")
        wt = rng.normal(size=(1, c, 3, 9))
        yield "horizontal_fir", (lambda x=x, w=w, b=b, c=c, wt=wt:
                                 ad.weighted_sum(ad.conv2d_grouped(x, w, b, c, 1, 3), wt)), [x, w, b]
    for _ in range(15):
        c = int(rng.integers(1, 4))
        x = leaf(1, c, int(rng.integers(3, 10)), 3)
        ws = [ad.Parameter(rng.uniform(-0.9, 0.9, c), "w1"), param(c, name="w2"), param(c, name="w3")]
        wt = rng.normal(size=x.shape)
        yield "vertical_iir", (lambda x=x, ws=ws, wt=wt: ad.weighted_sum(ad.iir_vertical(x, *ws), wt)), [x, *ws]
    for _ in range(15):
        # distinct values so every window has a strict maximum
        x = ad.Tensor(rng.permutation(2 * 8 * 8).reshape(1, 2, 8, 8) / 10.0, True)
        wt = rng.normal(size=(1, 2, 2, 2))
        yield "maxpool4", (lambda x=x, wt=wt: ad.weighted_sum(ad.maxpool4(x), wt)), [x]
    for _ in range(15):
        x = leaf(1, 2, 2, 3)
        wt = rng.normal(size=(1, 2, 8, 12))
        yield "upsample4", (lambda x=x, wt=wt: ad.weighted_sum(ad.upsample_nearest4(x), wt)), [x]
    for _ in range(15):
        a, b = leaf(1, 3, 4, 4), leaf(1, 3, 4, 4)
        kind = str(rng.choice(["residual_add", "concat_channels", "relu"]))
        out_c = 6 if kind == "concat_channels" else 3
        wt = rng.normal(size=(1, out_c, 4, 4))
        yield f"merge:{kind}", (lambda a=a, b=b, kind=kind, wt=wt:
                                ad.weighted_sum(ad.elementwise_merge(kind, a, b), wt)), [a, b]


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    trials, worst, worst_name = 0, 0.0, ""
    for name, fn, tensors in _op_trials(rng):
        res = ad.gradient_check(fn, tensors, eps=1e-5)
        assert res.checked > 0, name
        trials += 1
        if res.max_rel_error > worst:
            worst, worst_name = res.max_rel_error, name
    op_worst = worst

    # full network at float64; skips unquantized so the loss is piecewise smooth
    model = build_model(reference_config(), 7).astype(np.float64).float_skips()
    randomize(model, rng)
    x = ad.Tensor(rng.uniform(size=(1, 6, 32, 32)))
    wt = rng.normal(size=(1, 6, 32, 32))
    params = list(model.params.values())
    res = ad.gradient_check(lambda: ad.weighted_sum(run_layers(model, x), wt), params, eps=1e-5,
                            samples=3, rng=rng)
    trials += 1
    elapsed = time.perf_counter() - t0
    ok = (trials >= 100 and op_worst <= 1e-4 and res.checked >= 100 and res.max_rel_error <= 1e-4
          and elapsed < 120)
    record(1, ok, f"{trials} trials, worst op rel err {op_worst:.2e} ({worst_name}), full model"
                  f" {res.checked} probes rel err {res.max_rel_error:.2e}, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 2

def test_criterion_2_streaming_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    cfg = reference_config()
    delay = plan_schedule(cfg, 64).total_delay
    worst, first_ok = 0.0, True
    for trial in range(20):
        model = randomize(build_model(cfg, 100 + trial), rng, scale=0.2)
        x = rng.uniform(size=(6, 64, 64)).astype(np.float32)
        out, ctx = stream_frame(model, x)
        worst = max(worst, float(np.abs(out - forward(model, x).data).max()))
        first_ok &= ctx.first_output_at == delay
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and first_ok and delay == 35 and elapsed < 60
    record(2, ok, f"20 trials, max abs diff {worst:.2e}, first output row {delay} == plan, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 3

def test_criterion_3_delays():
    def single(*blocks):
        return NetworkConfig("s", (ScaleSpec(1, 6, tuple(blocks)),), (), 3, 3).validate()

    one = plan_schedule(single(BlockSpec("depthwise_separable", 3))).total_delay
    two = plan_schedule(single(BlockSpec("depthwise_separable", 3),
                               BlockSpec("depthwise_separable", 3))).total_delay
    fir = plan_schedule(fir_ablation_config()).layer("enc2.b0.spatial").delay
    iir = plan_schedule(reference_config()).layer("enc2.b0.iir").delay
    ok = (one, two, fir, iir) == (1, 2, 16, 0)
    record(3, ok, f"one 3x3 -> {one} line, two -> {two}, 3x3 at /16 -> {fir} lines, IIR -> {iir}")
    assert ok


# --------------------------------------------------------------------------- 4

def hand_delta(hw: HardwareParams) -> tuple[int, int]:
    """Memory and latency saved by the IIR bottleneck, from first principles.

    Bottleneck: 2 blocks at /16 with 96 channels.  A 3x3 depthwise kernel
    holds 2 rows and delays by one coarse row (16 lines); the IIR holds one
    state row and adds no delay.  The extra delay lengthens both skip FIFOs:
    skip0 (full res, 4 channels, DPCM at 8 bits/sample) and skip1 (/4, 8
    channels, plain activations).
    """
    blocks, c, scale = 2, 96, 16
    row = hw.width // scale
    a = hw.activation_bits
    fir_windows = blocks * 2 * row * c * a
    iir_state = blocks * 1 * row * c * a
    extra_lines = blocks * scale * (3 - 1) // 2
    skip0 = extra_lines * hw.width * 4 * 8
    skip1 = (extra_lines // 4) * (hw.width // 4) * 8 * a
    return fir_windows - iir_state + skip0 + skip1, extra_lines


def test_criterion_4_dominance():
    hw = HardwareParams(1920, 1080)
    ref = memory_logic_report(reference_config(), hw)
    abl = memory_logic_report(fir_ablation_config(), hw)
    d_mem, d_lat = hand_delta(hw)
    got = abl.line_buffer_bits - ref.line_buffer_bits
    ok = (ref.line_buffer_bits < abl.line_buffer_bits and ref.latency_lines < abl.latency_lines
          and got == d_mem and abl.total_memory_bits - ref.total_memory_bits == d_mem
          and abl.latency_lines - ref.latency_lines == d_lat)
    record(4, ok, f"line buffers {ref.line_buffer_bits} < {abl.line_buffer_bits} bits, latency"
                  f" {ref.latency_lines} < {abl.latency_lines} lines, delta {got} == hand {d_mem}")
    assert ok


# --------------------------------------------------------------------------- 5

def test_criterion_5_scaling():
    ok, lines = True, []
    for cfg in (reference_config(), fir_ablation_config()):
        for w in (640, 1280, 1920):
            a = memory_logic_report(cfg, HardwareParams(width=w))
            b = memory_logic_report(cfg, HardwareParams(width=2 * w))
            ok &= b.total_memory_bits == 2 * a.total_memory_bits
        for fps in (15, 30, 60):
            a = memory_logic_report(cfg, HardwareParams(fps=fps))
            b = memory_logic_report(cfg, HardwareParams(fps=2 * fps))
            ok &= b.macs_per_second == 2 * a.macs_per_second
        lines.append(cfg.name)
    record(5, ok, f"memory x2 with width, MAC/s x2 with fps, exact, for {', '.join(lines)}")
    assert ok


# --------------------------------------------------------------------------- 6

def test_criterion_6_dpcm():
    rng = np.random.default_rng(6)
    lossless = DpcmConfig(12, 13)
    rows = rng.integers(0, 4096, size=(1000, 256))
    exact = np.array_equal(dpcm_decode(dpcm_encode(rows, lossless), lossless), rows)

    lossy = DpcmConfig(12, 8)
    reach = lossy.quant_step * ((1 << 7) - 1) // 2
    start = rng.integers(0, 4096, size=(1000, 1))
    smooth = np.clip(start + np.cumsum(rng.integers(-reach, reach + 1, size=(1000, 255)), axis=1), 0, 4095)
    smooth = np.concatenate([start, smooth], axis=1)
    err = int(np.abs(dpcm_decode(dpcm_encode(smooth, lossy), lossy) - smooth).max())
    bits_ok = all(DpcmConfig(n, r).row_bits(w) == n + (w - 1) * r
                  for n, r, w in ((12, 8, 1920), (12, 13, 256), (10, 4, 7)))
    ok = exact and err <= lossy.quant_step // 2 and bits_ok
    record(6, ok, f"lossless 1000 rows exact={exact}, lossy max err {err} <= step/2"
                  f" = {lossy.quant_step // 2}, bit accounting exact={bits_ok}")
    assert ok


# --------------------------------------------------------------------------- 7

@pytest.fixture(scope="module")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    ds = write_dataset(root, synthetic_images(N_IMAGES, DATA_SEED, IMAGE_SIZE, IMAGE_SIZE),
                       DistortionConfig(seed=DATA_SEED))
    return load_dataset(ds.root)


def _desk_run(config, ds):
    model = build_model(config, TRAIN.seed)
    t0 = time.process_time()
    train(model, ds.pairs("train"), TRAIN)
    cpu = time.process_time() - t0
    return model, evaluate(model, ds.pairs("test")), cpu


@pytest.fixture(scope="module")
def desk_runs(desk_dataset):
    ref = reference_config(3, 3)
    return {name: _desk_run(cfg, desk_dataset)
            for name, cfg in (("iir", ref), ("fir", fir_ablation_config(ref)))}


def test_criterion_7_desk_restoration(desk_runs):
    ok = True
    parts = []
    for name, (_, ev, cpu) in desk_runs.items():
        ok &= ev.psnr_gain >= 2.0 and ev.ssim > ev.input_ssim and cpu <= CPU_BUDGET_S
        parts.append(f"{name}: {ev.psnr:.2f} dB vs input {ev.input_psnr:.2f} (+{ev.psnr_gain:.2f}),"
                     f" ssim {ev.ssim:.3f} vs {ev.input_ssim:.3f}, {cpu / 60:.1f} cpu-min")
    gap = abs(desk_runs["iir"][1].psnr - desk_runs["fir"][1].psnr)
    ok &= gap <= 1.0
    record(7, ok, "; ".join(parts) + f"; |iir - fir| = {gap:.2f} dB")
    assert ok


# --------------------------------------------------------------------------- 8

def test_criterion_8_shift_sum(desk_dataset):
    monotone = True
    for w in np.linspace(-1, 1, 4001):
        e = [shift_sum_approx(float(w), t).abs_error for t in (0, 1, 2, 3)]
        monotone &= e[0] >= e[1] >= e[2] >= e[3]
    toy = build_model(toy_config(), 0)
    train(toy, desk_dataset.pairs("train"),
          TrainConfig(patch=64, batch=4, epochs=2, patches_per_image=4, eval_each_epoch=False))
    images = [x for x, _ in desk_dataset.pairs("test")]
    db = {t: quantized_forward_delta(toy, images, t) for t in (1, 2, 3)}
    ok = monotone and db[3] >= 30.0
    record(8, ok, f"error non-increasing in terms over 4001 weights={monotone}; trained toy output psnr"
                  f" vs float: 1 term {db[1]:.1f}, 2 terms {db[2]:.1f}, 3 terms {db[3]:.1f} dB")
    assert ok


# --------------------------------------------------------------------------- 9

def test_criterion_9_determinism(tmp_path, capsys):
    cfg = tmp_path / "toy.json"
    cfg.write_text(toy_config().to_json())
    for run in ("a", "b"):
        assert main(["datagen", "--out", str(tmp_path / run / "data"), "--seed", "7", "--count", "6",
                     "--size", "64"]) == 0
        assert main(["train", "--config", str(cfg), "--data", str(tmp_path / run / "data"), "--seed", "7",
                     "--out", str(tmp_path / run / "model"), "--epochs", "1", "--batch", "2",
                     "--patches-per-image", "2"]) == 0
    capsys.readouterr()
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    ok = len(files) == 15 and all(same)
    record(9, ok, f"{sum(same)}/{len(files)} files byte-identical across two seeded datagen+train runs")
    assert ok
