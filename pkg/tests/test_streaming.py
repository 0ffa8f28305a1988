from dataclasses import replace

import numpy as np
import pytest

from magic_core.config import BlockSpec, NetworkConfig, ScaleSpec, fir_ablation_config, reference_config
from magic_core.errors import InputError, UsageError
from magic_core.model import build_model, forward, lower
from magic_core.streaming import StreamContext, flush, plan_schedule, push_line, stream_frame, stream_infer

from conftest import identity_model, randomize, toy_config


def single_scale(*blocks, channels=6):
    return NetworkConfig("single", (ScaleSpec(1, channels, tuple(blocks)),), (), 3, 3).validate()


def longest_path(config, plan):
    contrib = {lp.name: lp.delay for lp in plan.layers}
    best = {}
    for layer in lower(config).layers:
        best[layer.name] = contrib[layer.name] + max((best[n] for n in layer.inputs), default=0)
    return best[lower(config).layers[-1].name]


class TestPlan:
    def test_one_conv_one_line(self):
        assert plan_schedule(single_scale(BlockSpec("depthwise_separable", 3))).total_delay == 1

    def test_two_convs_two_lines(self):
        cfg = single_scale(BlockSpec("depthwise_separable", 3), BlockSpec("group_conv", 3, groups=3))
        assert plan_schedule(cfg).total_delay == 2

    def test_five_tap_is_two_lines(self):
        assert plan_schedule(single_scale(BlockSpec("depthwise_separable", 5))).total_delay == 2

    def test_bottleneck_fir_vs_iir(self):
        fir = plan_schedule(fir_ablation_config()).layer("enc2.b0.spatial")
        iir = plan_schedule(reference_config()).layer("enc2.b0.iir")
        assert (fir.delay, iir.delay) == (16, 0)

    def test_pointwise_only_is_zero(self):
        assert plan_schedule(single_scale(BlockSpec("pointwise"))).total_delay == 0

    @pytest.mark.parametrize("cfg", [reference_config(), fir_ablation_config(), toy_config()])
    def test_delay_additivity(self, cfg):
        plan = plan_schedule(cfg, 256)
        assert plan.total_delay == longest_path(cfg, plan)

    def test_reference_numbers(self):
        ref, abl = plan_schedule(reference_config(), 64), plan_schedule(fir_ablation_config(), 64)
        assert (ref.total_delay, abl.total_delay) == (35, 67)
        assert [s.span_lines for s in ref.skips] == [31, 12]
        assert [s.rows_held for s in ref.skips] == [31, 3]
        assert [s.span_lines for s in abl.skips] == [63, 44]

    def test_skip_span_closes_the_gap(self):
        for cfg in (reference_config(), fir_ablation_config()):
            plan = plan_schedule(cfg, 64)
            by = plan.by_name
            for sp in plan.skips:
                i = sp.scale_index
                src = by[f"skip{i}.proj"].delay_out
                assert src + sp.span_lines == by[f"dec{i}.up"].delay_out

    def test_fir_buffers_k_minus_one_lines(self):
        plan = plan_schedule(reference_config(), 1920)
        lp = plan.layer("enc1.b0.spatial")
        assert lp.lines_buffered == 2 and lp.buffer_width == 480
        assert lp.buffer_samples == 2 * 480 * 48
        iir = plan.layer("enc2.b0.iir")
        assert iir.lines_buffered == 1 and iir.buffer_samples == 120 * 96

    def test_width_padding(self):
        assert plan_schedule(reference_config(), 1000).width == 1008


class TestEngine:
    def test_identity_emits_each_row(self, rng):
        m = identity_model()
        ctx = StreamContext(m, 8)
        for r in range(4):
            row = rng.uniform(size=(3, 8))
            out = push_line(ctx, row)
            assert len(out) == 1
            np.testing.assert_array_equal(out[0][:3], row.astype(np.float32))
        assert flush(ctx) == []

    def test_nothing_before_delay(self, rng):
        m = build_model(reference_config(), 0)
        ctx = StreamContext(m, 64)
        for r in range(plan_schedule(reference_config(), 64).total_delay):
            assert push_line(ctx, rng.uniform(size=(6, 64))) == []
        assert len(push_line(ctx, rng.uniform(size=(6, 64)))) == 1

    def test_first_output_and_conservation(self, rng):
        # the ablation's 67-line delay needs a frame taller than 64 rows
        for cfg, h in ((reference_config(), 64), (fir_ablation_config(), 96)):
            m = build_model(cfg, 0)
            out, ctx = stream_frame(m, rng.uniform(size=(6, h, 64)).astype(np.float32))
            assert ctx.first_output_at == plan_schedule(cfg, 64).total_delay
            assert out.shape == (6, h, 64) and ctx.rows_out == ctx.rows_in == h

    def test_short_frame_drains_on_flush(self, rng):
        m = build_model(fir_ablation_config(), 0)
        out, ctx = stream_frame(m, rng.uniform(size=(6, 64, 64)).astype(np.float32))
        assert ctx.first_output_at is None and out.shape == (6, 64, 64)

    def test_peak_memory_matches_plan(self, rng):
        for cfg in (reference_config(), fir_ablation_config()):
            _, ctx = stream_frame(build_model(cfg, 0), rng.uniform(size=(6, 128, 64)).astype(np.float32))
            assert ctx.peak_total == ctx.plan.buffer_samples

    def test_matches_forward(self, rng):
        for cfg in (reference_config(), fir_ablation_config(), toy_config(), toy_config(dpcm=True)):
            m = randomize(build_model(cfg, 3), rng)
            x = rng.uniform(size=(cfg.in_channels, 48, 64))
            assert np.abs(stream_infer(m, x).data - forward(m, x).data).max() <= 1e-6

    def test_constant_image_exact(self):
        m = build_model(reference_config(), 1)
        x = np.full((6, 64, 64), 0.4)
        assert stream_infer(m, x).data.tobytes() == forward(m, x).data.tobytes()

    def test_odd_sizes_are_padded_like_forward(self, rng):
        m = build_model(reference_config(3, 3), 1)
        x = rng.uniform(size=(3, 35, 41))
        assert np.abs(stream_infer(m, x).data - forward(m, x).data).max() <= 1e-6

    def test_lossless_dpcm_equals_plain_quantized_skip(self, rng):
        base = reference_config()
        lossless = replace(base, skips=(replace(base.skips[0], dpcm_bits=13),) + base.skips[1:]).validate()
        plain = replace(base, skips=(replace(base.skips[0], dpcm=False),) + base.skips[1:]).validate()
        a, b = build_model(lossless, 4), build_model(plain, 4)
        x = rng.uniform(size=(6, 64, 64))
        assert stream_infer(a, x).data.tobytes() == stream_infer(b, x).data.tobytes()

    def test_lossy_dpcm_changes_output(self, rng):
        base = reference_config()
        plain = replace(base, skips=(replace(base.skips[0], dpcm=False),) + base.skips[1:]).validate()
        a, b = build_model(base, 4), build_model(plain, 4)
        x = rng.uniform(size=(6, 64, 64))
        assert not np.array_equal(forward(a, x).data, forward(b, x).data)


class TestErrors:
    def test_double_flush(self, rng):
        ctx = StreamContext(identity_model(), 8)
        push_line(ctx, rng.uniform(size=(3, 8)))
        flush(ctx)
        with pytest.raises(UsageError):
            flush(ctx)

    def test_flush_without_push(self):
        ctx = StreamContext(identity_model(), 8)
        with pytest.raises(UsageError):
            flush(ctx)
        assert ctx.failed

    def test_push_after_flush(self, rng):
        ctx = StreamContext(identity_model(), 8)
        push_line(ctx, rng.uniform(size=(3, 8)))
        flush(ctx)
        with pytest.raises(UsageError):
            push_line(ctx, rng.uniform(size=(3, 8)))

    def test_push_beyond_height(self, rng):
        ctx = StreamContext(identity_model(), 8, height=1)
        push_line(ctx, rng.uniform(size=(3, 8)))
        with pytest.raises(UsageError):
            push_line(ctx, rng.uniform(size=(3, 8)))

    def test_wrong_width_and_channels(self, rng):
        ctx = StreamContext(build_model(reference_config(), 0), 64)
        with pytest.raises(InputError):
            push_line(ctx, rng.uniform(size=(6, 48)))
        with pytest.raises(InputError):
            push_line(ctx, rng.uniform(size=(5, 64)))

    def test_width_must_be_multiple(self):
        with pytest.raises(InputError):
            StreamContext(build_model(reference_config(), 0), 40)

    def test_partial_frame_height(self, rng):
        ctx = StreamContext(build_model(reference_config(), 0), 64)
        for _ in range(10):
            push_line(ctx, rng.uniform(size=(6, 64)))
        with pytest.raises(UsageError):
            flush(ctx)


def test_trace_file(tmp_path, rng):
    _, ctx = stream_frame(build_model(reference_config(), 0), rng.uniform(size=(6, 64, 64)).astype(np.float32))
    path = ctx.write_trace(tmp_path / "trace.txt")
    lines = path.read_text().splitlines()
    assert "total_delay=35" in lines[0] and "first_output_at=35" in lines[0]
    rec = {l.split()[0]: l for l in lines[1:]}
    assert "delay=16" not in rec["layer=enc2.b0.iir"]
    assert "buffered_lines=31" in rec["layer=skip0.store"]
    assert len(lines) == 1 + len(ctx.model.layers)
