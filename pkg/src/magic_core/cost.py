"""Abstract hardware cost accounting: bits, MACs, line delays, receptive field.

Nothing here is in mm^2 or mW.  Memory is counted in bits of line storage,
compute in multiply-accumulates, latency in full-resolution lines.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .config import NetworkConfig
from .errors import ConfigError
from .model import IIR_INIT, MagicModel, forward, lower
from .streaming import plan_schedule


@dataclass(frozen=True)
class HardwareParams:
    width: int = 1920
    height: int = 1080
    fps: float = 30
    clock_hz: float = 5e8
    activation_bits: int = 12
    weight_bits: int = 8

    def __post_init__(self):
        for name in ("width", "height", "fps", "clock_hz", "activation_bits", "weight_bits"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"HardwareParams.{name} must be positive")


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    scale: int
    delay_lines: int
    buffer_lines: int
    buffer_bits: int
    staging_bits: int
    macs_per_pixel: int            # per output pixel at the layer's own scale
    macs_per_full_pixel: Fraction  # normalized to one full-resolution pixel


@dataclass(frozen=True)
class SkipCost:
    name: str
    factor: int
    span_lines: int
    rows_held: int
    channels: int
    samples: int
    bits_per_sample: int
    buffer_bits: int
    raw_bits: int                  # same FIFO at activation precision, no coding
    dpcm_header_bits: int          # extra input_bits - residual_bits per stored row, per channel


@dataclass(frozen=True)
class ReceptiveField:
    horizontal: int
    vertical: int | None           # None means unbounded (IIR on the path)
    effective_vertical: int        # IIR layers truncated at the impulse-response threshold
    threshold: float = 0.999

    def describe(self) -> str:
        v = "unbounded" if self.vertical is None else str(self.vertical)
        return (f"{self.horizontal} x {v} (effective vertical {self.effective_vertical}"
                f" at {self.threshold:.1%})")


@dataclass
class CostReport:
    config_name: str
    hw: HardwareParams
    layers: list[LayerCost]
    skips: list[SkipCost]
    line_buffer_bits: int          # FIR windows + IIR state rows + skip FIFOs
    staging_bits: int              # pool accumulators + upsample hold rows
    total_memory_bits: int
    parameter_bits: int
    macs_per_full_pixel: Fraction
    macs_per_second: Fraction
    macs_per_clock: Fraction
    latency_lines: int
    receptive_field: ReceptiveField
    fields: dict = field(default_factory=dict)

    @property
    def fir_bits(self) -> int:
        return sum(l.buffer_bits for l in self.layers if l.kind == "conv")

    @property
    def iir_bits(self) -> int:
        return sum(l.buffer_bits for l in self.layers if l.kind == "iir")

    @property
    def skip_bits(self) -> int:
        return sum(s.buffer_bits for s in self.skips)

    @property
    def latency_seconds(self) -> float:
        return self.latency_lines / (self.hw.height * self.hw.fps)


def _skip_bits_per_sample(config: NetworkConfig, scale_index: int, hw: HardwareParams) -> tuple[int, int]:
    s = config.skip_at(scale_index)
    if s.dpcm:
        return s.dpcm_bits, s.quant_bits - s.dpcm_bits
    if s.quant_bits is not None:
        return s.quant_bits, 0
    return hw.activation_bits, 0


def memory_logic_report(config: NetworkConfig, hw: HardwareParams = HardwareParams(),
                        model: MagicModel | None = None) -> CostReport:
    """Line-buffer bits, MAC rates and latency for ``config`` at ``hw``."""
    plan = plan_schedule(config, hw.width)
    layers = {l.name: l for l in lower(config).layers}
    chans = {n: l.channels for n, l in layers.items()}
    bits = hw.activation_bits
    out_layers = []
    macs_full = Fraction(0)
    for lp in plan.layers:
        layer = layers[lp.name]
        if layer.kind == "conv":
            cin = chans[layer.inputs[0]]
            macs = layer.channels * (cin // layer.groups) * layer.kh * layer.kw
        elif layer.kind == "iir":
            macs = 3 * layer.channels
        else:
            macs = 0
        per_full = Fraction(macs, lp.scale * lp.scale)
        macs_full += per_full
        buf_bits = 0 if layer.kind == "skip" else lp.buffer_samples * bits
        out_layers.append(LayerCost(lp.name, lp.kind, lp.scale, lp.delay, lp.lines_buffered,
                                    buf_bits, lp.staging_samples * bits, macs, per_full))
    skips = []
    for sp in plan.skips:
        bps, extra = _skip_bits_per_sample(config, sp.scale_index, hw)
        skips.append(SkipCost(sp.layer, sp.factor, sp.span_lines, sp.rows_held, sp.channels,
                              sp.buffer_samples, bps, sp.buffer_samples * bps,
                              sp.buffer_samples * bits, sp.rows_held * sp.channels * extra))
    line_bits = sum(l.buffer_bits for l in out_layers) + sum(s.buffer_bits for s in skips)
    staging = sum(l.staging_bits for l in out_layers)
    n_params = sum(int(np.prod(l)) for l in lower(config).shapes.values())
    mac_s = macs_full * hw.width * hw.height * Fraction(hw.fps)
    return CostReport(
        config_name=config.name, hw=hw, layers=out_layers, skips=skips,
        line_buffer_bits=line_bits, staging_bits=staging,
        total_memory_bits=line_bits + staging,
        parameter_bits=n_params * hw.weight_bits,
        macs_per_full_pixel=macs_full, macs_per_second=mac_s,
        macs_per_clock=mac_s / Fraction(hw.clock_hz),
        latency_lines=plan.total_delay,
        receptive_field=receptive_field(config, model))


# ---------------------------------------------------------------------------
# receptive field

def iir_impulse_response(w1: float, w2: float, w3: float, n: int) -> np.ndarray:
    g = np.empty(n)
    g[0] = w3
    if n > 1:
        g[1] = w1 * w3 + w2
        for k in range(2, n):
            g[k] = w1 * g[k - 1]
    return g


def iir_effective_taps(w1: float, w2: float, w3: float, threshold: float = 0.999) -> int:
    """Fewest leading taps holding ``threshold`` of the total |impulse response|."""
    a = abs(w1)
    if a >= 1:
        raise ConfigError(f"|w1|={a} >= 1: impulse response does not decay")
    g0, g1 = abs(w3), abs(w1 * w3 + w2)
    total = g0 + g1 / (1 - a)
    if total == 0:
        return 1
    acc, n, term = g0, 1, g1
    while acc < threshold * total:
        acc += term
        term *= a
        n += 1
    return n


def receptive_field(config: NetworkConfig, model: MagicModel | None = None,
                    threshold: float = 0.999) -> ReceptiveField:
    """Receptive field extent in full-resolution pixels along the deepest path.

    Uses the usual recurrence ``rf += (k - 1) * jump`` where ``jump`` is the
    layer's downsampling factor; a 4x4 pool adds ``3 * jump``.  IIR layers
    make the vertical extent unbounded; the effective extent counts their
    impulse response up to ``threshold`` of its absolute sum, using the
    model's weights when given, otherwise the initial weights.
    """
    layers = lower(config).layers
    rf: dict[str, tuple[int, int | None, int]] = {}
    scale = {l.name: l.scale for l in layers}
    for l in layers:
        if not l.inputs:
            rf[l.name] = (1, 1, 1)
            continue
        ins = [rf[n] for n in l.inputs]
        h = max(r[0] for r in ins)
        v = None if any(r[1] is None for r in ins) else max(r[1] for r in ins)
        ev = max(r[2] for r in ins)
        jump = scale[l.inputs[0]]
        if l.kind == "conv":
            h += (l.kw - 1) * jump
            ev += (l.kh - 1) * jump
            v = None if v is None else v + (l.kh - 1) * jump
        elif l.kind == "pool":
            h += 3 * jump
            ev += 3 * jump
            v = None if v is None else v + 3 * jump
        elif l.kind == "iir":
            if model is not None:
                w = [model.params[n].data.astype(np.float64) for n in l.params]
                taps = max(iir_effective_taps(a, b, c, threshold) for a, b, c in zip(*w))
            else:
                taps = iir_effective_taps(*IIR_INIT, threshold)
            ev += (taps - 1) * jump
            v = None
        rf[l.name] = (h, v, ev)
    h, v, ev = rf[layers[-1].name]
    return ReceptiveField(h, v, ev, threshold)


# ---------------------------------------------------------------------------
# shift-sum multipliers

@dataclass(frozen=True)
class ShiftSum:
    value: float
    terms: tuple[tuple[int, int], ...]   # (sign, exponent) pairs, largest term first
    abs_error: float
    rel_error: float


@lru_cache(maxsize=None)
def _shift_table(terms: int, lo: int, hi: int):
    """Every value reachable with <= ``terms`` signed powers of two.

    For values with several representations the preferred one is kept:
    fewer terms, then smaller term magnitudes (largest term compared first).
    """
    atoms = [(s, e) for e in range(hi, lo - 1, -1) for s in (1, -1)]
    best: dict[float, tuple] = {}
    for n in range(terms + 1):
        for combo in itertools.combinations_with_replacement(atoms, n):
            rep = tuple(sorted(combo, key=lambda t: (-t[1], -t[0])))
            value = math.fsum(s * 2.0 ** e for s, e in rep)
            # largest term first: a smaller largest exponent means smaller magnitudes
            key = (n, tuple(e for _, e in rep))
            if value not in best or key < best[value][0]:
                best[value] = (key, rep)
    values = np.array(sorted(best))
    reps = [best[v][1] for v in values]
    rank_order = sorted(range(len(values)), key=lambda i: best[values[i]][0])
    rank = np.empty(len(values), dtype=np.int64)
    rank[rank_order] = np.arange(len(values))
    return values, reps, rank


def _nearest(w: np.ndarray, values: np.ndarray, rank: np.ndarray) -> np.ndarray:
    idx = np.clip(np.searchsorted(values, w), 1, len(values) - 1)
    lo, hi = idx - 1, idx
    dlo = np.abs(w - values[lo])
    dhi = np.abs(values[hi] - w)
    pick_hi = (dhi < dlo) | ((dhi == dlo) & (rank[hi] < rank[lo]))
    return np.where(pick_hi, hi, lo)


def shift_sum_approx(w: float, terms: int = 2, exp_range: tuple[int, int] = (-15, 0)) -> ShiftSum:
    """Closest sum of at most ``terms`` signed powers of two 2**e, e in ``exp_range``."""
    if not 0 <= terms <= 3:
        raise ConfigError(f"terms={terms} outside 0..3")
    if abs(w) > 1:
        raise ConfigError(f"|w|={abs(w)} > 1; normalize weights first")
    if w == 0:
        return ShiftSum(0.0, (), 0.0, 0.0)
    values, reps, rank = _shift_table(terms, exp_range[0], exp_range[1])
    i = int(_nearest(np.array([w]), values, rank)[0])
    v = float(values[i])
    err = abs(w - v)
    return ShiftSum(v, reps[i], err, err / abs(w))


def shift_sum_array(w: np.ndarray, terms: int, exp_range: tuple[int, int] = (-15, 0)) -> np.ndarray:
    """Vectorized :func:`shift_sum_approx` with a power-of-two per-tensor scale.

    Tensors whose largest magnitude exceeds 1 are divided by the next power of
    two first (a pure shift), approximated, and scaled back.
    """
    w = np.asarray(w, dtype=np.float64)
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    shift = max(0, math.ceil(math.log2(peak))) if peak > 1 else 0
    scale = 2.0 ** shift
    values, _, rank = _shift_table(terms, exp_range[0], exp_range[1])
    q = values[_nearest((w / scale).ravel(), values, rank)].reshape(w.shape)
    return q * scale


def quantize_model(model: MagicModel, terms: int) -> MagicModel:
    """Copy of ``model`` with every conv kernel and IIR weight shift-sum approximated."""
    q = model.copy()
    for name, p in q.params.items():
        if name.endswith(".w") or ".iir." in name:
            p.data = shift_sum_array(p.data, terms).astype(p.data.dtype)
    return q


def quantized_forward_delta(model: MagicModel, images, terms: int) -> float:
    """PSNR (dB) of the shift-sum model's outputs against the float model's."""
    from .data import psnr

    ref = np.stack([forward(model, im).data for im in images])
    qm = quantize_model(model, terms)
    got = np.stack([forward(qm, im).data for im in images])
    return psnr(got, ref)


# ---------------------------------------------------------------------------
# rendering

def _fmt_frac(x: Fraction) -> str:
    return f"{float(x):.6g}"


def report_text(r: CostReport) -> str:
    hw = r.hw
    out = [
        f"config: {r.config_name}",
        f"hardware: {hw.width}x{hw.height} @ {hw.fps} fps, clock {hw.clock_hz:.6g} Hz,"
        f" {hw.activation_bits}-bit activations, {hw.weight_bits}-bit weights",
        f"line_buffer_bits: {r.line_buffer_bits}",
        f"  fir_window_bits: {r.fir_bits}",
        f"  iir_state_bits: {r.iir_bits}",
        f"  skip_fifo_bits: {r.skip_bits}",
        f"staging_bits: {r.staging_bits}",
        f"total_memory_bits: {r.total_memory_bits}",
        f"parameter_bits: {r.parameter_bits}",
        f"macs_per_pixel: {_fmt_frac(r.macs_per_full_pixel)}",
        f"macs_per_second: {_fmt_frac(r.macs_per_second)}",
        f"macs_per_clock: {_fmt_frac(r.macs_per_clock)}",
        f"latency_lines: {r.latency_lines}",
        f"receptive_field: {r.receptive_field.describe()}",
    ]
    for s in r.skips:
        out.append(f"skip {s.name}: span={s.span_lines} lines, rows={s.rows_held}, {s.channels} ch,"
                   f" {s.bits_per_sample} b/sample, bits={s.buffer_bits} (raw {s.raw_bits},"
                   f" dpcm row headers {s.dpcm_header_bits})")
    return "\n".join(out) + "\n"


CSV_FIELDS = ("layer", "kind", "scale", "delay_lines", "buffer_lines", "buffer_bits",
              "staging_bits", "macs_per_pixel", "macs_per_full_pixel")


def report_csv(r: CostReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    skip_bits = {s.name: s.buffer_bits for s in r.skips}
    for l in r.layers:
        w.writerow([l.name, l.kind, l.scale, l.delay_lines, l.buffer_lines,
                    skip_bits.get(l.name, l.buffer_bits), l.staging_bits, l.macs_per_pixel,
                    _fmt_frac(l.macs_per_full_pixel)])
    return buf.getvalue()


def compare_text(a: CostReport, b: CostReport) -> str:
    rows = [
        ("line_buffer_bits", a.line_buffer_bits, b.line_buffer_bits),
        ("total_memory_bits", a.total_memory_bits, b.total_memory_bits),
        ("latency_lines", a.latency_lines, b.latency_lines),
        ("macs_per_pixel", _fmt_frac(a.macs_per_full_pixel), _fmt_frac(b.macs_per_full_pixel)),
        ("vertical_rf", a.receptive_field.vertical or "unbounded",
         b.receptive_field.vertical or "unbounded"),
    ]
    width = max(len(a.config_name), len(b.config_name), 12)
    out = [f"{'metric':<20} {a.config_name:>{width}} {b.config_name:>{width}}"]
    for name, x, y in rows:
        out.append(f"{name:<20} {x!s:>{width}} {y!s:>{width}}")
    return "\n".join(out) + "\n"
