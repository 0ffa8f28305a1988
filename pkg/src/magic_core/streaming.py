"""Raster-scan, line-by-line execution with explicit line buffers.

Timing model: one tick per full-resolution input line.  A layer at
downsampling factor ``s`` emits its row ``r`` at tick ``s*r + D`` where ``D``
is the layer's delay from :func:`plan_schedule`.  Contributions to ``D``:

* FIR with vertical extent K at factor s: ``(K // 2) * s`` lines
* 4x max-pool from factor s to 4s: ``3 * s`` lines (waiting for the 4th row)
* IIR, pointwise, elementwise, nearest upsample: 0
* skip FIFO: whatever aligns it with the path it bypasses

Upsampling and skip FIFOs are paced to that schedule; every other layer runs
as soon as its inputs are present, which lands on the same ticks.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import NetworkConfig
from .errors import InputError, PlannerError, UsageError
from .fileio import atomic_write_text
from .model import Layer, MagicModel, lower, prepare_input


@dataclass(frozen=True)
class LayerPlan:
    name: str
    kind: str
    scale: int
    in_channels: int
    channels: int
    vertical_extent: int
    delay: int              # contribution in full-resolution lines
    delay_out: int          # tick offset of this layer's row 0
    lines_buffered: int     # rows held at this layer's buffer scale
    buffer_width: int       # samples per channel per buffered row
    buffer_samples: int     # counted line-buffer storage (FIR window, IIR state, skip FIFO)
    staging_samples: int    # pool accumulator / upsample hold row


@dataclass(frozen=True)
class SkipPlan:
    scale_index: int
    factor: int
    layer: str
    span_lines: int         # full-resolution lines the FIFO bridges
    rows_held: int
    channels: int
    width: int
    buffer_samples: int


@dataclass(frozen=True)
class LinePlan:
    width: int
    layers: tuple[LayerPlan, ...]
    skips: tuple[SkipPlan, ...]
    total_delay: int
    buffer_samples: int
    staging_samples: int

    def layer(self, name: str) -> LayerPlan:
        for lp in self.layers:
            if lp.name == name:
                return lp
        raise KeyError(name)

    @property
    def by_name(self) -> dict[str, LayerPlan]:
        return {lp.name: lp for lp in self.layers}


def padded_width(config: NetworkConfig, width: int) -> int:
    m = config.spatial_multiple
    return -(-width // m) * m


def plan_schedule(config: NetworkConfig, width: int = 1920) -> LinePlan:
    """Per-layer delays and buffer sizes for a frame ``width`` pixels wide."""
    layers = lower(config).layers
    width = padded_width(config, width)
    chans = {l.name: l.channels for l in layers}
    scale = {l.name: l.scale for l in layers}

    def delays(spans: dict[str, int]) -> dict[str, int]:
        d: dict[str, int] = {}
        for l in layers:
            base = max((d[n] for n in l.inputs), default=0)
            d[l.name] = base + _contribution(l, scale) + spans.get(l.name, 0)
        return d

    # first pass without skip alignment, then size each FIFO to close the gap
    d = delays({})
    spans: dict[str, int] = {}
    consumers = {n: [l for l in layers if n in l.inputs] for n in chans}
    for l in layers:
        if l.kind != "skip":
            continue
        chain = l.name
        while True:
            nxt = consumers[chain]
            if len(nxt) != 1:
                raise PlannerError(f"skip {l.name}: expected a single consumer chain")
            if nxt[0].kind == "concat":
                merge = nxt[0]
                break
            chain = nxt[0].name
        other = [n for n in merge.inputs if n != chain][0]
        spans[l.name] = d[other] - d[chain]
        if spans[l.name] < 0 or spans[l.name] % l.scale:
            raise PlannerError(f"skip {l.name}: span {spans[l.name]} not a non-negative multiple of {l.scale}")
    d = delays(spans)

    plans = []
    skip_plans = []
    for l in layers:
        cin = chans[l.inputs[0]] if l.inputs else l.channels
        in_scale = scale[l.inputs[0]] if l.inputs else l.scale
        lines = 0
        buf_w = width // l.scale
        staging = 0
        extent = 1
        if l.kind == "conv":
            extent = l.kh
            lines = l.kh - 1
            buf_c = cin
        elif l.kind == "iir":
            lines = 1
            buf_c = l.channels
        elif l.kind == "skip":
            lines = spans[l.name] // l.scale
            buf_c = l.channels
            skip_plans.append(SkipPlan(l.skip_index, l.scale, l.name, spans[l.name], lines,
                                       l.channels, buf_w, lines * buf_c * buf_w))
        elif l.kind == "pool":
            extent = 4
            buf_c = l.channels
            staging = l.channels * (width // l.scale)
        elif l.kind == "up":
            buf_c = l.channels
            staging = l.channels * (width // in_scale)
        else:
            buf_c = 0
        plans.append(LayerPlan(l.name, l.kind, l.scale, cin, l.channels, extent,
                               _contribution(l, scale) + spans.get(l.name, 0), d[l.name],
                               lines, buf_w, lines * buf_c * buf_w, staging))
    return LinePlan(width, tuple(plans), tuple(skip_plans), d[layers[-1].name],
                    sum(p.buffer_samples for p in plans),
                    sum(p.staging_samples for p in plans))


def _contribution(layer: Layer, scale: dict[str, int]) -> int:
    if layer.kind == "conv":
        return (layer.kh // 2) * layer.scale
    if layer.kind == "pool":
        return layer.scale - scale[layer.inputs[0]]
    return 0


# ---------------------------------------------------------------------------
# streaming nodes

class _Node:
    paced = False

    def __init__(self, layer: Layer, plan: LayerPlan, n_inputs: int):
        self.layer = layer
        self.plan = plan
        self.queues = [deque() for _ in range(n_inputs)]
        self.emitted = 0
        self.peak_rows = 0
        self.peak_staging = 0
        self.total_rows = None      # rows this node will emit for the frame

    def held_rows(self) -> int:
        return 0

    def staged_rows(self) -> int:
        return 0

    def step(self, now: int, final: bool) -> list:
        raise NotImplementedError


class _RowWise(_Node):
    def __init__(self, layer, plan, n_inputs, fn):
        super().__init__(layer, plan, n_inputs)
        self.fn = fn

    def step(self, now, final):
        out = []
        while all(self.queues):
            rows = [q.popleft() for q in self.queues]
            idx = rows[0][0]
            if any(r[0] != idx for r in rows):
                raise PlannerError(f"{self.layer.name}: misaligned rows {[r[0] for r in rows]}")
            out.append((idx, self.fn(*[r[1] for r in rows])))
        return out


class _Fir(_Node):
    def __init__(self, layer, plan, w, b):
        super().__init__(layer, plan, 1)
        self.w, self.b = w, b
        self.h = layer.kh // 2
        self.pw = layer.kw // 2
        self.ring: deque = deque()
        self.last_in = -1
        self.in_rows = None     # known once the frame is flushed

    def held_rows(self):
        return len(self.ring)

    def _row(self, i, like):
        if 0 <= i <= self.last_in:
            for idx, r in self.ring:
                if idx == i:
                    return r
            raise PlannerError(f"{self.layer.name}: row {i} evicted before use")
        return np.zeros_like(like)

    def _emit(self, o):
        like = self.ring[-1][1]
        slab = np.stack([self._row(i, like) for i in range(o - self.h, o + self.h + 1)], axis=1)
        slab = ad.pad_hw(slab[None], 0, self.pw)
        self.emitted += 1
        return o, ad.conv_padded(slab, self.w, self.b, self.layer.groups, 1)[0, :, 0]

    def step(self, now, final):
        out = []
        q = self.queues[0]
        while q:
            idx, row = q.popleft()
            self.ring.append((idx, row))
            self.last_in = idx
            while self.emitted + self.h <= self.last_in:
                out.append(self._emit(self.emitted))
            while len(self.ring) > self.layer.kh - 1:
                self.ring.popleft()
        if final:
            while self.emitted < self.in_rows:
                out.append(self._emit(self.emitted))
        return out


class _Iir(_Node):
    def __init__(self, layer, plan, w1, w2, w3):
        super().__init__(layer, plan, 1)
        self.c = [w[:, None] for w in (w1, w2, w3)]
        self.state = None

    def held_rows(self):
        return 0 if self.state is None else 1

    def step(self, now, final):
        out = []
        q = self.queues[0]
        while q:
            idx, row = q.popleft()
            if self.state is None:
                self.state = np.zeros_like(row)
            h, self.state = ad.iir_row(self.state, row, *self.c)
            out.append((idx, h))
        return out


class _Pool(_Node):
    def __init__(self, layer, plan):
        super().__init__(layer, plan, 1)
        self.acc = None

    def staged_rows(self):
        return 0 if self.acc is None else 1

    def step(self, now, final):
        out = []
        q = self.queues[0]
        while q:
            idx, row = q.popleft()
            c, w = row.shape
            hmax = row.reshape(c, w // 4, 4).max(axis=-1)
            self.acc = hmax if idx % 4 == 0 else np.maximum(self.acc, hmax)
            if idx % 4 == 3:
                out.append((idx // 4, self.acc))
                self.acc = None
        return out


class _Up(_Node):
    paced = True

    def __init__(self, layer, plan):
        super().__init__(layer, plan, 1)
        self.hold = None  # (coarse index, row)

    def staged_rows(self):
        return 0 if self.hold is None else 1

    def step(self, now, final):
        out = []
        q = self.queues[0]
        s, d = self.layer.scale, self.plan.delay_out
        while True:
            if self.hold is None:
                if not q:
                    break
                j, row = q.popleft()
                self.hold = (j, np.repeat(row, 4, axis=-1))
            j, fine = self.hold
            r = self.emitted
            if r // 4 != j:
                raise PlannerError(f"{self.layer.name}: fine row {r} vs held coarse row {j}")
            if not final and s * r + d > now:
                break
            out.append((r, fine))
            self.emitted += 1
            if self.emitted % 4 == 0:
                self.hold = None
        return out


class _SkipFifo(_Node):
    paced = True

    def __init__(self, layer, plan, codec):
        super().__init__(layer, plan, 1)
        self.codec = codec
        self.fifo: deque = deque()

    def held_rows(self):
        return len(self.fifo)

    def step(self, now, final):
        q = self.queues[0]
        while q:
            idx, row = q.popleft()
            if self.codec is None:
                self.fifo.append((idx, row, None))
            else:
                self.fifo.append((idx, self.codec.encode(np.clip(row, 0, 1)[None]), row.dtype))
        out = []
        s, d = self.layer.scale, self.plan.delay_out
        while self.fifo and (final or s * self.fifo[0][0] + d <= now):
            idx, payload, dtype = self.fifo.popleft()
            out.append((idx, payload if dtype is None else self.codec.decode(payload, dtype)[0]))
        return out


@dataclass
class LayerTrace:
    name: str
    kind: str
    delay: int
    delay_out: int
    buffered_lines: int
    peak_rows: int
    peak_samples: int
    peak_staging_samples: int
    first_emit_tick: int | None = None


class StreamContext:
    """Per-frame streaming state for one model.

    Push rows top to bottom with :meth:`push_line`, then :meth:`flush`.
    """

    def __init__(self, model: MagicModel, width: int, height: int | None = None,
                 check_schedule: bool = True):
        cfg = model.config
        if width % cfg.spatial_multiple:
            raise InputError(f"stream width {width} must be a multiple of {cfg.spatial_multiple}")
        self.model = model
        self.width = width
        self.height = height
        self.plan = plan_schedule(cfg, width)
        self.check_schedule = check_schedule
        self.rows_in = 0
        self.rows_out = 0
        self.state = "open"
        self.first_output_at: int | None = None
        self.peak_total = 0
        self.peak_total_staging = 0
        self.dtype = model.dtype
        p = {n: prm.data for n, prm in model.params.items()}
        plans = self.plan.by_name
        self.nodes: list[_Node] = []
        self.index: dict[str, _Node] = {}
        self.consumers: dict[str, list[tuple[_Node, int]]] = {}
        for layer in model.layers:
            node = self._make(layer, plans[layer.name], p)
            self.nodes.append(node)
            self.index[layer.name] = node
            for k, src in enumerate(layer.inputs):
                self.consumers.setdefault(src, []).append((node, k))
            self.consumers.setdefault(layer.name, [])
        self.traces = {n.layer.name: LayerTrace(n.layer.name, n.layer.kind, n.plan.delay, n.plan.delay_out,
                                                n.plan.lines_buffered, 0, 0, 0)
                       for n in self.nodes}

    def _make(self, layer: Layer, plan: LayerPlan, p) -> _Node:
        k = layer.kind
        dt = self.model.dtype
        if k == "input":
            return _RowWise(layer, plan, 1, lambda x: x)
        if k == "conv":
            w, b = (p[n].astype(dt, copy=False) for n in layer.params)
            if layer.kh > 1:
                return _Fir(layer, plan, w, b)
            pw, groups = layer.kw // 2, layer.groups

            def pointwise(x, w=w, b=b, pw=pw, groups=groups):
                slab = ad.pad_hw(x[None, :, None, :], 0, pw)
                return ad.conv_padded(slab, w, b, groups, 1)[0, :, 0]
            return _RowWise(layer, plan, 1, pointwise)
        if k == "iir":
            return _Iir(layer, plan, *(p[n].astype(dt, copy=False) for n in layer.params))
        if k == "relu":
            zero = np.zeros((), dtype=dt)
            return _RowWise(layer, plan, 1, lambda x: np.maximum(x, zero))
        if k == "add":
            return _RowWise(layer, plan, 2, lambda a, b: a + b)
        if k == "concat":
            return _RowWise(layer, plan, 2, lambda a, b: np.concatenate([a, b], axis=0))
        if k == "clamp":
            return _RowWise(layer, plan, 1, lambda x: np.clip(x, 0, 1))
        if k == "pool":
            return _Pool(layer, plan)
        if k == "up":
            return _Up(layer, plan)
        if k == "skip":
            return _SkipFifo(layer, plan, self.model.codecs.get(layer.skip_index))
        raise PlannerError(f"no streaming node for layer kind {k!r}")

    # -- driving ---------------------------------------------------------

    def _prepare_row(self, row) -> np.ndarray:
        cfg = self.model.config
        row = np.asarray(row, dtype=self.dtype)
        if row.ndim != 2:
            raise InputError(f"row must be (channels, width), got shape {row.shape}")
        c, w = row.shape
        if w != self.width:
            raise InputError(f"row width {w} != configured width {self.width}")
        if c not in (cfg.in_channels, cfg.n_active_in):
            raise InputError(f"row channels {c} != in_channels {cfg.in_channels}")
        if c < cfg.in_channels:
            row = np.concatenate([row, np.zeros((cfg.in_channels - c, w), dtype=self.dtype)])
        return row

    def push_line(self, row) -> list[np.ndarray]:
        """Feed the next input row; returns output rows that became ready."""
        if self.state != "open":
            raise UsageError(f"push_line on a {self.state} stream")
        if self.height is not None and self.rows_in >= self.height:
            raise UsageError(f"frame complete: {self.height} rows already pushed")
        row = self._prepare_row(row)
        now = self.rows_in
        self.nodes[0].queues[0].append((now, row))
        self.rows_in += 1
        out = self._tick(now, final=False)
        if out and self.first_output_at is None:
            self.first_output_at = now
        return out

    def flush(self) -> list[np.ndarray]:
        """Finish the frame: zero-pad below the last row and drain every layer."""
        if self.state == "flushed":
            raise UsageError("stream already flushed")
        if self.state != "open" or self.rows_in == 0:
            self.state = "error"
            raise UsageError("flush before any push_line")
        m = self.model.config.spatial_multiple
        if self.rows_in % m:
            self.state = "error"
            raise UsageError(f"frame height {self.rows_in} is not a multiple of {m}")
        if self.height is not None and self.rows_in != self.height:
            self.state = "error"
            raise UsageError(f"flush after {self.rows_in} of {self.height} rows")
        for node in self.nodes:
            if isinstance(node, _Fir):
                node.in_rows = self.rows_in // node.layer.scale
        out = self._tick(self.rows_in, final=True)
        self.state = "flushed"
        if self.rows_out != self.rows_in:
            raise PlannerError(f"emitted {self.rows_out} rows for {self.rows_in} input rows")
        return out

    def _tick(self, now: int, final: bool) -> list[np.ndarray]:
        result = []
        for node in self.nodes:
            rows = node.step(now, final)
            if rows:
                tr = self.traces[node.layer.name]
                if tr.first_emit_tick is None:
                    tr.first_emit_tick = now
                if self.check_schedule and not final:
                    s, d = node.layer.scale, node.plan.delay_out
                    for idx, _ in rows:
                        if s * idx + d != now:
                            raise PlannerError(f"{node.layer.name}: row {idx} at tick {now},"
                                               f" schedule says {s * idx + d}")
            targets = self.consumers[node.layer.name]
            for idx, row in rows:
                for consumer, k in targets:
                    consumer.queues[k].append((idx, row))
            if not targets:
                for idx, row in rows:
                    if idx != self.rows_out:
                        raise PlannerError(f"output row {idx} emitted out of order (expected {self.rows_out})")
                    self.rows_out += 1
                    result.append(row)
        if not final:
            self._account()
        return result

    def _account(self) -> None:
        total = 0
        staging = 0
        for node in self.nodes:
            lp = node.plan
            held = node.held_rows()
            staged = node.staged_rows()
            tr = self.traces[node.layer.name]
            per_row = lp.buffer_samples // lp.lines_buffered if lp.lines_buffered else 0
            samples = held * per_row
            stage = staged and lp.staging_samples
            tr.peak_rows = max(tr.peak_rows, held)
            tr.peak_samples = max(tr.peak_samples, samples)
            tr.peak_staging_samples = max(tr.peak_staging_samples, stage)
            total += samples
            staging += stage
            if held > lp.lines_buffered:
                raise PlannerError(f"{node.layer.name}: holds {held} rows, plan allows {lp.lines_buffered}")
            # inter-layer queues must drain each tick except residual taps,
            # which alias rows still inside the upstream FIR window
            for k, q in enumerate(node.queues):
                if q and not (node.layer.kind == "add" and k == 1):
                    raise PlannerError(f"{node.layer.name}: {len(q)} row(s) stranded on input {k}")
        self.peak_total = max(self.peak_total, total)
        self.peak_total_staging = max(self.peak_total_staging, staging)
        if total > self.plan.buffer_samples:
            raise PlannerError(f"buffered {total} samples > plan {self.plan.buffer_samples}")

    @property
    def failed(self) -> bool:
        return self.state == "error"

    def trace_text(self) -> str:
        lines = [f"# stream trace width={self.width} rows_in={self.rows_in}"
                 f" total_delay={self.plan.total_delay} first_output_at={self.first_output_at}"
                 f" peak_samples={self.peak_total} plan_samples={self.plan.buffer_samples}"]
        for tr in self.traces.values():
            lines.append(f"layer={tr.name} kind={tr.kind} delay={tr.delay} delay_out={tr.delay_out}"
                         f" buffered_lines={tr.buffered_lines} peak_rows={tr.peak_rows}"
                         f" peak_samples={tr.peak_samples} peak_staging={tr.peak_staging_samples}")
        return "\n".join(lines) + "\n"

    def write_trace(self, path: str | Path) -> Path:
        return atomic_write_text(path, self.trace_text())


def push_line(ctx: StreamContext, row) -> list[np.ndarray]:
    return ctx.push_line(row)


def flush(ctx: StreamContext) -> list[np.ndarray]:
    return ctx.flush()


def stream_frame(model: MagicModel, frame: np.ndarray) -> tuple[np.ndarray, StreamContext]:
    """Stream one already padded (C, H, W) frame; returns output and context."""
    c, h, w = frame.shape
    ctx = StreamContext(model, w, h)
    rows = []
    for r in range(h):
        rows.extend(ctx.push_line(frame[:, r, :]))
    rows.extend(ctx.flush())
    return np.stack(rows, axis=1), ctx


def stream_infer(model: MagicModel, image) -> ad.Tensor:
    """Line-streamed inference with the same padding and cropping as forward()."""
    batched = (image.data if isinstance(image, ad.Tensor) else np.asarray(image)).ndim == 4
    x, (h, w) = prepare_input(model, image)
    outs = [stream_frame(model, frame)[0] for frame in x]
    out = np.stack(outs)[:, :, :h, :w]
    return ad.Tensor(out if batched else out[0])
