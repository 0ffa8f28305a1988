"""Build the encoder/decoder network from a config and run it on whole frames.

The network is lowered to a flat, topologically ordered list of
:class:`Layer` records.  Whole-frame :func:`forward` and the line-streaming
engine both interpret that same list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import NetworkConfig
from .dpcm import DpcmConfig, SkipCodec
from .errors import ConfigError

IIR_INIT = (0.5, 0.25, 0.25)
IIR_W1_BOUND = 0.99


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str                     # input conv iir relu add concat pool up skip clamp
    inputs: tuple[str, ...]
    scale: int                    # downsampling factor of the output rows
    channels: int                 # output channels
    kh: int = 1
    kw: int = 1
    groups: int = 1
    params: tuple[str, ...] = ()
    skip_index: int | None = None  # for kind == "skip": index into config.scales
    role: str = ""                # "residual" marks adds that tap a FIR window


class MagicModel:
    """Parameters plus the lowered layer list for one config."""

    def __init__(self, config: NetworkConfig, params: dict[str, ad.Parameter],
                 layers: list[Layer]):
        self.config = config
        self.params = params
        self.layers = layers
        self.codecs: dict[int, SkipCodec] = {}
        for s in config.skips:
            if s.quant_bits is not None:
                dcfg = (DpcmConfig(s.quant_bits, s.dpcm_bits, step=config.dpcm_step)
                        if s.dpcm else None)
                self.codecs[s.from_scale] = SkipCodec(s.quant_bits, dcfg)

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def parameters(self) -> list[ad.Parameter]:
        return list(self.params.values())

    def iir_params(self) -> list[ad.Parameter]:
        return [p for n, p in self.params.items() if n.endswith(".iir.w1")]

    def astype(self, dtype) -> "MagicModel":
        params = {n: ad.Parameter(p.data.astype(dtype), n, p.trainable, p.constraint)
                  for n, p in self.params.items()}
        return MagicModel(self.config, params, self.layers)

    def copy(self) -> "MagicModel":
        return self.astype(self.dtype)

    def float_skips(self) -> "MagicModel":
        """Same parameters (shared, not copied) with skip storage left unquantized.

        The quantized skip has a straight-through gradient, which is not the
        derivative of the quantized forward; finite-difference checks run on
        this variant instead.
        """
        m = MagicModel(self.config, self.params, self.layers)
        m.codecs = {}
        return m

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def project(self) -> None:
        for p in self.params.values():
            p.project()

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def run(self, x: ad.Tensor) -> ad.Tensor:
        """Execute the layer list on a (B, C, H, W) tensor of valid size."""
        return run_layers(self, x)


# ---------------------------------------------------------------------------
# lowering

SMALL_INIT = "fan_in:0.1"


class _Builder:
    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        self.layers: list[Layer] = []
        self.shapes: dict[str, tuple] = {}
        self.constraints: dict[str, tuple[float, float]] = {}
        self.inits: dict[str, str] = {}

    def add(self, layer: Layer) -> str:
        self.layers.append(layer)
        return layer.name

    def param(self, name: str, shape: tuple, init: str, constraint=None) -> str:
        self.shapes[name] = shape
        self.inits[name] = init
        if constraint is not None:
            self.constraints[name] = constraint
        return name

    def conv(self, name, src, scale, cin, cout, kh=1, kw=1, groups=1,
             weight_init="fan_in", bias_init="zero") -> str:
        w = self.param(f"{name}.w", (cout, cin // groups, kh, kw), weight_init)
        b = self.param(f"{name}.b", (cout,), bias_init)
        return self.add(Layer(name, "conv", (src,), scale, cout, kh, kw, groups, (w, b)))

    def relu(self, name, src, scale, c) -> str:
        return self.add(Layer(name, "relu", (src,), scale, c))

    def block(self, prefix, src, scale, c, spec) -> str:
        x = src
        k = spec.k
        if spec.kind == "group_conv":
            h = self.conv(f"{prefix}.spatial", x, scale, c, c, k, k, spec.groups)
            h = self.relu(f"{prefix}.spatial_act", h, scale, c)
        elif spec.kind == "depthwise_separable":
            h = self.conv(f"{prefix}.spatial", x, scale, c, c, k, k, c)
            h = self.relu(f"{prefix}.spatial_act", h, scale, c)
        elif spec.kind == "hybrid_fir_iir":
            h = self.conv(f"{prefix}.horiz", x, scale, c, c, 1, k, c)
            names = tuple(
                self.param(f"{prefix}.iir.{wn}", (c,), f"const:{v}",
                           (-IIR_W1_BOUND, IIR_W1_BOUND) if wn == "w1" else None)
                for wn, v in zip(("w1", "w2", "w3"), IIR_INIT))
            h = self.add(Layer(f"{prefix}.iir", "iir", (h,), scale, c, params=names))
            h = self.relu(f"{prefix}.spatial_act", h, scale, c)
        elif spec.kind == "pointwise":
            h = x
        else:  # pragma: no cover - rejected by validate()
            raise ConfigError(f"unknown block kind {spec.kind!r}")
        # a residual branch starts near zero so deep stacks keep unit-scale activations
        h = self.conv(f"{prefix}.pw", h, scale, c, c, weight_init=SMALL_INIT if spec.residual else "fan_in")
        if spec.residual:
            h = self.add(Layer(f"{prefix}.add", "add", (h, x), scale, c, role="residual"))
        return self.relu(f"{prefix}.out", h, scale, c)

    def build(self) -> list[Layer]:
        cfg = self.cfg
        x = self.add(Layer("input", "input", (), 1, cfg.in_channels))
        prev_c = cfg.in_channels
        skip_out: dict[int, str] = {}
        for i, sc in enumerate(cfg.scales):
            if i > 0:
                x = self.add(Layer(f"enc{i}.pool", "pool", (x,), sc.factor, prev_c))
            if prev_c != sc.channels:
                x = self.conv(f"enc{i}.proj", x, sc.factor, prev_c, sc.channels)
            for j, b in enumerate(sc.blocks):
                x = self.block(f"enc{i}.b{j}", x, sc.factor, sc.channels, b)
            prev_c = sc.channels
            skip = cfg.skip_at(i)
            if skip is not None and i < cfg.coarsest:
                # quantized storage holds [0, 1]; start the projection mid-range
                centre = "const:0.5" if skip.quant_bits is not None else "zero"
                s = self.conv(f"skip{i}.proj", x, sc.factor, sc.channels, skip.channels, bias_init=centre)
                skip_out[i] = self.add(Layer(f"skip{i}.store", "skip", (s,), sc.factor,
                                             skip.channels, skip_index=i))
        for i in range(cfg.coarsest - 1, -1, -1):
            sc = cfg.scales[i]
            x = self.add(Layer(f"dec{i}.up", "up", (x,), sc.factor, prev_c))
            if i in skip_out:
                skip = cfg.skip_at(i)
                e = self.conv(f"skip{i}.expand", skip_out[i], sc.factor, skip.channels, sc.channels)
                x = self.add(Layer(f"dec{i}.concat", "concat", (x, e), sc.factor, prev_c + sc.channels))
                x = self.conv(f"dec{i}.proj", x, sc.factor, prev_c + sc.channels, sc.channels)
            elif prev_c != sc.channels:
                x = self.conv(f"dec{i}.proj", x, sc.factor, prev_c, sc.channels)
            for j, b in enumerate(sc.blocks):
                x = self.block(f"dec{i}.b{j}", x, sc.factor, sc.channels, b)
            prev_c = sc.channels
        # start near mid-grey so the output clamp passes gradient from the first step
        x = self.conv("head", x, 1, prev_c, cfg.out_channels, weight_init=SMALL_INIT, bias_init="const:0.5")
        self.add(Layer("output", "clamp", (x,), 1, cfg.out_channels))
        return self.layers


def lower(config: NetworkConfig) -> _Builder:
    config.validate()
    b = _Builder(config)
    b.build()
    return b


def closed_form_parameter_count(config: NetworkConfig) -> int:
    """Parameter count from the config alone, without building anything."""
    config.validate()

    def block_params(c, spec):
        pw = c * c + c
        if spec.kind == "group_conv":
            return c * (c // spec.groups) * spec.k * spec.k + c + pw
        if spec.kind == "depthwise_separable":
            return c * spec.k * spec.k + c + pw
        if spec.kind == "hybrid_fir_iir":
            return c * spec.k + c + 3 * c + pw
        return pw

    total = 0
    prev = config.in_channels
    for sc in config.scales:
        if prev != sc.channels:
            total += prev * sc.channels + sc.channels
        total += sum(block_params(sc.channels, b) for b in sc.blocks)
        prev = sc.channels
    for i in range(config.coarsest - 1, -1, -1):
        sc = config.scales[i]
        skip = config.skip_at(i)
        if skip is not None:
            total += sc.channels * skip.channels + skip.channels       # compress
            total += skip.channels * sc.channels + sc.channels         # expand
            total += (prev + sc.channels) * sc.channels + sc.channels  # merge projection
        elif prev != sc.channels:
            total += prev * sc.channels + sc.channels
        total += sum(block_params(sc.channels, b) for b in sc.blocks)
        prev = sc.channels
    return total + prev * config.out_channels + config.out_channels


def build_model(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> MagicModel:
    """Lower ``config`` and initialize parameters deterministically from ``seed``."""
    b = lower(config)
    rng = np.random.default_rng(seed)
    params: dict[str, ad.Parameter] = {}
    for name, shape in b.shapes.items():
        init = b.inits[name]
        if init.startswith("fan_in"):
            # He-uniform (variance 2 / fan_in), optionally scaled: "fan_in:0.1"
            gain = float(init.split(":", 1)[1]) if ":" in init else 1.0
            bound = gain * math.sqrt(6.0 / int(np.prod(shape[1:])))
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "zero":
            data = np.zeros(shape)
        else:
            data = np.full(shape, float(init.split(":", 1)[1]))
        params[name] = ad.Parameter(data.astype(dtype), name, True, b.constraints.get(name))
    return MagicModel(config, params, b.layers)


# ---------------------------------------------------------------------------
# execution

def run_layers(model: MagicModel, x: ad.Tensor) -> ad.Tensor:
    values: dict[str, ad.Tensor] = {}
    p = model.params
    for layer in model.layers:
        ins = [values[n] for n in layer.inputs]
        k = layer.kind
        if k == "input":
            out = x
        elif k == "conv":
            w, b = (p[n] for n in layer.params)
            out = ad.conv2d_grouped(ins[0], w, b, layer.groups, layer.kh, layer.kw)
        elif k == "iir":
            out = ad.iir_vertical(ins[0], *(p[n] for n in layer.params))
        elif k == "relu":
            out = ad.relu(ins[0])
        elif k == "add":
            out = ad.residual_add(ins[0], ins[1])
        elif k == "concat":
            out = ad.concat_channels(ins[0], ins[1])
        elif k == "pool":
            out = ad.maxpool4(ins[0])
        elif k == "up":
            out = ad.upsample_nearest4(ins[0])
        elif k == "skip":
            codec = model.codecs.get(layer.skip_index)
            out = ins[0] if codec is None else ad.clamp_ste(ins[0], codec.roundtrip)
        elif k == "clamp":
            out = ad.clamp01(ins[0])
        else:  # pragma: no cover
            raise ConfigError(f"unknown layer kind {k!r}")
        values[layer.name] = out
    return values[model.layers[-1].name]


def prepare_input(model: MagicModel, image) -> tuple[np.ndarray, tuple[int, int]]:
    """Validate channels, zero-fill inactive ones, reflect-pad H and W.

    Accepts (C, H, W) or (B, C, H, W).  Returns the padded batch and the
    original spatial size for cropping.
    """
    cfg = model.config
    arr = image.data if isinstance(image, ad.Tensor) else np.asarray(image)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ConfigError(f"image must be (C, H, W) or (B, C, H, W), got shape {arr.shape}")
    c = arr.shape[1]
    if c not in (cfg.in_channels, cfg.n_active_in):
        raise ConfigError(f"image channels={c} but config expects in_channels={cfg.in_channels}"
                          f" (or {cfg.n_active_in} active)")
    arr = arr.astype(model.dtype, copy=False)
    if c < cfg.in_channels:
        fill = np.zeros((arr.shape[0], cfg.in_channels - c) + arr.shape[2:], dtype=arr.dtype)
        arr = np.concatenate([arr, fill], axis=1)
    h, w = arr.shape[2:]
    m = cfg.spatial_multiple
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        mode = "reflect" if h > ph and w > pw and h > 1 and w > 1 else "edge"
        arr = np.pad(arr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)
    return np.ascontiguousarray(arr), (h, w)


def forward(model: MagicModel, image) -> ad.Tensor:
    """Whole-frame inference; output has the input's spatial size, values in [0, 1]."""
    batched = (image.data if isinstance(image, ad.Tensor) else np.asarray(image)).ndim == 4
    x, (h, w) = prepare_input(model, image)
    out = model.run(ad.Tensor(x)).data[:, :, :h, :w]
    return ad.Tensor(out if batched else out[0])
