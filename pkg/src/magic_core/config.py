"""Declarative network topology description."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .errors import ConfigError

BLOCK_KINDS = ("group_conv", "depthwise_separable", "hybrid_fir_iir", "pointwise")
MAX_IMAGE_CHANNELS = 6
POOL = 4


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    k: int = 3
    groups: int = 1          # group_conv only
    residual: bool = True


@dataclass(frozen=True)
class ScaleSpec:
    factor: int              # downsampling relative to full resolution
    channels: int
    blocks: tuple[BlockSpec, ...]


@dataclass(frozen=True)
class SkipSpec:
    from_scale: int          # index into NetworkConfig.scales
    to_scale: int
    channels: int            # width after the pointwise compression
    dpcm: bool = False
    dpcm_bits: int = 8       # residual bits when dpcm is on
    quant_bits: int | None = None   # fixed-point storage width; required for dpcm


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    scales: tuple[ScaleSpec, ...]
    skips: tuple[SkipSpec, ...] = ()
    in_channels: int = 6
    out_channels: int = 6
    active_in: int | None = None    # leading channels carrying data; rest zero-filled
    active_out: int | None = None
    dpcm_step: int | None = None    # override for the residual quantizer step

    @property
    def n_active_in(self) -> int:
        return self.in_channels if self.active_in is None else self.active_in

    @property
    def n_active_out(self) -> int:
        return self.out_channels if self.active_out is None else self.active_out

    @property
    def coarsest(self) -> int:
        return len(self.scales) - 1

    @property
    def spatial_multiple(self) -> int:
        return self.scales[-1].factor

    def skip_at(self, scale: int) -> SkipSpec | None:
        for s in self.skips:
            if s.from_scale == scale:
                return s
        return None

    # -- validation ------------------------------------------------------

    def validate(self) -> "NetworkConfig":
        if not 1 <= self.in_channels <= MAX_IMAGE_CHANNELS:
            raise ConfigError(f"in_channels={self.in_channels} outside 1..{MAX_IMAGE_CHANNELS}")
        if not 1 <= self.out_channels <= MAX_IMAGE_CHANNELS:
            raise ConfigError(f"out_channels={self.out_channels} outside 1..{MAX_IMAGE_CHANNELS}")
        if not 1 <= self.n_active_in <= self.in_channels:
            raise ConfigError(f"active_in={self.active_in} outside 1..in_channels")
        if not 1 <= self.n_active_out <= self.out_channels:
            raise ConfigError(f"active_out={self.active_out} outside 1..out_channels")
        if not self.scales:
            raise ConfigError("config has no scales")
        if len(self.scales) > 3:
            raise ConfigError(f"{len(self.scales)} scales; the pooling chain is 1 -> 4 -> 16")
        for i, sc in enumerate(self.scales):
            if sc.factor != POOL ** i:
                raise ConfigError(f"scale {i}: factor {sc.factor}, expected {POOL ** i} (chain 1 -> 4 -> 16)")
            if sc.channels < 1:
                raise ConfigError(f"scale {i}: channels must be positive")
            if not sc.blocks:
                raise ConfigError(f"scale {i}: no blocks")
            for j, b in enumerate(sc.blocks):
                where = f"scale {i} block {j}"
                if b.kind not in BLOCK_KINDS:
                    raise ConfigError(f"{where}: unknown block kind {b.kind!r}")
                if b.kind != "pointwise" and (b.k < 1 or b.k % 2 == 0):
                    raise ConfigError(f"{where}: kernel size {b.k} must be odd and positive")
                if b.kind == "group_conv" and (b.groups < 1 or sc.channels % b.groups):
                    raise ConfigError(f"{where}: channels={sc.channels} not divisible by groups={b.groups}")
                if b.kind == "hybrid_fir_iir" and (i != self.coarsest or i == 0):
                    raise ConfigError(f"{where}: hybrid_fir_iir is only allowed at the coarsest (bottleneck) scale")
        seen = set()
        for s in self.skips:
            if s.from_scale != s.to_scale:
                raise ConfigError(f"skip {s.from_scale}->{s.to_scale}: skips join equal resolutions")
            if not 0 <= s.from_scale < self.coarsest:
                raise ConfigError(f"skip at scale {s.from_scale}: must be a non-bottleneck scale")
            if s.from_scale in seen:
                raise ConfigError(f"duplicate skip at scale {s.from_scale}")
            seen.add(s.from_scale)
            if s.channels < 1:
                raise ConfigError(f"skip at scale {s.from_scale}: channels must be positive")
            if s.dpcm:
                if s.quant_bits is None:
                    raise ConfigError(f"skip at scale {s.from_scale}: dpcm needs quant_bits")
                if not 2 <= s.dpcm_bits <= s.quant_bits + 1:
                    raise ConfigError(f"skip at scale {s.from_scale}: dpcm_bits={s.dpcm_bits}"
                                      f" outside 2..quant_bits+1={s.quant_bits + 1}")
            if s.quant_bits is not None and not 1 <= s.quant_bits <= 24:
                raise ConfigError(f"skip at scale {s.from_scale}: quant_bits={s.quant_bits} outside 1..24")
        return self

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        try:
            scales = tuple(
                ScaleSpec(factor=s["factor"], channels=s["channels"],
                          blocks=tuple(BlockSpec(**b) for b in s["blocks"]))
                for s in d["scales"])
            skips = tuple(SkipSpec(**s) for s in d.get("skips", ()))
            rest = {k: v for k, v in d.items() if k not in ("scales", "skips")}
            return cls(scales=scales, skips=skips, **rest)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed config: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None


def reference_config(active_in: int | None = None, active_out: int | None = None) -> NetworkConfig:
    """MagIC-ref: 24/48/96 channels, hybrid FIR-IIR bottleneck, compressed skips."""
    s0 = ScaleSpec(1, 24, (BlockSpec("group_conv", 3, groups=3),) * 2)
    s1 = ScaleSpec(4, 48, (BlockSpec("depthwise_separable", 3),) * 2)
    s2 = ScaleSpec(16, 96, (BlockSpec("hybrid_fir_iir", 3),) * 2)
    skips = (
        SkipSpec(0, 0, channels=4, dpcm=True, dpcm_bits=8, quant_bits=12),
        SkipSpec(1, 1, channels=8),
    )
    return NetworkConfig("MagIC-ref", (s0, s1, s2), skips, 6, 6,
                         active_in, active_out).validate()


def fir_ablation_config(base: NetworkConfig | None = None) -> NetworkConfig:
    """Same network with bottleneck hybrid blocks swapped for depthwise-separable 3x3."""
    base = base or reference_config()
    last = base.scales[-1]
    blocks = tuple(
        replace(b, kind="depthwise_separable", k=3) if b.kind == "hybrid_fir_iir" else b
        for b in last.blocks)
    name = base.name + "-fir" if base.name != "MagIC-ref" else "MagIC-fir-ablation"
    return replace(base, name=name,
                   scales=base.scales[:-1] + (replace(last, blocks=blocks),)).validate()


NAMED_CONFIGS = {
    "magic-ref": reference_config,
    "fir-ablation": fir_ablation_config,
}


def load_config(spec: str | Path) -> NetworkConfig:
    """Resolve a named configuration or read a JSON config file."""
    key = str(spec)
    if key in NAMED_CONFIGS:
        return NAMED_CONFIGS[key]()
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}"
                                f" (named configs: {', '.join(sorted(NAMED_CONFIGS))})")
    return NetworkConfig.from_json(path.read_text()).validate()
