"""Closed-loop DPCM for skip-line rows.

Each row is coded independently: the first sample is stored verbatim at
``input_bits``, every following sample as a quantized difference from the
*reconstructed* left neighbour, so encoder and decoder never drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class DpcmConfig:
    input_bits: int = 12
    residual_bits: int = 8
    step: int | None = None     # residual quantizer step; default spans the full difference range
    per_row_reset: bool = True

    def __post_init__(self):
        if not 1 <= self.input_bits <= 24:
            raise ConfigError(f"input_bits={self.input_bits} outside 1..24")
        if not 2 <= self.residual_bits <= self.input_bits + 1:
            raise ConfigError(f"residual_bits={self.residual_bits} outside 2..input_bits+1")
        if self.step is not None and self.step < 1:
            raise ConfigError(f"step={self.step} must be >= 1")
        if not self.per_row_reset:
            raise ConfigError("only per-row reset is supported")

    @property
    def quant_step(self) -> int:
        if self.step is not None:
            return self.step
        return 1 << (self.input_bits + 1 - self.residual_bits)

    @property
    def lossless(self) -> bool:
        return self.quant_step == 1

    @property
    def max_value(self) -> int:
        return (1 << self.input_bits) - 1

    def row_bits(self, length: int) -> int:
        if length == 0:
            return 0
        return self.input_bits + (length - 1) * self.residual_bits

    def savings_ratio(self, length: int) -> float:
        """Raw PCM bits over DPCM bits for one row."""
        return length * self.input_bits / self.row_bits(length)


def _as_rows(samples) -> tuple[np.ndarray, tuple]:
    a = np.asarray(samples)
    if a.ndim == 0:
        raise InputError("expected a row of samples, got a scalar")
    if a.size and not np.issubdtype(a.dtype, np.integer):
        if not np.all(np.equal(np.mod(a, 1), 0)):
            raise InputError("DPCM samples must be integers")
    shape = a.shape
    return a.astype(np.int64).reshape(int(np.prod(shape[:-1])), shape[-1]), shape


def dpcm_encode(row, cfg: DpcmConfig) -> np.ndarray:
    """Encode integer samples along the last axis into residual codes."""
    return dpcm_encode_with_reconstruction(row, cfg)[0]


def dpcm_encode_with_reconstruction(row, cfg: DpcmConfig) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`dpcm_encode` but also returns the encoder's own reconstruction."""
    rows, shape = _as_rows(row)
    if rows.size and (rows.min() < 0 or rows.max() > cfg.max_value):
        raise InputError(f"sample outside [0, {cfg.max_value}] for input_bits={cfg.input_bits}")
    codes = np.empty_like(rows)
    recon = np.empty_like(rows)
    _kernels.dpcm_encode_rows(rows, cfg.residual_bits, cfg.input_bits, cfg.quant_step, codes, recon)
    return codes.reshape(shape), recon.reshape(shape)


def dpcm_decode(codes, cfg: DpcmConfig, length: int | None = None) -> np.ndarray:
    rows, shape = _as_rows(codes)
    if length is not None and shape[-1] != length:
        raise InputError(f"code length {shape[-1]} != expected row length {length}")
    out = np.empty_like(rows)
    _kernels.dpcm_decode_rows(rows, cfg.input_bits, cfg.quant_step, out)
    return out.reshape(shape)


class SkipCodec:
    """Fixed-point (and optionally DPCM) storage for one skip line.

    Values are clamped to [0, 1] by the caller and mapped to
    ``round(v * (2**bits - 1))``.
    """

    def __init__(self, quant_bits: int, dpcm: DpcmConfig | None = None):
        self.quant_bits = quant_bits
        self.dpcm = dpcm
        self.scale = float((1 << quant_bits) - 1)

    def quantize(self, v: np.ndarray) -> np.ndarray:
        return np.floor(v.astype(np.float64) * self.scale + 0.5).astype(np.int64)

    def encode(self, v: np.ndarray) -> np.ndarray:
        q = self.quantize(v)
        return dpcm_encode(q, self.dpcm) if self.dpcm is not None else q

    def decode(self, codes: np.ndarray, dtype) -> np.ndarray:
        q = dpcm_decode(codes, self.dpcm) if self.dpcm is not None else codes
        return (q / self.scale).astype(dtype)

    def roundtrip(self, v: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(v), v.dtype)

    def row_bits(self, width: int) -> int:
        if self.dpcm is not None:
            return self.dpcm.row_bits(width)
        return width * self.quant_bits


def dpcm_bench(rows: np.ndarray, cfg: DpcmConfig) -> dict:
    """Round-trip statistics over a batch of rows."""
    rows = np.asarray(rows, dtype=np.int64)
    codes, recon = dpcm_encode_with_reconstruction(rows, cfg)
    err = np.abs(recon - rows)
    n, width = rows.reshape(-1, rows.shape[-1]).shape
    return {
        "rows": n,
        "width": width,
        "input_bits": cfg.input_bits,
        "residual_bits": cfg.residual_bits,
        "step": cfg.quant_step,
        "bits_per_row": cfg.row_bits(width),
        "raw_bits_per_row": width * cfg.input_bits,
        "savings_ratio": cfg.savings_ratio(width),
        "max_abs_error": int(err.max()) if err.size else 0,
        "mean_abs_error": float(err.mean()) if err.size else 0.0,
    }
