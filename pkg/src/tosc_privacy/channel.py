"""Power normalization, square M-QAM with Gray labeling, and the AWGN channel.

Signal conventions
------------------
A real feature vector of even length ``d`` is carried by ``d/2`` complex
symbols (consecutive pairs are the I and Q components). SNR is defined per
complex symbol at unit average signal power, so the complex noise variance is
``10 ** (-snr_db / 10)`` split evenly between I and Q.

The numpy functions here are the reference path used for evaluation and
statistics. ``normalize_power`` and ``add_awgn`` are the differentiable torch
equivalents used during end-to-end training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from .errors import DegenerateInputError, ValidationError

NOISELESS = math.inf

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


@dataclass(frozen=True)
class ChannelConfig:
    """Channel used for one train or evaluation pass.

    ``modulation`` is ``"analog"`` (full-resolution constellation: continuous
    features are sent as-is) or ``"qam"`` with ``order`` points.
    """

    snr_db: float = 12.0
    modulation: str = "analog"
    order: int = 16
    seed: int = 0
    kind: str = "awgn"

    def __post_init__(self):
        if self.kind != "awgn":
            raise ValidationError(f"unsupported channel kind {self.kind!r}; only 'awgn'")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValidationError(f"snr_db must be finite or +inf (noiseless), got {self.snr_db}")
        if self.modulation not in ("analog", "qam"):
            raise ValidationError(f"modulation must be 'analog' or 'qam', got {self.modulation!r}")
        if self.modulation == "qam":
            _check_qam_order(self.order)

    @property
    def noise_variance(self) -> float:
        return noise_variance(self.snr_db)


@dataclass
class SymbolBlock:
    """Complex baseband symbols plus the per-row scale used to normalize them.

    ``symbols`` has shape ``(n,)`` or ``(batch, n)``; ``scale`` has one entry
    per row (a 0-d array for a single vector).
    """

    symbols: np.ndarray
    scale: np.ndarray

    @property
    def power(self) -> np.ndarray:
        return np.mean(np.abs(self.symbols) ** 2, axis=-1)

    def __len__(self):
        return self.symbols.shape[-1]


def noise_variance(snr_db: float) -> float:
    if snr_db == NOISELESS:
        return 0.0
    return 10.0 ** (-snr_db / 10.0)


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def power_normalize(features) -> SymbolBlock:
    """Scale each real vector to unit average symbol power and pair it into complex symbols.

    The scale factor ``sqrt(d/2) / ||x||`` is kept so the receiver can undo it
    with :func:`denormalize`.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim not in (1, 2):
        raise ValidationError(f"expected a vector or a batch of vectors, got shape {x.shape}")
    d = x.shape[-1]
    if d == 0 or d % 2:
        raise ValidationError(f"feature length must be even and positive, got {d}")
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms == 0):
        raise DegenerateInputError("cannot power-normalize an all-zero feature vector")
    scale = np.sqrt(d / 2.0) / norms
    y = x * scale[..., None]
    symbols = y[..., 0::2] + 1j * y[..., 1::2]
    return SymbolBlock(symbols=symbols, scale=np.asarray(scale))


def denormalize(block: SymbolBlock) -> np.ndarray:
    """Inverse of :func:`power_normalize`: unpair the symbols and remove the scale."""
    s = block.symbols
    out = np.empty(s.shape[:-1] + (2 * s.shape[-1],), dtype=np.float64)
    out[..., 0::2] = s.real
    out[..., 1::2] = s.imag
    return out / np.asarray(block.scale)[..., None]


def awgn(block: SymbolBlock, snr_db: float, seed: SeedLike = None) -> SymbolBlock:
    """Add circularly-symmetric complex Gaussian noise of variance ``10**(-snr_db/10)``.

    ``snr_db = inf`` is the noiseless sentinel and returns the symbols untouched.
    """
    if snr_db == NOISELESS:
        return SymbolBlock(symbols=block.symbols.copy(), scale=block.scale)
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise ValidationError(f"snr_db must be finite or +inf, got {snr_db}")
    sigma = math.sqrt(noise_variance(snr_db) / 2.0)
    rng = _rng(seed)
    shape = block.symbols.shape
    noise = rng.normal(0.0, sigma, size=shape) + 1j * rng.normal(0.0, sigma, size=shape)
    return SymbolBlock(symbols=block.symbols + noise, scale=block.scale)


# --------------------------------------------------------------------------
# Square M-QAM
# --------------------------------------------------------------------------

def _check_qam_order(M: int) -> int:
    if not isinstance(M, (int, np.integer)) or M < 4:
        raise ValidationError(f"QAM order must be an integer >= 4, got {M!r}")
    bits = int(M).bit_length() - 1
    if (1 << bits) != M or bits % 2:
        raise ValidationError(f"QAM order must be a square power of two (4, 16, 64, ...), got {M}")
    return bits // 2


def _gray_to_binary(g: np.ndarray) -> np.ndarray:
    b = g.copy()
    shift = g >> 1
    while np.any(shift):
        b ^= shift
        shift >>= 1
    return b


def _binary_to_gray(b: np.ndarray) -> np.ndarray:
    return b ^ (b >> 1)


def qam_levels(M: int) -> np.ndarray:
    """Unnormalized amplitude levels per axis: -(m-1), ..., -1, 1, ..., m-1."""
    m = 1 << _check_qam_order(M)
    return 2.0 * np.arange(m) - (m - 1)


def qam_energy_scale(M: int) -> float:
    """Average energy of the unnormalized square constellation, 2(M-1)/3 (10 for 16-QAM)."""
    return 2.0 * (M - 1) / 3.0


def qam_constellation(M: int) -> np.ndarray:
    """Unit-energy constellation indexed by symbol label.

    The label's high half of bits is the Gray code of the in-phase level
    position, the low half that of the quadrature level, so horizontally or
    vertically adjacent points differ in exactly one bit.
    """
    k = _check_qam_order(M)
    labels = np.arange(M)
    i_pos = _gray_to_binary(labels >> k)
    q_pos = _gray_to_binary(labels & ((1 << k) - 1))
    levels = qam_levels(M)
    return (levels[i_pos] + 1j * levels[q_pos]) / math.sqrt(qam_energy_scale(M))


def qam_modulate(indices, M: int = 16) -> SymbolBlock:
    """Map integer labels in ``[0, M)`` to unit-average-energy Gray-coded QAM symbols."""
    _check_qam_order(M)
    idx = np.asarray(indices)
    if idx.size and (not np.issubdtype(idx.dtype, np.integer)):
        raise ValidationError(f"QAM indices must be integers, got dtype {idx.dtype}")
    idx = idx.astype(np.int64, copy=False)
    if idx.size and (idx.min() < 0 or idx.max() >= M):
        bad = idx[(idx < 0) | (idx >= M)].ravel()[0]
        raise ValidationError(f"QAM index {bad} outside [0, {M})")
    symbols = qam_constellation(M)[idx]
    return SymbolBlock(symbols=symbols, scale=np.ones(idx.shape[:-1]) if idx.ndim else np.asarray(1.0))


def qam_demodulate(block: Union[SymbolBlock, np.ndarray], M: int = 16) -> np.ndarray:
    """Minimum-Euclidean-distance hard decision.

    For a square grid the nearest point is found independently on each axis,
    which is exactly the joint nearest-neighbour decision.
    """
    k = _check_qam_order(M)
    m = 1 << k
    s = block.symbols if isinstance(block, SymbolBlock) else np.asarray(block)
    scaled = s * math.sqrt(qam_energy_scale(M))

    def axis_position(v):
        return np.clip(np.rint((v + (m - 1)) / 2.0), 0, m - 1).astype(np.int64)

    i_gray = _binary_to_gray(axis_position(scaled.real))
    q_gray = _binary_to_gray(axis_position(scaled.imag))
    return (i_gray << k) | q_gray


# --------------------------------------------------------------------------
# Differentiable torch path
# --------------------------------------------------------------------------

def normalize_power(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Row-wise ``x * sqrt(d/2) / ||x||`` so the paired complex symbols have unit average power."""
    d = x.shape[-1]
    if d % 2:
        raise ValidationError(f"feature length must be even, got {d}")
    norm = x.norm(dim=-1, keepdim=True)
    if torch.any(norm == 0):
        raise DegenerateInputError("cannot power-normalize an all-zero feature vector")
    return x * (math.sqrt(d / 2.0) / norm.clamp_min(eps))


def add_awgn(x: torch.Tensor, snr_db: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """AWGN on the real-pair representation: each real coordinate gets variance sigma^2 / 2."""
    if snr_db == NOISELESS:
        return x
    std = math.sqrt(noise_variance(snr_db) / 2.0)
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    return x + std * noise


def qam_channel(indices: np.ndarray, M: int, snr_db: float, seed: SeedLike = None) -> np.ndarray:
    """Digital path for codebook indices: modulate, corrupt, hard-demodulate."""
    block = qam_modulate(indices, M)
    return qam_demodulate(awgn(block, snr_db, seed), M)
