"""Privacy mechanisms on the DeepJSCC feature path.

* Laplace perturbation of L1-clipped features (differential privacy).
* Keyed feature shuffling: a per-block permutation drawn from a counter-based
  generator keyed with a 128-bit secret.
* Information-bottleneck adversarial learning (IBAL): a training-time defence,
  the transmit path is the identity.
* Learned vector quantization (LBVQ): features are split into segments and
  replaced by codebook indices, which travel as QAM symbols.
"""

from __future__ import annotations

import math
import secrets
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.cluster.vq import kmeans2

from .errors import TrainingDivergenceError, ValidationError


# --------------------------------------------------------------------------
# differential privacy
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DPConfig:
    epsilon: float
    clip_bound: float = 1.0

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValidationError(f"privacy budget epsilon must be positive, got {self.epsilon}")
        if not (self.clip_bound > 0 and math.isfinite(self.clip_bound)):
            raise ValidationError(f"clip bound must be positive, got {self.clip_bound}")

    @property
    def scale(self) -> float:
        """Laplace scale b = clip_bound / epsilon."""
        return self.clip_bound / self.epsilon


def clip_l1(features: torch.Tensor, bound: float) -> torch.Tensor:
    """Rescale rows whose L1 norm exceeds ``bound`` onto the L1 ball; others pass unchanged."""
    if not bound > 0:
        raise ValidationError(f"clip bound must be positive, got {bound}")
    norm = features.abs().sum(dim=-1, keepdim=True)
    factor = torch.where(norm > bound, bound / norm.clamp_min(1e-30), torch.ones_like(norm))
    return features * factor


def laplace_noise(shape, scale: float, generator: Optional[torch.Generator] = None,
                  dtype=torch.float32) -> torch.Tensor:
    # difference of two Exp(1) draws is Laplace(0, 1)
    e1 = torch.empty(shape, dtype=dtype).exponential_(generator=generator)
    e2 = torch.empty(shape, dtype=dtype).exponential_(generator=generator)
    return scale * (e1 - e2)


def dp_perturb(features: torch.Tensor, cfg: DPConfig,
               generator: Union[torch.Generator, int, None] = None) -> torch.Tensor:
    """Add i.i.d. Laplace(0, clip_bound/epsilon) noise; features are expected already clipped."""
    if isinstance(generator, int):
        generator = torch.Generator().manual_seed(generator)
    return features + laplace_noise(features.shape, cfg.scale, generator, features.dtype)


# --------------------------------------------------------------------------
# keyed shuffling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ShuffleKey:
    """128-bit secret plus the feature length it permutes.

    Block ``n`` of a stream is permuted by ``permutation(n)``: a uniform random
    permutation from a Philox generator keyed with the secret at counter ``n``.
    """

    key: bytes
    d: int = 128

    def __post_init__(self):
        if len(self.key) != 16:
            raise ValidationError(f"shuffle key must be 16 bytes (128 bits), got {len(self.key)}")
        if self.d <= 0:
            raise ValidationError(f"feature length must be positive, got {self.d}")

    @classmethod
    def from_hex(cls, text: str, d: int = 128) -> "ShuffleKey":
        try:
            raw = bytes.fromhex(text.strip())
        except ValueError:
            raise ValidationError("shuffle key must be a hex string") from None
        return cls(raw, d)

    @classmethod
    def generate(cls, d: int = 128) -> "ShuffleKey":
        return cls(secrets.token_bytes(16), d)

    @property
    def hex(self) -> str:
        return self.key.hex()

    def permutation(self, counter: int = 0) -> np.ndarray:
        k = int.from_bytes(self.key, "little")
        bitgen = np.random.Philox(key=[k & (2**64 - 1), k >> 64], counter=[int(counter) & (2**64 - 1), 0, 0, 0])
        return np.random.Generator(bitgen).permutation(self.d)

    def __repr__(self):
        return f"ShuffleKey(d={self.d}, key=<hidden>)"


def _permute_rows(features, key: ShuffleKey, counter: int, inverse: bool):
    is_torch = isinstance(features, torch.Tensor)
    x = features if is_torch else np.asarray(features)
    if x.shape[-1] != key.d:
        raise ValidationError(f"feature length {x.shape[-1]} does not match key length {key.d}")
    single = x.ndim == 1
    rows = x[None] if single else x
    perms = np.stack([key.permutation(counter + i) for i in range(rows.shape[0])])
    if inverse:
        perms = np.argsort(perms, axis=1)
    if is_torch:
        out = torch.gather(rows, 1, torch.from_numpy(perms).to(rows.device))
    else:
        out = np.take_along_axis(rows, perms, axis=1)
    return out[0] if single else out


def shuffle_encrypt(features, key: ShuffleKey, counter: int = 0):
    """Permute coordinates of each row; row ``i`` uses the key's permutation at ``counter + i``."""
    return _permute_rows(features, key, counter, inverse=False)


def shuffle_decrypt(features, key: ShuffleKey, counter: int = 0):
    return _permute_rows(features, key, counter, inverse=True)


# --------------------------------------------------------------------------
# learned vector quantization
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LBVQConfig:
    K: int = 16
    seg_dim: int = 4
    beta: float = 0.25

    def __post_init__(self):
        if self.K < 2 or self.K & (self.K - 1):
            raise ValidationError(f"codebook size must be a power of two, got {self.K}")
        if self.seg_dim <= 0:
            raise ValidationError(f"segment dimension must be positive, got {self.seg_dim}")
        if self.beta < 0:
            raise ValidationError(f"commitment weight must be non-negative, got {self.beta}")

    @property
    def bits_per_index(self) -> int:
        return self.K.bit_length() - 1


class Codebook(nn.Module):
    def __init__(self, K: int = 16, seg_dim: int = 4, beta: float = 0.25, generator=None):
        super().__init__()
        self.config = LBVQConfig(K, seg_dim, beta)
        self.codewords = nn.Parameter(torch.randn(K, seg_dim, generator=generator))

    @property
    def K(self):
        return self.config.K

    @property
    def seg_dim(self):
        return self.config.seg_dim

    @property
    def beta(self):
        return self.config.beta

    def lookup(self, indices) -> torch.Tensor:
        """Concatenate the codewords named by ``indices`` ``(..., S)`` into ``(..., S * seg_dim)``."""
        idx = torch.as_tensor(indices, dtype=torch.long)
        return self.codewords[idx].flatten(-2)

    @torch.no_grad()
    def init_kmeans(self, segments: torch.Tensor, seed: int = 0) -> None:
        data = segments.reshape(-1, self.seg_dim).double().numpy()
        centroids, _ = kmeans2(data, self.K, minit="++", seed=np.random.default_rng(seed))
        self.codewords.copy_(torch.from_numpy(centroids).to(self.codewords.dtype))

    @torch.no_grad()
    def reseed_dead(self, usage: torch.Tensor, segments: torch.Tensor, generator=None) -> int:
        """Replace never-selected codewords with randomly drawn encoder segments."""
        dead = torch.nonzero(usage == 0).flatten()
        if len(dead):
            pool = segments.reshape(-1, self.seg_dim)
            pick = torch.randint(len(pool), (len(dead),), generator=generator)
            self.codewords[dead] = pool[pick].to(self.codewords.dtype)
        return len(dead)


def _segments(features: torch.Tensor, seg_dim: int) -> torch.Tensor:
    d = features.shape[-1]
    if d % seg_dim:
        raise ValidationError(f"feature length {d} is not divisible by segment dimension {seg_dim}")
    return features.reshape(*features.shape[:-1], d // seg_dim, seg_dim)


def vq_quantize(features: torch.Tensor, cb: Codebook):
    """Nearest codeword per segment (squared Euclidean, lowest index on ties).

    Returns ``(indices (..., d/seg_dim), quantized (..., d))``.
    """
    seg = _segments(features, cb.seg_dim)
    dist = ((seg.unsqueeze(-2) - cb.codewords) ** 2).sum(-1)
    indices = dist.argmin(-1)  # argmin returns the first minimum
    return indices, cb.lookup(indices)


def straight_through(features: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward value of ``quantized``, gradient of the identity onto ``features``."""
    return features + (quantized - features).detach()


def vq_loss(features: torch.Tensor, quantized: torch.Tensor, cb: Codebook) -> torch.Tensor:
    """Codebook term ||sg(z) - e||^2 plus commitment beta * ||z - sg(e)||^2 (means over elements)."""
    if features.shape != quantized.shape:
        raise ValidationError(f"shape mismatch {tuple(features.shape)} vs {tuple(quantized.shape)}")
    codebook_term = F.mse_loss(quantized, features.detach())
    commitment = F.mse_loss(features, quantized.detach())
    return codebook_term + cb.beta * commitment


# --------------------------------------------------------------------------
# IBAL
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IBALConfig:
    lambda_adv: float = 0.1
    lambda_ib: float = 0.01
    adversary_steps: int = 1

    def __post_init__(self):
        if self.lambda_adv < 0 or self.lambda_ib < 0:
            raise ValidationError("IBAL weights must be non-negative")
        if self.adversary_steps < 1:
            raise ValidationError("adversary_steps must be >= 1")


def kl_to_unit_gaussian(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over features, averaged over the batch."""
    return 0.5 * (mu.pow(2) + logvar.exp() - logvar - 1.0).sum(-1).mean()


def _check_finite(losses: Dict[str, torch.Tensor], step: Optional[int]):
    bad = {k: float(v.detach()) for k, v in losses.items() if not torch.isfinite(v)}
    if bad:
        raise TrainingDivergenceError("non-finite loss during IBAL training", {"step": step, **bad})


def ibal_train_step(batch, system, sim_adversary: nn.Module, cfg: IBALConfig,
                    opt_system: torch.optim.Optimizer, opt_adversary: torch.optim.Optimizer,
                    snr_db: float, seed: int, step: Optional[int] = None) -> Dict[str, float]:
    """One alternating update.

    (a) the simulated adversary fits reconstructions of the images from the
    current (detached) channel outputs; (b) encoder and head minimize
    ``task - lambda_adv * sim_recon + lambda_ib * KL``.
    ``system`` is a :class:`tosc_privacy.system.Transceiver`.
    """
    images, labels = batch
    system.train()
    sim_adversary.train()

    out = system(images, snr_db=snr_db, seed=seed, mode="train")
    received = out.received.detach()
    adv_losses = []
    for _ in range(cfg.adversary_steps):
        opt_adversary.zero_grad(set_to_none=True)
        adv_loss = F.mse_loss(sim_adversary(received), images)
        _check_finite({"adversary_mse": adv_loss}, step)
        adv_loss.backward()
        opt_adversary.step()
        adv_losses.append(adv_loss.detach())

    opt_system.zero_grad(set_to_none=True)
    task = system.loss_fn(out.logits, labels)
    recon = F.mse_loss(sim_adversary(out.received), images)
    kl = out.kl if out.kl is not None else torch.zeros((), dtype=task.dtype)
    adv_term = -cfg.lambda_adv * recon
    ib_term = cfg.lambda_ib * kl
    total = task + adv_term + ib_term
    _check_finite({"task": task, "sim_recon": recon, "kl": kl, "total": total}, step)
    total.backward()
    opt_system.step()
    # the adversary's parameters received gradients from the encoder objective; drop them
    opt_adversary.zero_grad(set_to_none=True)

    parts = {"task": task, "adversarial": adv_term, "ib": ib_term, "total": total,
             "sim_recon_mse": recon, "kl": kl, "adversary_fit_mse": adv_losses[-1]}
    return {k: float(v.detach()) for k, v in parts.items()}


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

Mechanism = Union[None, DPConfig, ShuffleKey, IBALConfig, Codebook]


@dataclass
class Transmission:
    """Transmit-ready output of a mechanism.

    ``kind`` is ``"analog"`` (``analog`` holds real features for the
    full-resolution constellation) or ``"indices"`` (``indices`` for the QAM
    path, with the codewords they select in ``quantized``).
    """

    kind: str
    analog: Optional[torch.Tensor] = None
    indices: Optional[torch.Tensor] = None
    quantized: Optional[torch.Tensor] = None


def apply_mechanism(features: torch.Tensor, mechanism: Mechanism, mode: str = "eval",
                    seed: Union[int, torch.Generator, None] = 0, counter: int = 0) -> Transmission:
    """Apply one privacy mechanism to encoder features.

    DP clips to the L1 bound then adds Laplace noise; shuffling permutes with
    block counters starting at ``counter``; IBAL (and no mechanism) is the
    identity; a :class:`Codebook` quantizes to indices.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mechanism is None or isinstance(mechanism, IBALConfig):
        return Transmission("analog", analog=features)
    if isinstance(mechanism, DPConfig):
        gen = torch.Generator().manual_seed(seed) if isinstance(seed, int) else seed
        return Transmission("analog", analog=dp_perturb(clip_l1(features, mechanism.clip_bound), mechanism, gen))
    if isinstance(mechanism, ShuffleKey):
        return Transmission("analog", analog=shuffle_encrypt(features, mechanism, counter))
    if isinstance(mechanism, Codebook):
        indices, quantized = vq_quantize(features, mechanism)
        return Transmission("indices", indices=indices, quantized=quantized)
    raise ValidationError(f"unknown privacy mechanism {type(mechanism).__name__}")
