"""End-to-end transceivers for the five schemes and their training loop.

Analog schemes (baseline, dp, encryption, ibal)::

    image -> encoder -> power norm -> mechanism -> power norm -> AWGN -> [decrypt] -> head

LBVQ::

    image -> encoder -> nearest codewords -> indices -> 16-QAM -> AWGN -> hard demod
          -> codebook lookup -> refiner -> head
"""

from __future__ import annotations

import copy
import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
import torch.nn as nn

from .channel import NOISELESS, add_awgn, normalize_power, qam_channel
from .codec import (
    Encoder,
    EncoderSpec,
    HeadSpec,
    ImageDecoder,
    ModelBundle,
    TaskHead,
    predict,
    task_loss,
    to_tensor_images,
)
from .data import LabeledImageSet, make_batches
from .errors import TrainingDivergenceError, ValidationError
from .privacy import (
    Codebook,
    DPConfig,
    IBALConfig,
    LBVQConfig,
    ShuffleKey,
    Transmission,
    apply_mechanism,
    kl_to_unit_gaussian,
    shuffle_decrypt,
    straight_through,
    vq_loss,
    ibal_train_step,
)

logger = logging.getLogger(__name__)

SCHEMES = ("baseline", "dp", "encryption", "ibal", "lbvq")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from integers (e.g. run seed, epoch, batch index)."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2, np.uint64)[0] >> 1)


@dataclass
class SchemeSpec:
    """Everything needed to rebuild a transceiver: architecture plus mechanism parameters."""

    scheme: str
    encoder: EncoderSpec
    head: HeadSpec
    dp: Optional[DPConfig] = None
    key_hex: Optional[str] = None
    ibal: Optional[IBALConfig] = None
    lbvq: Optional[LBVQConfig] = None
    refiner_hidden: int = 512

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValidationError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        need = {"dp": self.dp, "encryption": self.key_hex, "ibal": self.ibal, "lbvq": self.lbvq}
        if self.scheme in need and need[self.scheme] is None:
            raise ValidationError(f"scheme {self.scheme!r} needs its mechanism parameters")
        if self.scheme == "lbvq" and self.encoder.d % self.lbvq.seg_dim:
            raise ValidationError(f"d={self.encoder.d} not divisible by seg_dim={self.lbvq.seg_dim}")

    def to_dict(self) -> dict:
        out = {"scheme": self.scheme, "encoder": self.encoder.to_dict(), "head": self.head.to_dict(),
               "refiner_hidden": self.refiner_hidden}
        if self.dp is not None:
            out["dp"] = {"epsilon": self.dp.epsilon, "clip_bound": self.dp.clip_bound}
        if self.key_hex is not None:
            out["key_hex"] = self.key_hex
        if self.ibal is not None:
            out["ibal"] = {"lambda_adv": self.ibal.lambda_adv, "lambda_ib": self.ibal.lambda_ib,
                           "adversary_steps": self.ibal.adversary_steps}
        if self.lbvq is not None:
            out["lbvq"] = {"K": self.lbvq.K, "seg_dim": self.lbvq.seg_dim, "beta": self.lbvq.beta}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SchemeSpec":
        return cls(
            scheme=d["scheme"],
            encoder=EncoderSpec(**d["encoder"]),
            head=HeadSpec(**d["head"]),
            dp=DPConfig(**d["dp"]) if "dp" in d else None,
            key_hex=d.get("key_hex"),
            ibal=IBALConfig(**d["ibal"]) if "ibal" in d else None,
            lbvq=LBVQConfig(**d["lbvq"]) if "lbvq" in d else None,
            refiner_hidden=d.get("refiner_hidden", 512),
        )


@dataclass
class Output:
    logits: torch.Tensor
    features: torch.Tensor        # encoder output (FeatureBlock)
    transmission: Transmission    # mechanism output, pre-channel
    intercepted: torch.Tensor     # what an eavesdropper sees at the channel output
    received: torch.Tensor        # input to the task head path
    transmitted: Optional[torch.Tensor] = None  # channel input (pre-noise)
    kl: Optional[torch.Tensor] = None
    vq: Optional[torch.Tensor] = None


class Refiner(nn.Module):
    """Residual MLP at the LBVQ receiver, applied to the looked-up codewords."""

    def __init__(self, d, hidden):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, hidden), nn.PReLU(hidden), nn.Linear(hidden, d))

    def forward(self, x):
        return x + self.net(x)


class Transceiver(nn.Module):
    def __init__(self, spec: SchemeSpec):
        super().__init__()
        self.spec = spec
        enc_spec = copy.deepcopy(spec.encoder)
        if spec.scheme == "ibal":
            enc_spec.variational = True
        if spec.scheme == "lbvq":
            enc_spec.output_norm = False
        self.encoder = Encoder(enc_spec)
        self.head = TaskHead(spec.head)
        self.codebook = None
        self.refiner = None
        self.key = ShuffleKey.from_hex(spec.key_hex, spec.encoder.d) if spec.key_hex else None
        if spec.scheme == "lbvq":
            self.codebook = Codebook(spec.lbvq.K, spec.lbvq.seg_dim, spec.lbvq.beta)
            self.refiner = Refiner(spec.encoder.d, spec.refiner_hidden)
        self.quantize = True  # switched off during the LBVQ warm start
        self.last_batch_codes = None

    @property
    def scheme(self) -> str:
        return self.spec.scheme

    @property
    def mechanism(self):
        return {"dp": self.spec.dp, "encryption": self.key, "ibal": self.spec.ibal,
                "lbvq": self.codebook}.get(self.scheme)

    @property
    def intercept_kind(self) -> str:
        return "codebook_indices" if self.scheme == "lbvq" else "analog_features"

    def loss_fn(self, logits, labels):
        return task_loss(logits, labels)

    def forward(self, images, snr_db: float = 12.0, seed: int = 0, mode: str = "eval",
                counter: Optional[int] = None) -> Output:
        x = to_tensor_images(images)
        gen = torch.Generator().manual_seed(int(seed))
        if counter is None:
            counter = (int(seed) & 0xFFFFFFFF) << 32
        if self.scheme == "lbvq":
            return self._forward_digital(x, snr_db, seed, gen, mode)

        mu, logvar = self.encoder.latent(x)
        kl = None
        z = mu
        if self.scheme == "ibal":
            kl = kl_to_unit_gaussian(mu, logvar)
            if mode == "train" and self.spec.ibal.lambda_ib > 0:
                eps = torch.randn(mu.shape, generator=gen, dtype=mu.dtype)
                z = mu + torch.exp(0.5 * logvar) * eps
        features = normalize_power(z)
        tx = apply_mechanism(features, self.mechanism, mode, seed=gen, counter=counter)
        signal = tx.analog
        if self.scheme == "dp":
            signal = normalize_power(signal)
        channel_out = add_awgn(signal, snr_db, gen)
        received = shuffle_decrypt(channel_out, self.key, counter) if self.key is not None else channel_out
        return Output(self.head(received), features, tx, channel_out, received, transmitted=signal, kl=kl)

    def _forward_digital(self, x, snr_db, seed, gen, mode) -> Output:
        z, _ = self.encoder.latent(x)
        if not self.quantize:
            received = z
            return Output(self.head(self.refiner(received)), z, Transmission("analog", analog=z),
                          z, received, transmitted=z)
        tx = apply_mechanism(z, self.codebook, mode)
        self.last_batch_codes = (tx.indices.detach(), z.detach())
        rx_idx = qam_channel(tx.indices.numpy(), self.codebook.K, snr_db, np.random.default_rng(int(seed)))
        rx_idx = torch.from_numpy(rx_idx)
        looked_up = self.codebook.lookup(rx_idx).to(z.dtype)
        received = straight_through(z, looked_up) if mode == "train" else looked_up
        logits = self.head(self.refiner(received))
        return Output(logits, z, tx, rx_idx, received, transmitted=tx.indices,
                      vq=vq_loss(z, tx.quantized, self.codebook))

    # ------------------------------------------------------------------
    def to_bundle(self, metadata: dict) -> ModelBundle:
        meta = dict(metadata)
        meta["scheme_spec"] = self.spec.to_dict()
        return ModelBundle(metadata=meta, state={"transceiver": self.state_dict()})

    @classmethod
    def from_bundle(cls, bundle: ModelBundle) -> "Transceiver":
        system = cls(SchemeSpec.from_dict(bundle.metadata["scheme_spec"]))
        system.load_state_dict(bundle.state["transceiver"])
        system.eval()
        return system


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 512
    learning_rate: float = 1e-3
    snr_train_db: float = 12.0
    seed: int = 0
    lbvq_warmup_epochs: int = 1
    kmeans_samples: int = 5000


@dataclass
class EpochLog:
    epoch: int
    steps: int
    seconds: float
    losses: Dict[str, float] = field(default_factory=dict)


def _check(losses: Dict[str, torch.Tensor], **where):
    bad = {k: float(v.detach()) for k, v in losses.items() if not torch.isfinite(v)}
    if bad:
        raise TrainingDivergenceError("non-finite training loss", {**where, **bad})


def train_step(system: Transceiver, batch, opt: torch.optim.Optimizer, snr_db: float, seed: int,
               step: Optional[int] = None) -> Dict[str, float]:
    """Plain end-to-end step (baseline, dp, encryption; lbvq adds its codebook loss)."""
    images, labels = batch
    system.train()
    opt.zero_grad(set_to_none=True)
    out = system(images, snr_db=snr_db, seed=seed, mode="train")
    task = system.loss_fn(out.logits, labels)
    parts = {"task": task}
    if out.vq is not None and system.quantize:
        parts["vq"] = out.vq
    total = sum(parts.values())
    parts["total"] = total
    _check(parts, step=step, scheme=system.scheme)
    total.backward()
    opt.step()
    return {k: float(v.detach()) for k, v in parts.items()}


def make_sim_adversary(system: Transceiver) -> ImageDecoder:
    spec = system.spec.encoder
    return ImageDecoder(spec.d, spec.widths, spec.resolution, spec.in_channels)


def _batch_tensors(images, labels):
    return to_tensor_images(images), torch.from_numpy(np.asarray(labels))


def fit(system: Transceiver, train_set: LabeledImageSet, settings: TrainSettings,
        on_epoch: Optional[Callable[[EpochLog], None]] = None,
        sim_adversary: Optional[nn.Module] = None) -> List[EpochLog]:
    """Train ``system`` end to end at ``settings.snr_train_db``. Returns one log entry per epoch."""
    torch.manual_seed(settings.seed)
    if system.scheme == "ibal" and sim_adversary is None:
        sim_adversary = make_sim_adversary(system)
    opt = torch.optim.Adam(system.parameters(), lr=settings.learning_rate)
    opt_adv = torch.optim.Adam(sim_adversary.parameters(), lr=settings.learning_rate) if sim_adversary else None

    logs = []
    warmup = settings.lbvq_warmup_epochs if system.scheme == "lbvq" else 0
    for epoch in range(settings.epochs):
        if system.scheme == "lbvq":
            system.quantize = epoch >= warmup
            if epoch == warmup:
                _init_codebook(system, train_set, settings)
        t0 = time.perf_counter()
        sums: Dict[str, float] = {}
        usage = torch.zeros(system.codebook.K, dtype=torch.long) if system.codebook is not None else None
        batches = make_batches(train_set, settings.batch_size, seed=derive_seed(settings.seed, epoch))
        last_z = None
        for b, (images, labels) in enumerate(batches):
            step_seed = derive_seed(settings.seed, epoch, b, 1)
            batch = _batch_tensors(images, labels)
            if system.scheme == "ibal":
                losses = ibal_train_step(batch, system, sim_adversary, system.spec.ibal, opt, opt_adv,
                                         settings.snr_train_db, step_seed, step=b)
            else:
                losses = train_step(system, batch, opt, settings.snr_train_db, step_seed, step=b)
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v
            if usage is not None and system.quantize:
                idx, last_z = system.last_batch_codes
                usage += torch.bincount(idx.flatten(), minlength=system.codebook.K)
        if usage is not None and system.quantize and last_z is not None:
            system.codebook.reseed_dead(usage, last_z, torch.Generator().manual_seed(derive_seed(settings.seed, epoch, 7)))
        entry = EpochLog(epoch, len(batches), time.perf_counter() - t0,
                         {k: v / len(batches) for k, v in sums.items()})
        logs.append(entry)
        logger.info("epoch %d %s", epoch, entry.losses)
        if on_epoch is not None:
            on_epoch(entry)
    system.eval()
    system.quantize = True
    return logs


@torch.no_grad()
def _init_codebook(system: Transceiver, train_set: LabeledImageSet, settings: TrainSettings):
    n = min(len(train_set), settings.kmeans_samples)
    idx = np.random.default_rng(derive_seed(settings.seed, 99)).permutation(len(train_set))[:n]
    system.eval()
    zs = [system.encoder.latent(to_tensor_images(train_set.images[np.sort(idx[i:i + 512])]))[0]
          for i in range(0, n, 512)]
    system.codebook.init_kmeans(torch.cat(zs), seed=settings.seed)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def cell_seed(scheme_label: str, snr_db: float, seed: int) -> int:
    """Deterministic channel seed for one (scheme, SNR, seed) evaluation cell."""
    tag = int.from_bytes(hashlib.sha256(scheme_label.encode("utf-8")).digest()[:8], "little")
    snr_code = 10**6 if snr_db == NOISELESS else int(round(snr_db * 1000))
    return derive_seed(tag & 0xFFFFFFFF, tag >> 32, snr_code, seed)


@torch.no_grad()
def evaluate(system: Transceiver, dataset: LabeledImageSet, snr_db: float, seed: int,
             batch_size: int = 512) -> float:
    """Top-1 accuracy of the task head over ``dataset`` through the channel at ``snr_db``."""
    system.eval()
    correct = 0
    batches = make_batches(dataset, batch_size, seed=0, shuffle=False)
    for b, (images, labels) in enumerate(batches):
        out = system(images, snr_db=snr_db, seed=derive_seed(seed, b), mode="eval")
        correct += int((predict(out.logits) == torch.from_numpy(np.asarray(labels))).sum())
    return correct / len(dataset)
