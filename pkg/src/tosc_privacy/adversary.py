"""Black-box model-inversion attacker.

The attacker only ever holds a :class:`VictimOracle`, whose single method
``query`` sends attacker-chosen images through the frozen victim and returns
what an eavesdropper would capture. From those (interception, image) pairs it
trains an inversion network, then reconstructs unseen users' images.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from .codec import ImageDecoder, ModelBundle, conv_block, to_numpy_images, to_tensor_images
from .data import LabeledImageSet, make_batches
from .errors import TrainingDivergenceError, ValidationError

logger = logging.getLogger(__name__)

INPUT_KINDS = ("analog_features", "codebook_indices")
INTERCEPT_POINTS = ("post_noise", "pre_noise")


# --------------------------------------------------------------------------
# perceptual distance
# --------------------------------------------------------------------------

class PerceptualNet(nn.Module):
    """Two strided conv stages plus a linear read-out, trained on the task corpus then frozen.

    The perceptual distance between two images is the mean squared
    difference of both stages' activations.
    """

    def __init__(self, in_channels: int = 3, out_dim: int = 10, widths: Sequence[int] = (16, 32)):
        super().__init__()
        self.config = {"in_channels": in_channels, "out_dim": out_dim, "widths": list(widths)}
        self.stage1 = conv_block(in_channels, widths[0], 2)
        self.stage2 = conv_block(widths[0], widths[1], 2)
        self.readout = nn.Linear(widths[1], out_dim)

    def features(self, x) -> Tuple[torch.Tensor, torch.Tensor]:
        f1 = self.stage1(x)
        return f1, self.stage2(f1)

    def forward(self, x):
        return self.readout(self.features(x)[1].mean((2, 3)))

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Per-image perceptual distance ``(N,)``."""
        total = 0
        for fa, fb in zip(self.features(a), self.features(b)):
            total = total + (fa - fb).pow(2).flatten(1).mean(1)
        return total


def _perceptual_targets(dataset: LabeledImageSet):
    labels = np.array(dataset.labels)
    if labels.ndim == 2:
        return labels.shape[1], torch.from_numpy(labels).float(), "multilabel"
    if dataset.num_classes == 2:
        return 1, torch.from_numpy(labels).float()[:, None], "multilabel"
    return dataset.num_classes, torch.from_numpy(labels).long(), "multiclass"


def train_perceptual_network(dataset: LabeledImageSet, epochs: int = 3, batch_size: int = 128,
                             seed: int = 0, learning_rate: float = 1e-3) -> PerceptualNet:
    """Train :class:`PerceptualNet` on the corpus labels, then freeze it."""
    torch.manual_seed(seed)
    out_dim, targets, mode = _perceptual_targets(dataset)
    net = PerceptualNet(dataset.image_shape[-1], out_dim)
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
    net.train()
    for epoch in range(epochs):
        for idx in make_batches(dataset, batch_size, seed=seed * 1000 + epoch).index_batches:
            logits = net(to_tensor_images(dataset.images[idx]))
            y = targets[idx]
            loss = (F.binary_cross_entropy_with_logits(logits, y) if mode == "multilabel"
                    else F.cross_entropy(logits, y))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return freeze(net)


def freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def load_or_train_perceptual(dataset: LabeledImageSet, cache_path, seed: int = 0, **kwargs) -> PerceptualNet:
    """Reuse a frozen perceptual network cached at ``cache_path`` or train and cache one."""
    cache_path = Path(cache_path)
    if cache_path.is_file():
        bundle = ModelBundle.load(cache_path)
        net = PerceptualNet(**bundle.metadata["architecture"])
        net.load_state_dict(bundle.state["perceptual"])
        return freeze(net)
    net = train_perceptual_network(dataset, seed=seed, **kwargs)
    meta = {"architecture": net.config, "corpus": dataset.name, "split": dataset.split, "seed": seed,
            "trained_on": len(dataset), **{k: v for k, v in kwargs.items()}}
    ModelBundle(meta, {"perceptual": net.state_dict()}).save(cache_path)
    return net


# --------------------------------------------------------------------------
# black-box access
# --------------------------------------------------------------------------

@dataclass
class Interception:
    """Captured transmissions: real features ``(N, d)`` or demodulated indices ``(N, S)``."""

    kind: str
    data: torch.Tensor

    def __post_init__(self):
        if self.kind not in INPUT_KINDS:
            raise ValidationError(f"interception kind must be one of {INPUT_KINDS}, got {self.kind!r}")

    def __len__(self):
        return len(self.data)

    def subset(self, idx) -> "Interception":
        return Interception(self.kind, self.data[idx])


class VictimOracle:
    """Query-only handle on a frozen victim transceiver.

    The victim object is captured in a closure; the oracle exposes the
    transmission format, the channel SNR and :meth:`query`, nothing else.
    """

    __slots__ = ("_query", "kind", "snr_db", "intercept")

    def __init__(self, system, snr_db: float, intercept: str = "post_noise"):
        if intercept not in INTERCEPT_POINTS:
            raise ValidationError(f"intercept must be one of {INTERCEPT_POINTS}, got {intercept!r}")
        kind = system.intercept_kind
        system.eval()

        @torch.no_grad()
        def query(images, seed: int) -> torch.Tensor:
            out = system(images, snr_db=snr_db, seed=seed, mode="eval")
            return (out.intercepted if intercept == "post_noise" else out.transmitted).detach()

        self._query = query
        self.kind = kind
        self.snr_db = snr_db
        self.intercept = intercept

    def query(self, images, seed: int) -> Interception:
        return Interception(self.kind, self._query(images, seed))


@dataclass
class AttackPairs:
    intercepted: Interception
    originals: torch.Tensor  # (N, C, H, W) in [0, 1]
    ids: Tuple[str, ...] = ()

    def __len__(self):
        return len(self.originals)


def collect_attack_pairs(oracle: VictimOracle, dataset: LabeledImageSet, n: int, seed: int,
                         batch_size: int = 512) -> AttackPairs:
    """Query the victim on ``n`` images drawn from ``dataset`` under ``seed``."""
    from .system import derive_seed

    if n <= 0:
        raise ValidationError(f"number of attack pairs must be positive, got {n}")
    if n > len(dataset):
        raise ValidationError(f"asked for {n} pairs but the dataset has only {len(dataset)} images")
    chosen = np.random.default_rng(seed).permutation(len(dataset))[:n]
    captured, originals = [], []
    for b, start in enumerate(range(0, n, batch_size)):
        idx = chosen[start:start + batch_size]
        images = to_tensor_images(dataset.images[idx])
        captured.append(oracle.query(images, seed=derive_seed(seed, b, 3)).data)
        originals.append(images)
    return AttackPairs(Interception(oracle.kind, torch.cat(captured)), torch.cat(originals),
                       tuple(dataset.ids[i] for i in chosen))


# --------------------------------------------------------------------------
# inversion network
# --------------------------------------------------------------------------

@dataclass
class AttackerSpec:
    """Inversion network and loss weights.

    ``input_dim`` is the feature length for analog interceptions or the
    number of indices per image for codebook interceptions (which are one-hot
    encoded over ``codebook_size`` symbols).
    """

    input_kind: str = "analog_features"
    input_dim: int = 128
    codebook_size: int = 16
    widths: Tuple[int, ...] = (32, 64, 128, 128)
    resolution: int = 32
    out_channels: int = 3
    mse_weight: float = 1.0
    perceptual_weight: float = 1.0
    intercept: str = "post_noise"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.input_kind not in INPUT_KINDS:
            raise ValidationError(f"input_kind must be one of {INPUT_KINDS}, got {self.input_kind!r}")
        if self.intercept not in INTERCEPT_POINTS:
            raise ValidationError(f"intercept must be one of {INTERCEPT_POINTS}, got {self.intercept!r}")
        if self.mse_weight < 0 or self.perceptual_weight < 0:
            raise ValidationError("attacker loss weights must be non-negative")

    @property
    def decoder_input_dim(self) -> int:
        if self.input_kind == "codebook_indices":
            return self.input_dim * self.codebook_size
        return self.input_dim

    def to_dict(self):
        out = asdict(self)
        out["widths"] = list(self.widths)
        return out


class InversionNetwork(nn.Module):
    def __init__(self, spec: AttackerSpec):
        super().__init__()
        self.spec = spec
        self.decoder = ImageDecoder(spec.decoder_input_dim, spec.widths, spec.resolution, spec.out_channels)

    def embed(self, data: torch.Tensor) -> torch.Tensor:
        if self.spec.input_kind == "codebook_indices":
            return F.one_hot(data.long(), self.spec.codebook_size).flatten(1).float()
        return data.float()

    def forward(self, data: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.embed(data))


@dataclass
class TrainedAttacker:
    network: InversionNetwork
    history: List[Dict[str, float]] = field(default_factory=list)
    initial_loss: float = float("nan")
    perceptual: Optional[PerceptualNet] = None

    @property
    def spec(self) -> AttackerSpec:
        return self.network.spec


def _check_pairs(pairs: AttackPairs, spec: AttackerSpec):
    if len(pairs) == 0:
        raise ValidationError("attacker needs at least one training pair")
    _check_kind(pairs.intercepted, spec)


def _check_kind(interception: Interception, spec: AttackerSpec):
    if interception.kind != spec.input_kind:
        raise ValidationError(f"attacker expects {spec.input_kind} but got {interception.kind}")
    if interception.data.shape[-1] != spec.input_dim:
        raise ValidationError(f"attacker expects inputs of length {spec.input_dim}, "
                              f"got {interception.data.shape[-1]}")


def attacker_loss(recon, target, spec: AttackerSpec, perceptual: Optional[PerceptualNet]):
    mse = F.mse_loss(recon, target)
    loss = spec.mse_weight * mse
    if spec.perceptual_weight > 0:
        if perceptual is None:
            raise ValidationError("perceptual_weight > 0 needs a perceptual network")
        loss = loss + spec.perceptual_weight * perceptual.distance(recon, target).mean()
    return loss, mse


def train_attacker(pairs: AttackPairs, spec: AttackerSpec, epochs: int, seed: int,
                   perceptual: Optional[PerceptualNet] = None, batch_size: int = 128,
                   learning_rate: float = 1e-3, val_fraction: float = 0.1,
                   on_epoch: Optional[Callable[[Dict[str, float]], None]] = None) -> TrainedAttacker:
    """Fit an inversion network on ``pairs``.

    A ``val_fraction`` slice of the pairs is held out; the weights with the
    lowest held-out MSE are kept (early stopping), so an attacker facing
    information-free inputs settles on the mean image instead of memorizing.
    """
    _check_pairs(pairs, spec)
    if epochs < 1:
        raise ValidationError("attacker needs at least one epoch")
    torch.manual_seed(seed)
    net = InversionNetwork(spec)
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)

    n = len(pairs)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction)) if n >= 10 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_train, y_train = pairs.intercepted.data[train_idx], pairs.originals[train_idx]
    x_val, y_val = pairs.intercepted.data[val_idx], pairs.originals[val_idx]

    rng = np.random.default_rng(seed + 1)
    history, initial_loss = [], float("nan")
    best_state, best_val = None, float("inf")
    for epoch in range(epochs):
        net.train()
        perm = rng.permutation(len(train_idx))
        total, mse_sum, seen = 0.0, 0.0, 0
        for step, start in enumerate(range(0, len(perm), batch_size)):
            idx = perm[start:start + batch_size]
            recon = net(x_train[idx])
            loss, mse = attacker_loss(recon, y_train[idx], spec, perceptual)
            if not torch.isfinite(loss):
                raise TrainingDivergenceError("non-finite attacker loss",
                                              {"epoch": epoch, "step": step, "loss": float(loss.detach())})
            if epoch == 0 and step == 0:
                initial_loss = float(loss.detach())
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            mse_sum += float(mse.detach()) * len(idx)
            seen += len(idx)
        row = {"epoch": epoch, "loss": total / seen, "train_mse": mse_sum / seen}
        if n_val:
            row["val_mse"] = _mean_mse(net, x_val, y_val)
            if row["val_mse"] < best_val:
                best_val, best_state = row["val_mse"], copy.deepcopy(net.state_dict())
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    return TrainedAttacker(net, history, initial_loss, perceptual)


@torch.no_grad()
def _mean_mse(net, x, y, batch_size: int = 512) -> float:
    net.eval()
    total = 0.0
    for start in range(0, len(x), batch_size):
        total += float(F.mse_loss(net(x[start:start + batch_size]), y[start:start + batch_size],
                                  reduction="sum"))
    net.train()
    return total / y.numel()


@dataclass
class AttackResult:
    reconstructions: np.ndarray  # (N, H, W, C) in [0, 1]
    mse: np.ndarray              # per image
    perceptual: np.ndarray       # per image; NaN without a perceptual network
    mi_leakage: float = float("nan")

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse))

    @property
    def mean_psnr(self) -> float:
        from .metrics import psnr_from_mse
        return psnr_from_mse(self.mean_mse)


@torch.no_grad()
def attack(attacker: TrainedAttacker, intercepted: Interception, originals=None, mi_config=None,
           seed: int = 0, batch_size: int = 512) -> AttackResult:
    """Reconstruct images from ``intercepted``; with ``originals`` also score the attack.

    MI leakage is estimated (see :func:`tosc_privacy.metrics.mi_leakage`)
    when ``mi_config`` is given.
    """
    from .metrics import mi_leakage

    _check_kind(intercepted, attacker.spec)
    net = attacker.network.eval()
    recon = torch.cat([net(intercepted.data[s:s + batch_size]) for s in range(0, len(intercepted), batch_size)])
    n = len(recon)
    mse = np.full(n, np.nan)
    perc = np.full(n, np.nan)
    mi = float("nan")
    if originals is not None:
        target = to_tensor_images(originals).float()
        if target.shape != recon.shape:
            raise ValidationError(f"originals shape {tuple(target.shape)} does not match "
                                  f"reconstructions {tuple(recon.shape)}")
        mse = (recon - target).pow(2).flatten(1).mean(1).double().numpy()
        if attacker.perceptual is not None:
            perc = torch.cat([attacker.perceptual.distance(recon[s:s + batch_size], target[s:s + batch_size])
                              for s in range(0, n, batch_size)]).double().numpy()
        if mi_config is not None:
            mi = mi_leakage(to_numpy_images(target), to_numpy_images(recon), mi_config, seed=seed)
    return AttackResult(to_numpy_images(recon), mse, perc, mi)


# --------------------------------------------------------------------------
# visual comparison
# --------------------------------------------------------------------------

def save_reconstruction_grid(path, originals, reconstructions, n: int = 8, text: Optional[Dict[str, str]] = None):
    """Two-row PNG: ``n`` originals above their reconstructions. ``text`` goes into PNG tEXt chunks."""
    originals = np.asarray(originals)[:n]
    reconstructions = np.asarray(reconstructions)[:n]
    if originals.shape != reconstructions.shape:
        raise ValidationError("originals and reconstructions must have the same shape")
    rows = [np.concatenate(list(originals), axis=1), np.concatenate(list(reconstructions), axis=1)]
    grid = np.clip(np.rint(np.concatenate(rows, axis=0) * 255), 0, 255).astype(np.uint8)
    info = PngInfo()
    for k, v in sorted((text or {}).items()):
        info.add_text(k, str(v))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path, pnginfo=info)
    return path
