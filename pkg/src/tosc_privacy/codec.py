"""DeepJSCC encoder, task-inference heads, and the bundle archive format."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .channel import normalize_power
from .errors import IntegrityError, NotFoundError, ValidationError


@dataclass
class EncoderSpec:
    """Backbone description. Each width is one stage: conv (stride 1) then conv (stride 2).

    ``residual_blocks`` adds that many two-conv residual blocks after each
    downsampling conv. ``variational`` adds a log-variance projection next to
    the mean projection (information-bottleneck encoders).
    """

    d: int = 128
    widths: Tuple[int, ...] = (32, 64, 128, 128)
    residual_blocks: int = 0
    in_channels: int = 3
    resolution: int = 32
    output_norm: bool = True
    variational: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.d <= 0 or self.d % 2:
            raise ValidationError(f"feature dimension d must be even and positive, got {self.d}")
        if not self.widths:
            raise ValidationError("encoder needs at least one stage")
        if self.resolution % (2 ** len(self.widths)):
            raise ValidationError(
                f"resolution {self.resolution} is not divisible by 2**{len(self.widths)} stages"
            )

    @property
    def bottleneck_size(self) -> int:
        return self.resolution // 2 ** len(self.widths)

    def to_dict(self):
        out = asdict(self)
        out["widths"] = list(self.widths)
        return out


@dataclass
class HeadSpec:
    """``kind`` is ``"multiclass"`` (``num_classes`` logits) or ``"binary"`` (one logit)."""

    kind: str = "multiclass"
    num_classes: int = 10
    input_dim: int = 128
    hidden: Tuple[int, ...] = (1024, 1024)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.kind not in ("multiclass", "binary"):
            raise ValidationError(f"head kind must be 'multiclass' or 'binary', got {self.kind!r}")
        if self.kind == "multiclass" and self.num_classes < 2:
            raise ValidationError("multiclass head needs at least 2 classes")

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.kind == "multiclass" else 1

    def to_dict(self):
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


def conv_block(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.PReLU(cout))


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.act = nn.PReLU(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)
        self.out_act = nn.PReLU(ch)

    def forward(self, x):
        return self.out_act(x + self.conv2(self.act(self.conv1(x))))


class Encoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        layers = []
        cin = spec.in_channels
        for w in spec.widths:
            layers += [conv_block(cin, w, 1), conv_block(w, w, 2)]
            layers += [ResidualBlock(w) for _ in range(spec.residual_blocks)]
            cin = w
        self.backbone = nn.Sequential(*layers)
        flat = spec.widths[-1] * spec.bottleneck_size ** 2
        self.project = nn.Linear(flat, spec.d)
        self.logvar = nn.Linear(flat, spec.d) if spec.variational else None

    def _trunk(self, x):
        expected = (self.spec.in_channels, self.spec.resolution, self.spec.resolution)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ValidationError(f"encoder expects images of shape (N, {expected}), got {tuple(x.shape)}")
        return self.backbone(x).flatten(1)

    def latent(self, x) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        """Un-normalized mean projection and, for variational encoders, its log-variance."""
        h = self._trunk(x)
        return self.project(h), (self.logvar(h) if self.logvar is not None else None)

    def forward(self, x):
        z = self.project(self._trunk(x))
        return normalize_power(z) if self.spec.output_norm else z


class TaskHead(nn.Module):
    def __init__(self, spec: HeadSpec):
        super().__init__()
        self.spec = spec
        dims = (spec.input_dim,) + spec.hidden
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.PReLU(b)]
        layers.append(nn.Linear(dims[-1], spec.out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[-1] != self.spec.input_dim:
            raise ValidationError(f"head expects features of length {self.spec.input_dim}, got {x.shape[-1]}")
        return self.net(x)


class ImageDecoder(nn.Module):
    """Mirror of :class:`Encoder`: linear to the bottleneck grid, then transposed-conv upsampling.

    Shared by the simulated adversary used in adversarial training and by the
    black-box inversion attacker; outputs images in [0, 1].
    """

    def __init__(self, in_dim: int, widths: Sequence[int] = (32, 64, 128, 128),
                 resolution: int = 32, out_channels: int = 3):
        super().__init__()
        widths = tuple(widths)
        self.in_dim = in_dim
        self.grid = resolution // 2 ** len(widths)
        self.top = widths[-1]
        self.expand = nn.Sequential(nn.Linear(in_dim, self.top * self.grid ** 2), nn.PReLU())
        layers = []
        rev = widths[::-1]
        for i, w in enumerate(rev):
            nxt = rev[i + 1] if i + 1 < len(rev) else widths[0]
            layers += [nn.ConvTranspose2d(w, nxt, 4, stride=2, padding=1), nn.PReLU(nxt),
                       conv_block(nxt, nxt, 1)]
        layers.append(nn.Conv2d(widths[0], out_channels, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, z):
        h = self.expand(z).view(-1, self.top, self.grid, self.grid)
        return torch.sigmoid(self.body(h))


# --------------------------------------------------------------------------
# functional surface
# --------------------------------------------------------------------------

def to_tensor_images(images) -> torch.Tensor:
    """``(N, H, W, C)`` numpy in [0, 1] -> ``(N, C, H, W)`` float32 tensor; tensors pass through."""
    if isinstance(images, torch.Tensor):
        return images
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValidationError(f"expected (N, H, W, C) images, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_numpy_images(images: torch.Tensor) -> np.ndarray:
    return images.detach().permute(0, 2, 3, 1).cpu().numpy()


@torch.no_grad()
def encode(images, encoder: Encoder) -> torch.Tensor:
    """Encode one image ``(H, W, C)`` or a batch; returns ``(N, d)`` features."""
    was_training = encoder.training
    encoder.eval()
    try:
        return encoder(to_tensor_images(images))
    finally:
        encoder.train(was_training)


def infer_task(received: torch.Tensor, head: TaskHead) -> torch.Tensor:
    if received.dim() == 1:
        received = received[None]
    return head(received)


def predict(logits: torch.Tensor) -> torch.Tensor:
    """Argmax for multiclass logits, sign for a single binary logit."""
    if logits.shape[-1] == 1:
        return (logits[..., 0] > 0).long()
    return logits.argmax(-1)


def task_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Cross-entropy (softmax for multiclass, sigmoid for a single logit), mean over the batch."""
    labels = torch.as_tensor(labels)
    if logits.shape[0] != labels.shape[0]:
        raise ValidationError(f"{logits.shape[0]} logits vs {labels.shape[0]} labels")
    n_out = logits.shape[-1]
    if n_out == 1:
        if labels.numel() and not torch.all((labels == 0) | (labels == 1)):
            raise ValidationError("binary labels must be 0 or 1")
        return F.binary_cross_entropy_with_logits(logits[..., 0], labels.to(logits.dtype))
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_out):
        raise ValidationError(f"label outside [0, {n_out})")
    return F.cross_entropy(logits, labels)


# --------------------------------------------------------------------------
# bundle archive
# --------------------------------------------------------------------------

_ZIP_DATE = (2020, 1, 1, 0, 0, 0)


@dataclass
class ModelBundle:
    """Trained parameters plus the metadata needed to rebuild and re-evaluate them.

    ``state`` maps a component name (``encoder``, ``head``, ``codebook`` ...)
    to its ``state_dict``.
    """

    metadata: dict
    state: dict = field(default_factory=dict)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        torch.save(self.state, buf)
        header = json.dumps(self.metadata, sort_keys=True, indent=2).encode("utf-8")
        tmp = path.with_suffix(path.suffix + ".tmp")
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            for name, payload in (("metadata.json", header), ("state.pt", buf.getvalue())):
                info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
                info.external_attr = 0o644 << 16
                zf.writestr(info, payload)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "ModelBundle":
        path = Path(path)
        if not path.is_file():
            raise NotFoundError(f"bundle not found: {path}")
        try:
            with zipfile.ZipFile(path) as zf:
                metadata = json.loads(zf.read("metadata.json").decode("utf-8"))
                state = torch.load(io.BytesIO(zf.read("state.pt")), weights_only=True)
        except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, RuntimeError) as exc:
            raise IntegrityError(path, f"unreadable bundle ({exc})") from None
        return cls(metadata=metadata, state=state)

    @staticmethod
    def read_metadata(path) -> dict:
        path = Path(path)
        if not path.is_file():
            raise NotFoundError(f"bundle not found: {path}")
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("metadata.json").decode("utf-8"))
