"""Task, privacy and cost metrics.

MI leakage is a Donsker-Varadhan lower bound evaluated on held-out pairs.
The critic is separable (see :class:`SeparableCritic`), so every pairing
of a batch is scored by one matrix product. It is fitted as a joint-vs-product
classifier (whose optimal logit is the log density ratio the bound wants),
with early stopping on a validation slice, then the bound is evaluated on a
third, untouched slice using all off-diagonal pairs as product samples.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import math
import platform
import statistics
import time
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError

# --------------------------------------------------------------------------
# task and distortion
# --------------------------------------------------------------------------


def accuracy(logits, labels) -> float:
    """Top-1 accuracy. A single logit column is read as a binary decision at 0."""
    logits = torch.as_tensor(logits)
    labels = torch.as_tensor(labels)
    if len(labels) == 0:
        raise ValidationError("accuracy of an empty set is undefined")
    if len(logits) != len(labels):
        raise ValidationError(f"{len(logits)} predictions vs {len(labels)} labels")
    if logits.dim() == 1 or logits.shape[-1] == 1:
        pred = (logits.reshape(-1) > 0).long()
    else:
        pred = logits.argmax(-1)
    return float((pred == labels.long()).double().mean())


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; ``inf`` when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    return psnr_from_mse(float(np.mean((a - b) ** 2)))


# --------------------------------------------------------------------------
# MI leakage
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MIEstimatorConfig:
    min_pairs: int = 1000
    projection_size: int = 16
    embed_dim: int = 32
    hidden: int = 256
    epochs: int = 300
    batch_size: int = 500
    learning_rate: float = 3e-3
    train_fraction: float = 0.5
    val_fraction: float = 0.1
    patience: int = 30

    def to_dict(self):
        return asdict(self)


class _Embedding(nn.Module):
    """Point embedding ``u(x)`` (linear skip plus MLP) and a scalar unary term ``h(x)``."""

    def __init__(self, in_dim: int, hidden: int, embed_dim: int):
        super().__init__()
        self.skip = nn.Linear(in_dim, embed_dim)
        self.mlp = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                                 nn.Linear(hidden, embed_dim + 1))

    def forward(self, x):
        out = self.mlp(x)
        return self.skip(x) + out[:, :-1], out[:, -1]


class SeparableCritic(nn.Module):
    """``T(x, y) = -||u(x) - v(y)||^2 + h(x) + k(y)``.

    Expanding the square makes ``T`` an inner product of augmented
    embeddings, so all ``n x n`` pairings cost one matrix product. The
    distance form suits (original, reconstruction) pairs, where dependence
    shows up as closeness in some learned feature space.
    """

    def __init__(self, x_dim: int, y_dim: int, hidden: int, embed_dim: int):
        super().__init__()
        self.f = _Embedding(x_dim, hidden, embed_dim)
        self.g = _Embedding(y_dim, hidden, embed_dim)

    def scores(self, x, y) -> torch.Tensor:
        """``(n, n)`` matrix of ``T(x_i, y_j)``; the diagonal holds the joint pairs."""
        u, h = self.f(x)
        v, k = self.g(y)
        return 2 * u @ v.T - (u * u).sum(1)[:, None] - (v * v).sum(1)[None, :] + h[:, None] + k[None, :]


def dv_bound(scores: torch.Tensor) -> float:
    """Donsker-Varadhan bound from a square score matrix: joint on the diagonal, product off it."""
    n = scores.shape[0]
    joint = scores.diagonal().double().mean()
    off = scores.double().masked_fill(torch.eye(n, dtype=torch.bool), -math.inf)
    log_mean_exp = torch.logsumexp(off.flatten(), 0) - math.log(n * (n - 1))
    return float(joint - log_mean_exp)


def _classifier_loss(scores: torch.Tensor) -> torch.Tensor:
    # balanced logistic loss: joint pairs vs every other pairing in the batch
    n = scores.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    return F.softplus(-scores[eye]).mean() + F.softplus(scores[~eye]).mean()


def _canonical_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Order pairs by a content digest, so any joint reordering of the pairs yields the same estimate."""
    keys = [hashlib.sha256(a.tobytes() + b.tobytes()).digest() for a, b in zip(x, y)]
    return np.array(sorted(range(len(keys)), key=lambda i: (keys[i], i)))


def _standardize(train: np.ndarray, *others: np.ndarray):
    mean = train.mean(0, keepdims=True)
    std = train.std(0, keepdims=True)
    std = np.where(std > 1e-8, std, 1.0)
    return [(a - mean) / std for a in (train,) + others]


def estimate_mi(x, y, config: Optional[MIEstimatorConfig] = None, seed: int = 0) -> float:
    """Held-out Donsker-Varadhan MI estimate (nats) between paired rows of ``x`` and ``y``."""
    cfg = config or MIEstimatorConfig()
    x = np.asarray(x, dtype=np.float32).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float32).reshape(len(y), -1)
    if len(x) != len(y):
        raise ValidationError(f"paired sets differ in size: {len(x)} vs {len(y)}")
    if len(x) < cfg.min_pairs:
        raise ValidationError(f"MI estimate needs at least {cfg.min_pairs} pairs, got {len(x)}")

    order = _canonical_order(x, y)
    order = order[np.random.default_rng(seed).permutation(len(order))]
    n = len(order)
    n_train = int(n * cfg.train_fraction)
    n_val = max(int(n * cfg.val_fraction), 2)
    tr, va, te = order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]
    x_tr, x_va, x_te = (torch.from_numpy(a) for a in _standardize(x[tr], x[va], x[te]))
    y_tr, y_va, y_te = (torch.from_numpy(a) for a in _standardize(y[tr], y[va], y[te]))

    # callers may hold a no_grad context (e.g. while scoring an attack); the critic still has to train
    with torch.enable_grad():
        return _fit_and_score(x_tr, y_tr, x_va, y_va, x_te, y_te, cfg, seed)


def _fit_and_score(x_tr, y_tr, x_va, y_va, x_te, y_te, cfg: MIEstimatorConfig, seed: int) -> float:
    n_train = len(x_tr)
    torch.manual_seed(seed)
    critic = SeparableCritic(x_tr.shape[1], y_tr.shape[1], cfg.hidden, cfg.embed_dim)
    opt = torch.optim.Adam(critic.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(seed + 1)
    # a constant critic scores exactly 0 nats on any sample, so it is the incumbent
    # that a trained critic has to beat on the validation slice
    best_val, best_state = 0.0, None
    stale = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n_train)
        for start in range(0, n_train - 1, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss = _classifier_loss(critic.scores(x_tr[idx], y_tr[idx]))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        with torch.no_grad():
            val = dv_bound(critic.scores(x_va, y_va))
        if val > best_val:
            best_val, best_state, stale = val, copy.deepcopy(critic.state_dict()), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_state is None:
        return 0.0
    critic.load_state_dict(best_state)
    with torch.no_grad():
        return dv_bound(critic.scores(x_te, y_te))


def grayscale_projection(images, size: int = 16) -> np.ndarray:
    """``(N, H, W, C)`` images in [0, 1] -> ``(N, size*size)`` luminance after area downsampling."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4:
        raise ValidationError(f"expected (N, H, W, C) images, got shape {arr.shape}")
    if arr.shape[-1] == 3:
        gray = arr @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    else:
        gray = arr.mean(-1)
    pooled = F.adaptive_avg_pool2d(torch.from_numpy(gray)[:, None], size)
    return pooled.flatten(1).numpy()


def mi_leakage(originals, reconstructions, config: Optional[MIEstimatorConfig] = None, seed: int = 0) -> float:
    """MI leakage (nats) between original images and an attacker's reconstructions."""
    cfg = config or MIEstimatorConfig()
    originals = np.asarray(originals)
    reconstructions = np.asarray(reconstructions)
    if len(originals) != len(reconstructions):
        raise ValidationError(f"paired sets differ in size: {len(originals)} vs {len(reconstructions)}")
    if len(originals) < cfg.min_pairs:
        raise ValidationError(f"MI estimate needs at least {cfg.min_pairs} pairs, got {len(originals)}")
    return estimate_mi(grayscale_projection(originals, cfg.projection_size),
                       grayscale_projection(reconstructions, cfg.projection_size), cfg, seed)


# --------------------------------------------------------------------------
# cost profiling
# --------------------------------------------------------------------------

def layer_flops(module: nn.Module, inputs: torch.Tensor, output: torch.Tensor) -> int:
    """Multiply-accumulate FLOPs (2 per MAC, biases excluded) of one affine layer call."""
    if isinstance(module, nn.Linear):
        return 2 * module.in_features * module.out_features * (output.numel() // module.out_features)
    if isinstance(module, nn.Conv2d):
        kh, kw = module.kernel_size
        return 2 * (module.in_channels // module.groups) * kh * kw * output.numel()
    if isinstance(module, nn.ConvTranspose2d):
        kh, kw = module.kernel_size
        return 2 * (module.out_channels // module.groups) * kh * kw * inputs.numel()
    return 0


def count_flops(fn, modules: Iterable[nn.Module]) -> int:
    """FLOPs of the affine layers inside ``modules`` while ``fn()`` runs."""
    total = [0]
    handles = []

    def hook(mod, inp, out):
        total[0] += layer_flops(mod, inp[0], out)

    for m in modules:
        for sub in m.modules():
            if isinstance(sub, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
                handles.append(sub.register_forward_hook(hook))
    try:
        with torch.no_grad():
            fn()
    finally:
        for h in handles:
            h.remove()
    return total[0]


def count_params(modules: Iterable[nn.Module]) -> int:
    seen, total = set(), 0
    for m in modules:
        for p in m.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                total += p.numel()
    return total


def hardware_descriptor() -> str:
    return f"{platform.machine()}/{platform.processor() or 'cpu'}/torch{torch.__version__}/threads{torch.get_num_threads()}"


@dataclass
class ProfileResult:
    flops: int
    params: int
    epoch_seconds: float
    inference_seconds: float
    hardware: str


def time_call(fn, repeats: int = 5, inner: int = 20) -> float:
    """Median over ``repeats`` runs (after one warm-up run) of the mean wall time of ``inner`` calls."""
    def run():
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        return (time.perf_counter() - t0) / inner

    run()
    return statistics.median(run() for _ in range(repeats))


def profile(system, sample_images, batch_size: int = 512, sim_adversary: Optional[nn.Module] = None,
            epoch_seconds: Optional[float] = None, train_size: Optional[int] = None,
            snr_db: float = 12.0) -> ProfileResult:
    """Per-instance training-graph FLOPs, trainable parameters and timings of a transceiver.

    ``system`` is a :class:`~tosc_privacy.system.Transceiver` or a
    :class:`~tosc_privacy.codec.ModelBundle`. FLOPs and parameters cover
    every network trained with the scheme, including a simulated adversary,
    plus the codeword distance computations of a quantizer. Inference time is
    one image through the full transmit/receive chain. ``epoch_seconds`` is
    passed through when measured during training; otherwise it is estimated
    from timed training steps over ``train_size`` images.
    """
    from .codec import ModelBundle, to_tensor_images
    from .system import Transceiver, make_sim_adversary

    if isinstance(system, ModelBundle):
        system = Transceiver.from_bundle(system)
    if system.scheme == "ibal" and sim_adversary is None:
        sim_adversary = make_sim_adversary(system)
    system.eval()
    one = to_tensor_images(sample_images)[:1].float()
    networks = [system] + ([sim_adversary] if sim_adversary is not None else [])

    def training_graph_forward():
        out = system(one, snr_db=snr_db, seed=0, mode="eval")
        if sim_adversary is not None:
            sim_adversary(out.received)

    flops = count_flops(training_graph_forward, networks)
    if system.codebook is not None:
        # squared distance to every codeword: subtract, square, accumulate per coordinate
        flops += 3 * system.codebook.K * system.spec.encoder.d
    params = count_params(networks)

    def infer():
        with torch.no_grad():
            system(one, snr_db=snr_db, seed=0, mode="eval")

    inference_seconds = time_call(infer)

    if epoch_seconds is None:
        if not train_size:
            raise ValidationError("epoch_seconds or train_size is needed to report training time")
        epoch_seconds = _estimate_epoch_seconds(system, sim_adversary, sample_images, batch_size, train_size, snr_db)
    return ProfileResult(int(flops), int(params), float(epoch_seconds), float(inference_seconds),
                         hardware_descriptor())


def _estimate_epoch_seconds(system, sim_adversary, sample_images, batch_size, train_size, snr_db):
    from .codec import to_tensor_images
    from .privacy import ibal_train_step
    from .system import train_step

    work = copy.deepcopy(system)
    adv = copy.deepcopy(sim_adversary) if sim_adversary is not None else None
    x = to_tensor_images(sample_images).float()
    reps = -(-batch_size // len(x))
    x = x.repeat(reps, 1, 1, 1)[:batch_size]
    y = torch.zeros(len(x), dtype=torch.long)
    if work.spec.head.kind == "binary":
        y = y.float()
    opt = torch.optim.Adam(work.parameters())
    opt_adv = torch.optim.Adam(adv.parameters()) if adv is not None else None

    def step():
        if work.scheme == "ibal":
            ibal_train_step((x, y), work, adv, work.spec.ibal, opt, opt_adv, snr_db, 0)
        else:
            train_step(work, (x, y), opt, snr_db, 0)

    per_step = time_call(step, repeats=3, inner=1)
    return per_step * math.ceil(train_size / batch_size)


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------

METRICS_COLUMNS = (
    "scheme", "label", "dataset", "attribute", "seed", "snr_train_db", "snr_db", "accuracy",
    "mi_leakage", "attacker_mse", "attacker_psnr_db", "flops", "params", "epsilon", "clip_bound",
    "lambda_adv", "lambda_ib", "codebook_size", "seg_dim", "intercept", "preprocessing", "config_hash",
)
TIMING_COLUMNS = ("label", "seed", "epoch_seconds", "inference_seconds", "hardware", "config_hash")


@dataclass
class MetricsRecord:
    """One evaluation cell. Unfilled numeric fields are NaN and serialize as empty strings."""

    scheme: str
    label: str
    dataset: str
    seed: int
    snr_db: float
    accuracy: float
    snr_train_db: float = 12.0
    attribute: str = ""
    mi_leakage: float = math.nan
    attacker_mse: float = math.nan
    attacker_psnr_db: float = math.nan
    flops: int = 0
    params: int = 0
    epoch_seconds: float = math.nan
    inference_seconds: float = math.nan
    epsilon: float = math.nan
    clip_bound: float = math.nan
    lambda_adv: float = math.nan
    lambda_ib: float = math.nan
    codebook_size: float = math.nan
    seg_dim: float = math.nan
    intercept: str = ""
    preprocessing: str = ""
    hardware: str = ""
    config_hash: str = ""

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValidationError(f"accuracy must lie in [0, 1], got {self.accuracy}")


def format_value(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def parse_value(text: str, kind):
    if kind is str:
        return text
    if text == "":
        return math.nan
    if kind is int:
        return int(text)
    return float(text)


_FIELD_TYPES = {f.name: f.type for f in fields(MetricsRecord)}


def _kind(name):
    t = _FIELD_TYPES[name]
    return {"str": str, "int": int, "float": float}.get(t if isinstance(t, str) else t.__name__, str)


def records_to_csv(records: Sequence[MetricsRecord], columns: Sequence[str] = METRICS_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in records:
        writer.writerow([format_value(getattr(r, c)) for c in columns])
    return buf.getvalue()


def write_records(path, records: Sequence[MetricsRecord], columns: Sequence[str] = METRICS_COLUMNS):
    from pathlib import Path
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(records_to_csv(records, columns), encoding="utf-8")
    return path


def read_rows(path) -> List[Dict[str, object]]:
    """Parse a metrics or timing CSV back into typed dictionaries."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [{k: parse_value(v, _kind(k)) if k in _FIELD_TYPES else v for k, v in row.items()}
                for row in reader]
