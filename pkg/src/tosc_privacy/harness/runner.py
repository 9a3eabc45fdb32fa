"""Train, evaluate and attack every scheme of a config, one ``<out>/<label>/<seed>/`` directory per run.

Per-run files:

``bundle.zip``
    trained transceiver plus metadata (config hash, seed, mechanism parameters).
``train.log`` / ``eval.log`` / ``attack.log``
    run header (config hash, seed, deviations from the reference settings)
    followed by one line per epoch or evaluation.
``metrics.csv``
    one row per test SNR; deterministic columns only, so reruns are
    byte-identical. Attack columns stay empty until the attack step.
``timing.csv``
    wall-clock training and inference times, kept apart because they vary
    between runs.
``grids/snr<value>.png``
    originals above the attacker's reconstructions.
``FAILED``
    present when the last step for this run raised; holds the error.

A failing scheme never touches the directories of the others.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import statistics
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import torch

from ..adversary import (
    AttackerSpec,
    VictimOracle,
    attack,
    collect_attack_pairs,
    load_or_train_perceptual,
    save_reconstruction_grid,
    train_attacker,
)
from ..channel import NOISELESS
from ..codec import EncoderSpec, HeadSpec, ModelBundle
from ..data import LabeledImageSet, attribute_view, corpus_info, load_dataset
from ..errors import ConfigError, NotFoundError, ToscError, TrainingDivergenceError
from ..metrics import (
    METRICS_COLUMNS,
    TIMING_COLUMNS,
    MetricsRecord,
    format_value,
    hardware_descriptor,
    profile,
    read_rows,
    write_records,
)
from ..privacy import DPConfig, IBALConfig, LBVQConfig
from ..system import SchemeSpec, TrainSettings, Transceiver, cell_seed, derive_seed, evaluate, fit
from .config import ExperimentConfig, SchemeEntry, deviations

logger = logging.getLogger(__name__)

BUNDLE = "bundle.zip"
FAILED = "FAILED"
DATA_SUBSET_SEED = 0  # subsets are drawn once per config, not per run seed


@dataclass
class StepReport:
    """Outcome of one step over a set of (label, seed) runs."""

    step: str
    ok: List[str] = field(default_factory=list)
    failed: Dict[str, str] = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return not self.failed

    def merge(self, other: "StepReport") -> "StepReport":
        self.ok += other.ok
        self.failed.update(other.failed)
        return self


def run_dir(out, label: str, seed: int) -> Path:
    return Path(out) / label / str(seed)


def snr_tag(snr_db: float) -> str:
    return "noiseless" if snr_db == NOISELESS else f"{snr_db:g}"


# --------------------------------------------------------------------------
# data and models
# --------------------------------------------------------------------------

def load_split(cfg: ExperimentConfig, split: str, data_root=None) -> LabeledImageSet:
    ds = cfg.dataset
    limit = ds.train_limit if split == "train" else ds.test_limit
    balance = ds.attribute if ds.balance else None
    data = load_dataset(ds.name, cfg.data_root(data_root), split, seed=DATA_SUBSET_SEED, limit=limit,
                        balance_attribute=balance)
    if ds.attribute is not None:
        data = attribute_view(data, ds.attribute)
    return data


def scheme_spec(cfg: ExperimentConfig, entry: SchemeEntry) -> SchemeSpec:
    info = corpus_info(cfg.dataset.name)
    arch = cfg.architecture
    encoder = EncoderSpec(d=cfg.d, widths=arch.widths, resolution=info.resolution,
                          residual_blocks=arch.lbvq_residual_blocks if entry.scheme == "lbvq" else 0)
    if cfg.dataset.attribute is not None:
        head = HeadSpec(kind="binary", num_classes=2, input_dim=cfg.d, hidden=arch.head_hidden)
    else:
        head = HeadSpec(num_classes=len(info.class_names), input_dim=cfg.d, hidden=arch.head_hidden)
    mech = {}
    if entry.scheme == "dp":
        mech["dp"] = DPConfig(entry.epsilon, cfg.dp.clip_bound)
    elif entry.scheme == "encryption":
        mech["key_hex"] = cfg.shuffle_key_hex()
    elif entry.scheme == "ibal":
        mech["ibal"] = IBALConfig(cfg.ibal.lambda_adv, cfg.ibal.lambda_ib, cfg.ibal.adversary_steps)
    elif entry.scheme == "lbvq":
        mech["lbvq"] = LBVQConfig(cfg.lbvq.K, cfg.lbvq.seg_dim, cfg.lbvq.beta)
    return SchemeSpec(entry.scheme, encoder, head, refiner_hidden=arch.refiner_hidden, **mech)


def _load_system(cfg: ExperimentConfig, entry: SchemeEntry, seed: int, out) -> Transceiver:
    path = run_dir(out, entry.label, seed) / BUNDLE
    if not path.is_file():
        raise NotFoundError(f"no trained bundle for {entry.label} seed {seed} at {path}; run train first")
    bundle = ModelBundle.load(path)
    meta = bundle.metadata
    if meta.get("scheme") != entry.scheme or meta.get("config_hash") != cfg.config_hash:
        raise ConfigError(f"{path} was trained for scheme {meta.get('scheme')!r} under config "
                          f"{meta.get('config_hash')}, not {entry.scheme!r} under {cfg.config_hash}")
    return Transceiver.from_bundle(bundle)


# --------------------------------------------------------------------------
# logging helpers
# --------------------------------------------------------------------------

def run_header(cfg: ExperimentConfig, entry: SchemeEntry, seed: int, step: str) -> List[str]:
    lines = [
        f"# step={step} config={cfg.name} config_hash={cfg.config_hash} label={entry.label} "
        f"scheme={entry.scheme} seed={seed}",
        f"# dataset={cfg.dataset.name} attribute={cfg.dataset.attribute or '-'} "
        f"train_limit={cfg.dataset.train_limit or 'all'} test_limit={cfg.dataset.test_limit or 'all'}",
        f"# hardware={hardware_descriptor()}",
    ]
    devs = deviations(cfg)
    lines.append("# deviations from reference settings: " + ("none" if not devs else str(len(devs))))
    lines += [f"#   {d}" for d in devs]
    return lines


def _fmt(losses: Dict[str, float]) -> str:
    return " ".join(f"{k}={v:.6g}" for k, v in sorted(losses.items()))


def _write_timing(path: Path, row: Dict[str, object]):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TIMING_COLUMNS)
    writer.writerow([format_value(row[c]) for c in TIMING_COLUMNS])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _write_lines(path: Path, lines: Iterable[str]):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _for_each_run(cfg: ExperimentConfig, step: str, seeds, labels, body: Callable) -> StepReport:
    report = StepReport(step)
    for seed in seeds:
        for label in labels:
            entry = cfg.entry(label)
            key = f"{label}/{seed}"
            marker = run_dir(cfg.out, label, seed) / FAILED
            try:
                body(entry, seed)
            except (ToscError, RuntimeError, ValueError) as exc:
                logger.error("%s %s failed: %s", step, key, exc)
                marker.parent.mkdir(parents=True, exist_ok=True)
                marker.write_text(f"step={step}\n{type(exc).__name__}: {exc}\n\n{traceback.format_exc()}",
                                  encoding="utf-8")
                report.failed[key] = f"{type(exc).__name__}: {exc}"
                continue
            if marker.exists():
                marker.unlink()
            report.ok.append(key)
    return report


def _resolve(cfg: ExperimentConfig, out, seeds, labels):
    if out is not None:
        cfg = replace(cfg, out=str(out))
    if cfg.out is None:
        raise ConfigError("no output directory: pass --out or set 'out' in the config", cfg.source)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    labels = tuple(cfg.labels if labels is None else labels)
    for label in labels:
        cfg.entry(label)
    return cfg, seeds, labels


# --------------------------------------------------------------------------
# steps
# --------------------------------------------------------------------------

def run_train(cfg: ExperimentConfig, out=None, seeds: Optional[Sequence[int]] = None,
              labels: Optional[Sequence[str]] = None, data_root=None) -> StepReport:
    """Train each (label, seed) at ``snr_train_db`` and write its bundle and per-epoch log."""
    cfg, seeds, labels = _resolve(cfg, out, seeds, labels)
    train_set = load_split(cfg, "train", data_root)

    def body(entry: SchemeEntry, seed: int):
        directory = run_dir(cfg.out, entry.label, seed)
        spec = scheme_spec(cfg, entry)
        log_lines = run_header(cfg, entry, seed, "train")
        log_lines.append(f"# train_size={len(train_set)} epochs={cfg.epochs} batch_size={cfg.batch_size} "
                         f"snr_train_db={cfg.snr_train_db:g}")
        log_path = directory / "train.log"
        _write_lines(log_path, log_lines)

        def on_epoch(entry_log):
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(f"epoch={entry_log.epoch} steps={entry_log.steps} seconds={entry_log.seconds:.3f} "
                         f"{_fmt(entry_log.losses)}\n")

        # the same init seed for every label keeps schemes that share an architecture paired
        torch.manual_seed(seed)
        system = Transceiver(spec)
        settings = TrainSettings(epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                                 snr_train_db=cfg.snr_train_db, seed=seed,
                                 lbvq_warmup_epochs=cfg.lbvq.warmup_epochs,
                                 kmeans_samples=cfg.lbvq.kmeans_samples)
        try:
            logs = fit(system, train_set, settings, on_epoch=on_epoch)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"{entry.label} seed {seed}: training diverged",
                                          {**exc.diagnostics, "snr_db": cfg.snr_train_db}) from exc
        epoch_seconds = statistics.mean(l.seconds for l in logs)
        meta = {
            "config_hash": cfg.config_hash, "config_name": cfg.name, "seed": seed, "label": entry.label,
            "scheme": entry.scheme, "dataset": cfg.dataset.name, "attribute": cfg.dataset.attribute,
            "preprocessing": train_set.preprocessing, "train_size": len(train_set),
            "snr_train_db": cfg.snr_train_db, "epochs": cfg.epochs,
            "final_losses": logs[-1].losses, "epoch_seconds": epoch_seconds,
        }
        if entry.scheme == "lbvq":
            meta.update(K=cfg.lbvq.K, seg_dim=cfg.lbvq.seg_dim)
        system.to_bundle(meta).save(directory / BUNDLE)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(f"# done final {_fmt(logs[-1].losses)}\n")

    return _for_each_run(cfg, "train", seeds, labels, body)


def _record(cfg: ExperimentConfig, entry: SchemeEntry, seed: int, snr: float, acc: float, flops: int,
            params: int, preprocessing: str) -> MetricsRecord:
    nan = math.nan
    return MetricsRecord(
        scheme=entry.scheme, label=entry.label, dataset=cfg.dataset.name, seed=seed, snr_db=float(snr),
        accuracy=acc, snr_train_db=cfg.snr_train_db, attribute=cfg.dataset.attribute or "",
        flops=flops, params=params,
        epsilon=entry.epsilon if entry.scheme == "dp" else nan,
        clip_bound=cfg.dp.clip_bound if entry.scheme == "dp" else nan,
        lambda_adv=cfg.ibal.lambda_adv if entry.scheme == "ibal" else nan,
        lambda_ib=cfg.ibal.lambda_ib if entry.scheme == "ibal" else nan,
        codebook_size=float(cfg.lbvq.K) if entry.scheme == "lbvq" else nan,
        seg_dim=float(cfg.lbvq.seg_dim) if entry.scheme == "lbvq" else nan,
        preprocessing=preprocessing, config_hash=cfg.config_hash,
    )


def run_eval(cfg: ExperimentConfig, out=None, seeds: Optional[Sequence[int]] = None,
             labels: Optional[Sequence[str]] = None, data_root=None) -> StepReport:
    """Accuracy at every test SNR plus cost profile; rewrites ``metrics.csv`` and ``timing.csv``."""
    cfg, seeds, labels = _resolve(cfg, out, seeds, labels)
    test_set = load_split(cfg, "test", data_root)

    def body(entry: SchemeEntry, seed: int):
        directory = run_dir(cfg.out, entry.label, seed)
        system = _load_system(cfg, entry, seed, cfg.out)
        bundle_meta = ModelBundle.read_metadata(directory / BUNDLE)
        lines = run_header(cfg, entry, seed, "eval") + [f"# test_size={len(test_set)}"]
        cost = profile(system, test_set.images[:1], batch_size=cfg.batch_size,
                       epoch_seconds=bundle_meta["epoch_seconds"], snr_db=cfg.snr_train_db)
        records = []
        for snr in cfg.eval_snrs:
            acc = evaluate(system, test_set, snr, seed=cell_seed(entry.label, snr, seed),
                           batch_size=cfg.batch_size)
            records.append(_record(cfg, entry, seed, snr, acc, cost.flops, cost.params, test_set.preprocessing))
            lines.append(f"eval snr_db={snr_tag(snr)} accuracy={acc!r}")
        lines.append(f"# evaluations={len(records)} flops={cost.flops} params={cost.params}")
        write_records(directory / "metrics.csv", records)
        timing = {"label": entry.label, "seed": seed, "epoch_seconds": cost.epoch_seconds,
                  "inference_seconds": cost.inference_seconds, "hardware": cost.hardware,
                  "config_hash": cfg.config_hash}
        _write_timing(directory / "timing.csv", timing)
        _write_lines(directory / "eval.log", lines)

    return _for_each_run(cfg, "eval", seeds, labels, body)


def _perceptual_cache(cfg: ExperimentConfig) -> Path:
    ds = cfg.dataset
    tag = f"{ds.name}-{ds.attribute or 'all'}-{ds.train_limit or 'full'}-{cfg.attack.perceptual_epochs}"
    return Path(cfg.out) / "_shared" / f"perceptual-{tag}.zip"


def run_attack(cfg: ExperimentConfig, out=None, seeds: Optional[Sequence[int]] = None,
               labels: Optional[Sequence[str]] = None, data_root=None) -> StepReport:
    """Train one black-box inversion attacker per (label, seed, attack SNR) and fill the attack columns."""
    cfg, seeds, labels = _resolve(cfg, out, seeds, labels)
    train_set = load_split(cfg, "train", data_root)
    test_set = load_split(cfg, "test", data_root)
    perceptual = None
    if cfg.attack.perceptual_weight > 0:
        perceptual = load_or_train_perceptual(train_set, _perceptual_cache(cfg), seed=DATA_SUBSET_SEED,
                                              epochs=cfg.attack.perceptual_epochs)
    n_pairs = min(cfg.attack.pairs or len(train_set), len(train_set))
    n_test = min(cfg.attack.test_pairs or len(test_set), len(test_set))

    def body(entry: SchemeEntry, seed: int):
        directory = run_dir(cfg.out, entry.label, seed)
        metrics_path = directory / "metrics.csv"
        if not metrics_path.is_file():
            raise NotFoundError(f"no metrics.csv for {entry.label} seed {seed}; run eval first")
        system = _load_system(cfg, entry, seed, cfg.out)
        rows = read_rows(metrics_path)
        records = [MetricsRecord(**{k: row[k] for k in METRICS_COLUMNS}) for row in rows]
        by_snr = {r.snr_db: r for r in records}
        lines = run_header(cfg, entry, seed, "attack")
        lines.append(f"# attacker_pairs={n_pairs} victim_pairs={n_test} epochs={cfg.attack.epochs} "
                     f"intercept={cfg.attack.intercept}")
        K = cfg.lbvq.K
        input_dim = cfg.d // cfg.lbvq.seg_dim if entry.scheme == "lbvq" else cfg.d
        for snr in cfg.attack_snrs:
            if snr not in by_snr:
                raise NotFoundError(f"metrics.csv of {entry.label} seed {seed} has no row for {snr_tag(snr)} dB")
            base = cell_seed(entry.label, snr, seed)
            oracle = VictimOracle(system, snr, intercept=cfg.attack.intercept)
            spec = AttackerSpec(input_kind=system.intercept_kind, input_dim=input_dim, codebook_size=K,
                                widths=cfg.architecture.widths, resolution=corpus_info(cfg.dataset.name).resolution,
                                mse_weight=cfg.attack.mse_weight, perceptual_weight=cfg.attack.perceptual_weight,
                                intercept=cfg.attack.intercept)
            pairs = collect_attack_pairs(oracle, train_set, n_pairs, seed=derive_seed(base, 11))
            history = []
            try:
                trained = train_attacker(pairs, spec, cfg.attack.epochs, seed=derive_seed(base, 12),
                                         perceptual=perceptual, batch_size=cfg.attack.batch_size,
                                         learning_rate=cfg.attack.learning_rate, on_epoch=history.append)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"attacker on {entry.label} seed {seed} diverged",
                                              {**exc.diagnostics, "scheme": entry.scheme, "snr_db": snr}) from exc
            captured = collect_attack_pairs(oracle, test_set, n_test, seed=derive_seed(base, 13))
            result = attack(trained, captured.intercepted, captured.originals, mi_config=cfg.mi,
                            seed=derive_seed(base, 14))
            rec = by_snr[snr]
            rec.attacker_mse = result.mean_mse
            rec.attacker_psnr_db = result.mean_psnr
            rec.mi_leakage = result.mi_leakage
            rec.intercept = cfg.attack.intercept
            for h in history:
                lines.append(f"attacker snr_db={snr_tag(snr)} " + _fmt(h))
            lines.append(f"attack snr_db={snr_tag(snr)} mse={result.mean_mse!r} psnr_db={result.mean_psnr!r} "
                         f"mi_leakage={result.mi_leakage!r}")
            originals = captured.originals.permute(0, 2, 3, 1).numpy()
            save_reconstruction_grid(directory / "grids" / f"snr{snr_tag(snr)}.png", originals,
                                     result.reconstructions, n=cfg.attack.grid_images,
                                     text={"config_hash": cfg.config_hash, "seed": seed, "label": entry.label,
                                           "snr_db": snr_tag(snr), "mi_leakage": f"{result.mi_leakage:.4f}",
                                           "attacker_mse": f"{result.mean_mse:.6f}"})
        write_records(metrics_path, records)
        _write_lines(directory / "attack.log", lines)

    return _for_each_run(cfg, "attack", seeds, labels, body)


def run_suite(cfg: ExperimentConfig, out=None, seeds: Optional[Sequence[int]] = None,
              labels: Optional[Sequence[str]] = None, data_root=None, attack_step: bool = True) -> StepReport:
    """Train, evaluate and (optionally) attack; later steps skip runs whose earlier step failed."""
    cfg, seeds, labels = _resolve(cfg, out, seeds, labels)
    report = StepReport("suite")
    for step in (run_train, run_eval) + ((run_attack,) if attack_step else ()):
        for seed in seeds:
            todo = [l for l in labels if f"{l}/{seed}" not in report.failed]
            if todo:
                report.merge(step(cfg, seeds=[seed], labels=todo, data_root=data_root))
    report.ok = sorted(set(report.ok) - set(report.failed))
    return report
