"""Figures and tables regenerated from the per-run CSV files only.

Outputs land in ``<results>/report/``:

``accuracy_vs_snr.png`` and ``mi_vs_snr.png``
    one labelled series per scheme, 3-seed mean with min/max whiskers.
``accuracy.csv``
    mean and sample standard deviation of accuracy per (label, SNR).
``privacy.csv``
    mean/std of MI leakage, attacker MSE and attacker PSNR per (label, SNR).
``complexity.md`` / ``complexity.csv``
    cost profile per scheme (FLOPs, Params, Train Time for 1 Epoch,
    Test Time for 1 Instance).
``attribute_accuracy.md`` / ``attribute_accuracy.csv``
    top-1 accuracy per scheme for attribute corpora at the training SNR.

The report step only reads. Every file is a pure function of the CSVs, so
rerunning it on unchanged inputs yields byte-identical outputs.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..channel import NOISELESS
from ..errors import ValidationError
from ..metrics import format_value, read_rows

COMPLEXITY_COLUMNS = ("Scheme", "FLOPs", "Params", "Train Time for 1 Epoch", "Test Time for 1 Instance")


def collect_rows(results) -> List[dict]:
    rows = []
    for path in sorted(Path(results).glob("*/*/metrics.csv")):
        rows += read_rows(path)
    return rows


def collect_timing(results) -> List[dict]:
    rows = []
    for path in sorted(Path(results).glob("*/*/timing.csv")):
        with open(path, newline="", encoding="utf-8") as fh:
            rows += list(csv.DictReader(fh))
    return rows


def _finite(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    return arr[~np.isnan(arr)]


def _mean_std(values) -> Tuple[float, float, int]:
    arr = _finite(values)
    if len(arr) == 0:
        return math.nan, math.nan, 0
    std = float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0
    return float(np.mean(arr)), std, len(arr)


def label_order(rows: Sequence[dict]) -> List[str]:
    """Labels by scheme family, DP by decreasing budget, then by name: a fixed order for plots and tables."""
    family = {"baseline": 0, "dp": 1, "encryption": 2, "ibal": 3, "lbvq": 4}
    keys = {}
    for r in rows:
        eps = r["epsilon"] if r["scheme"] == "dp" else 0.0
        keys[r["label"]] = (family.get(r["scheme"], 9), -eps, r["label"])
    return sorted(keys, key=keys.get)


def summarize(rows: Sequence[dict], column: str) -> Dict[Tuple[str, float], Tuple[float, float, int]]:
    groups = defaultdict(list)
    for r in rows:
        groups[(r["label"], r["snr_db"])].append(r[column])
    return {k: _mean_std(v) for k, v in groups.items()}


def _csv_text(header, body) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in body:
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def _si(value: float, unit: str) -> str:
    if value >= 1e9:
        return f"{value / 1e9:.3f} G{unit}"
    if value >= 1e6:
        return f"{value / 1e6:.2f} M{unit}"
    if value >= 1e3:
        return f"{value / 1e3:.1f} K{unit}"
    return f"{value:g}{unit}"


def _seconds(value: float) -> str:
    if math.isnan(value):
        return "n/a"
    if value >= 1:
        return f"{value:.2f} s"
    return f"{value:.2g} s"


def _markdown(header, body) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in body]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# tables
# --------------------------------------------------------------------------

def complexity_table(rows: Sequence[dict], timing: Sequence[dict]):
    labels = label_order(rows)
    cost = {}
    for r in rows:
        cost.setdefault(r["label"], (r["flops"], r["params"]))
    times = defaultdict(lambda: ([], []))
    for t in timing:
        times[t["label"]][0].append(float(t["epoch_seconds"]) if t["epoch_seconds"] else math.nan)
        times[t["label"]][1].append(float(t["inference_seconds"]) if t["inference_seconds"] else math.nan)
    raw, pretty = [], []
    for label in labels:
        flops, params = cost[label]
        epoch = _mean_std(times[label][0])[0]
        infer = _mean_std(times[label][1])[0]
        raw.append((label, flops, params, epoch, infer))
        pretty.append((label, _si(flops, ""), _si(params, ""), _seconds(epoch), _seconds(infer)))
    return raw, pretty


def attribute_table(rows: Sequence[dict]):
    rows = [r for r in rows if r.get("attribute") and r["snr_db"] == r["snr_train_db"]]
    if not rows:
        return [], [], []
    attributes = sorted({r["attribute"] for r in rows})
    labels = label_order(rows)
    raw, pretty = [], []
    for label in labels:
        raw_row, pretty_row = [label], [label]
        for attr in attributes:
            mean, std, n = _mean_std([r["accuracy"] for r in rows if r["label"] == label and r["attribute"] == attr])
            raw_row += [mean, std, n]
            pretty_row.append("n/a" if n == 0 else f"{100 * mean:.2f}% ± {100 * std:.2f}% (n={n})")
        raw.append(raw_row)
        pretty.append(pretty_row)
    return attributes, raw, pretty


# --------------------------------------------------------------------------
# plots
# --------------------------------------------------------------------------

def _plot(path: Path, rows, column: str, ylabel: str, title: str, metadata: Dict[str, str]):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stats = summarize(rows, column)
    fig, ax = plt.subplots(figsize=(6.4, 4.2), dpi=100)
    drawn = 0
    finite_snrs = sorted({s for (_, s) in stats if s != NOISELESS})
    for label in label_order(rows):
        points = [(s, stats[(label, s)]) for s in finite_snrs if (label, s) in stats and stats[(label, s)][2]]
        if not points:
            continue
        xs = [p[0] for p in points]
        means = [p[1][0] for p in points]
        per_seed = defaultdict(list)
        for r in rows:
            if r["label"] == label and not math.isnan(r[column]):
                per_seed[r["snr_db"]].append(r[column])
        lo = [m - min(per_seed[x]) for x, m in zip(xs, means)]
        hi = [max(per_seed[x]) - m for x, m in zip(xs, means)]
        ax.errorbar(xs, means, yerr=[lo, hi], marker="o", capsize=3, label=label)
        drawn += 1
    ax.set_xlabel("test SNR (dB)")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if drawn:
        ax.legend(fontsize=8)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date keys, so identical data gives identical bytes
    fig.savefig(path, format="png", metadata={"Software": None, **metadata})
    plt.close(fig)
    return drawn


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def emit_report(results, out=None) -> Dict[str, Path]:
    """Write every figure and table for the runs under ``results``. Returns name -> path."""
    results = Path(results)
    rows = collect_rows(results) if results.is_dir() else []
    if not rows:
        raise ValidationError(f"no */*/metrics.csv under {results}; nothing to report")
    timing = collect_timing(results)
    out = Path(out) if out is not None else results / "report"
    out.mkdir(parents=True, exist_ok=True)
    hashes = sorted({r["config_hash"] for r in rows})
    seeds = sorted({int(r["seed"]) for r in rows})
    metadata = {"config_hash": ",".join(hashes), "seeds": ",".join(map(str, seeds))}
    footer = f"\nconfig_hash: {metadata['config_hash']}; seeds: {metadata['seeds']}\n"
    written = {}

    acc = summarize(rows, "accuracy")
    body = [(label, snr, *acc[(label, snr)]) for label in label_order(rows)
            for snr in sorted({s for (l, s) in acc if l == label})]
    written["accuracy.csv"] = out / "accuracy.csv"
    written["accuracy.csv"].write_text(_csv_text(("label", "snr_db", "accuracy_mean", "accuracy_std", "n"), body),
                                       encoding="utf-8")

    columns = ("mi_leakage", "attacker_mse", "attacker_psnr_db")
    stats = {c: summarize(rows, c) for c in columns}
    body = []
    for label in label_order(rows):
        for snr in sorted({s for (l, s) in stats["mi_leakage"] if l == label}):
            cells = [stats[c][(label, snr)] for c in columns]
            if all(cell[2] == 0 for cell in cells):
                continue
            body.append((label, snr) + tuple(v for cell in cells for v in cell[:2]) + (cells[0][2],))
    header = ("label", "snr_db", "mi_leakage_mean", "mi_leakage_std", "attacker_mse_mean", "attacker_mse_std",
              "attacker_psnr_db_mean", "attacker_psnr_db_std", "n")
    written["privacy.csv"] = out / "privacy.csv"
    written["privacy.csv"].write_text(_csv_text(header, body), encoding="utf-8")

    raw, pretty = complexity_table(rows, timing)
    written["complexity.csv"] = out / "complexity.csv"
    written["complexity.csv"].write_text(_csv_text(COMPLEXITY_COLUMNS, raw), encoding="utf-8")
    written["complexity.md"] = out / "complexity.md"
    written["complexity.md"].write_text(_markdown(COMPLEXITY_COLUMNS, pretty) + footer, encoding="utf-8")

    attributes, raw, pretty = attribute_table(rows)
    if attributes:
        header = ["Scheme"] + [f"{a} {k}" for a in attributes for k in ("mean", "std", "n")]
        written["attribute_accuracy.csv"] = out / "attribute_accuracy.csv"
        written["attribute_accuracy.csv"].write_text(_csv_text(header, raw), encoding="utf-8")
        written["attribute_accuracy.md"] = out / "attribute_accuracy.md"
        written["attribute_accuracy.md"].write_text(_markdown(["Scheme"] + attributes, pretty) + footer,
                                                    encoding="utf-8")

    written["accuracy_vs_snr.png"] = out / "accuracy_vs_snr.png"
    _plot(written["accuracy_vs_snr.png"], rows, "accuracy", "top-1 accuracy", "Task accuracy", metadata)
    written["mi_vs_snr.png"] = out / "mi_vs_snr.png"
    _plot(written["mi_vs_snr.png"], rows, "mi_leakage", "MI leakage (nats)", "Privacy leakage", metadata)
    return written
