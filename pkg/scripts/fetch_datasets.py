"""Put CIFAR-10 and CelebA into the on-disk layout read by ``tosc_privacy.data``.

Layout: ``<root>/<corpus>/<split>/manifest.jsonl`` plus the images it lists,
one JSON object per line with ``path`` (relative to the split directory),
``sha256`` and either ``label`` or ``attributes`` (40 bits).

CIFAR-10 is downloaded from its public mirror and checked against the
published MD5. CelebA is distributed behind a click-through page, so point
``--celeba-dir`` at an extracted copy holding ``img_align_celeba/``,
``list_attr_celeba.txt`` and ``list_eval_partition.txt``; its images are
linked, not copied.

    python scripts/fetch_datasets.py --root data cifar10
    python scripts/fetch_datasets.py --root data celeba --celeba-dir ~/Downloads/celeba
"""

import argparse
import hashlib
import json
import os
import pickle
import sys
import tarfile
import tempfile
import urllib.request
from pathlib import Path

import numpy as np

from tosc_privacy.data import CELEBA_ATTRIBUTES, write_split

CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz"
CIFAR10_MD5 = "c58f30108f718f92721af3b95e74349a"
# CelebA's official partition: 0 train, 1 validation, 2 test; validation is not used
CELEBA_PARTITIONS = {"train": "0", "test": "2"}


def _md5(path: Path) -> str:
    digest = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def fetch_cifar10(root: Path, archive: Path = None) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        if archive is None:
            archive = Path(tmp) / "cifar-10-python.tar.gz"
            print(f"downloading {CIFAR10_URL}")
            urllib.request.urlretrieve(CIFAR10_URL, archive)
        if _md5(archive) != CIFAR10_MD5:
            sys.exit(f"{archive}: MD5 mismatch, expected {CIFAR10_MD5}")
        with tarfile.open(archive) as tar:
            tar.extractall(tmp, filter="data")
        batches = Path(tmp) / "cifar-10-batches-py"
        for split, names in (("train", [f"data_batch_{i}" for i in range(1, 6)]), ("test", ["test_batch"])):
            images, labels = [], []
            for name in names:
                with open(batches / name, "rb") as fh:
                    batch = pickle.load(fh, encoding="bytes")
                images.append(batch[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
                labels += batch[b"labels"]
            out = write_split(root, "cifar10", split, np.concatenate(images), labels=labels)
            print(f"wrote {len(labels)} images to {out}")


def fetch_celeba(root: Path, source: Path) -> None:
    images_dir = (source / "img_align_celeba").resolve()
    attr_lines = (source / "list_attr_celeba.txt").read_text().splitlines()
    names = attr_lines[1].split()
    if tuple(names) != CELEBA_ATTRIBUTES:
        sys.exit("list_attr_celeba.txt: attribute header does not match the 40 CelebA attributes")
    attributes = {}
    for line in attr_lines[2:]:
        fields = line.split()
        if fields:
            attributes[fields[0]] = [1 if v == "1" else 0 for v in fields[1:]]
    partition = dict(line.split() for line in (source / "list_eval_partition.txt").read_text().splitlines()
                     if line.strip())
    for split, code in CELEBA_PARTITIONS.items():
        split_dir = root / "celeba" / split
        split_dir.mkdir(parents=True, exist_ok=True)
        link = split_dir / "images"
        if not link.exists():
            os.symlink(images_dir, link, target_is_directory=True)
        files = sorted(f for f, p in partition.items() if p == code)
        with open(split_dir / "manifest.jsonl", "w", encoding="utf-8") as fh:
            for f in files:
                digest = hashlib.sha256((images_dir / f).read_bytes()).hexdigest()
                fh.write(json.dumps({"path": f"images/{f}", "sha256": digest, "attributes": attributes[f]}) + "\n")
        print(f"wrote manifest of {len(files)} images to {split_dir}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("corpus", choices=("cifar10", "celeba"))
    parser.add_argument("--root", default=os.environ.get("TOSC_DATA_ROOT", "data"), help="dataset root")
    parser.add_argument("--archive", type=Path, help="already downloaded cifar-10-python.tar.gz")
    parser.add_argument("--celeba-dir", type=Path, help="extracted CelebA release (required for celeba)")
    args = parser.parse_args(argv)
    root = Path(args.root)
    if args.corpus == "cifar10":
        fetch_cifar10(root, args.archive)
    else:
        if args.celeba_dir is None:
            parser.error("celeba needs --celeba-dir")
        fetch_celeba(root, args.celeba_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
