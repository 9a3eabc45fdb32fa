"""Experiment configuration: a YAML file validated before any compute.

Every error carries the file name and the 1-based line and column of the
offending node. A config lists one or more scheme entries; each entry is
trained, evaluated and attacked under the shared settings. DP entries carry
their own privacy budget, so a budget sweep is one entry per value::

    schemes:
      - baseline
      - {scheme: dp, epsilon: 0.05}
      - {scheme: dp, epsilon: 0.9, label: dp-loose}

The shuffle key is never hashed or logged in clear: it comes from
``encryption.key_hex`` or from the environment variable named by
``encryption.key_env``, and only its SHA-256 fingerprint enters the config
hash.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from ..channel import NOISELESS
from ..data import CORPORA, corpus_info
from ..errors import ConfigError
from ..metrics import MIEstimatorConfig
from ..system import SCHEMES

PRESETS = ("cifar10-small", "celeba-attr-small", "synthetic-small")


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "cifar10"
    root: Optional[str] = None
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    attribute: Optional[str] = None
    balance: bool = False


@dataclass(frozen=True)
class SchemeEntry:
    scheme: str
    label: str
    epsilon: Optional[float] = None


@dataclass(frozen=True)
class ArchitectureConfig:
    widths: Tuple[int, ...] = (32, 64, 128, 128)
    head_hidden: Tuple[int, ...] = (1024, 1024)
    refiner_hidden: int = 512
    lbvq_residual_blocks: int = 2


@dataclass(frozen=True)
class DPSettings:
    clip_bound: float = 1.0


@dataclass(frozen=True)
class EncryptionSettings:
    key_hex: Optional[str] = None
    key_env: str = "TOSC_SHUFFLE_KEY"


@dataclass(frozen=True)
class IBALSettings:
    lambda_adv: float = 0.1
    lambda_ib: float = 0.01
    adversary_steps: int = 1


@dataclass(frozen=True)
class LBVQSettings:
    K: int = 16
    seg_dim: int = 4
    beta: float = 0.25
    warmup_epochs: int = 1
    kmeans_samples: int = 5000


@dataclass(frozen=True)
class AttackSettings:
    snr_db: Optional[Tuple[float, ...]] = None  # None: every test SNR
    pairs: Optional[int] = None                 # None: the whole training split
    test_pairs: Optional[int] = None            # None: the whole test split
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    mse_weight: float = 1.0
    perceptual_weight: float = 1.0
    perceptual_epochs: int = 3
    intercept: str = "post_noise"
    grid_images: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: DatasetConfig
    schemes: Tuple[SchemeEntry, ...]
    snr_train_db: float = 12.0
    snr_test_db: Tuple[float, ...] = (4.0, 8.0, 12.0, 16.0, 20.0)
    d: int = 128
    batch_size: int = 512
    epochs: int = 10
    learning_rate: float = 1e-3
    seeds: Tuple[int, ...] = (0,)
    include_noiseless: bool = False
    architecture: ArchitectureConfig = ArchitectureConfig()
    dp: DPSettings = DPSettings()
    encryption: EncryptionSettings = EncryptionSettings()
    ibal: IBALSettings = IBALSettings()
    lbvq: LBVQSettings = LBVQSettings()
    attack: AttackSettings = AttackSettings()
    mi: MIEstimatorConfig = MIEstimatorConfig()
    out: Optional[str] = None
    source: Optional[str] = field(default=None, compare=False)

    # ------------------------------------------------------------------
    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(e.label for e in self.schemes)

    def entry(self, label: str) -> SchemeEntry:
        for e in self.schemes:
            if e.label == label:
                return e
        raise ConfigError(f"no scheme labelled {label!r}; labels: {list(self.labels)}", self.source)

    @property
    def eval_snrs(self) -> Tuple[float, ...]:
        return self.snr_test_db + ((NOISELESS,) if self.include_noiseless else ())

    @property
    def attack_snrs(self) -> Tuple[float, ...]:
        return self.attack.snr_db if self.attack.snr_db is not None else self.snr_test_db

    def shuffle_key_hex(self) -> Optional[str]:
        """The 128-bit shuffle key, or ``None`` when no encryption entry needs one."""
        if not any(e.scheme == "encryption" for e in self.schemes):
            return None
        key = self.encryption.key_hex or os.environ.get(self.encryption.key_env)
        if not key:
            raise ConfigError(f"encryption needs encryption.key_hex or the {self.encryption.key_env} "
                              "environment variable", self.source)
        _check_key(key, self.source)
        return key.lower()

    def hash_payload(self) -> dict:
        payload = asdict(self)
        for k in ("out", "source"):
            payload.pop(k)
        payload["dataset"].pop("root")
        payload.pop("encryption")
        key = self.shuffle_key_hex()
        payload["encryption_key_sha256"] = hashlib.sha256(bytes.fromhex(key)).hexdigest() if key else None
        return payload

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.hash_payload(), sort_keys=True, default=list)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def data_root(self, override: Optional[str] = None) -> Path:
        """Dataset root: explicit override, then the config, then ``$TOSC_DATA_ROOT``, then ``./data``."""
        return Path(override or self.dataset.root or os.environ.get("TOSC_DATA_ROOT", "data"))


# --------------------------------------------------------------------------
# reference settings and deviations
# --------------------------------------------------------------------------

REFERENCE = {
    "snr_train_db": 12.0,
    "snr_test_db": (4.0, 8.0, 12.0, 16.0, 20.0),
    "d": 128,
    "batch_size": 512,
    "lbvq.K": 16,
    "dp epsilons": (0.05, 0.1, 0.9),
    "dataset.train_limit": None,
    "attack.snr_db": None,
    "attack.mse_weight": 1.0,
    "attack.perceptual_weight": 1.0,
}


def deviations(cfg: ExperimentConfig) -> List[str]:
    """Human-readable ``key: reference -> actual`` lines for every setting that differs from the reference run."""
    actual = {
        "snr_train_db": cfg.snr_train_db,
        "snr_test_db": cfg.snr_test_db,
        "d": cfg.d,
        "batch_size": cfg.batch_size,
        "lbvq.K": cfg.lbvq.K,
        "dp epsilons": tuple(sorted(e.epsilon for e in cfg.schemes if e.scheme == "dp")) or None,
        "dataset.train_limit": cfg.dataset.train_limit,
        "attack.snr_db": cfg.attack.snr_db,
        "attack.mse_weight": cfg.attack.mse_weight,
        "attack.perceptual_weight": cfg.attack.perceptual_weight,
    }
    out = []
    for key, ref in REFERENCE.items():
        value = actual[key]
        if key == "dp epsilons" and value is None:
            continue
        if value != ref:
            out.append(f"{key}: {_show(ref)} -> {_show(value)}")
    return out


def _show(v):
    if v is None:
        return "all"
    if isinstance(v, tuple):
        return "[" + ", ".join(_show(x) for x in v) + "]"
    return repr(v)


# --------------------------------------------------------------------------
# YAML node validation
# --------------------------------------------------------------------------

_MISSING = object()


class _Reader:
    def __init__(self, source: str):
        self.source = source
        self._constructor = yaml.constructor.SafeConstructor()

    def error(self, node, message):
        mark = node.start_mark if node is not None else None
        if mark is None:
            return ConfigError(message, self.source)
        return ConfigError(message, self.source, mark.line + 1, mark.column + 1)

    def value(self, node):
        return self._constructor.construct_object(node, deep=True)

    def mapping(self, node, where: str) -> Dict[str, Tuple[Any, Any]]:
        if not isinstance(node, yaml.MappingNode):
            raise self.error(node, f"{where} must be a mapping")
        out = {}
        for key_node, value_node in node.value:
            key = self.value(key_node)
            if not isinstance(key, str):
                raise self.error(key_node, f"{where}: keys must be strings, got {key!r}")
            if key in out:
                raise self.error(key_node, f"{where}: duplicate key {key!r}")
            out[key] = (key_node, value_node)
        return out

    def reject_unknown(self, entries, allowed, where):
        for key, (key_node, _) in entries.items():
            if key not in allowed:
                hint = difflib.get_close_matches(key, allowed, n=1)
                extra = f"; did you mean {hint[0]!r}?" if hint else ""
                raise self.error(key_node, f"{where}: unknown key {key!r}{extra}")

    # typed scalars ------------------------------------------------------
    def number(self, node, where, kind=float, minimum=None, exclusive=False, optional=False):
        v = self.value(node)
        if v is None and optional:
            return None
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and not isinstance(v, int)):
            raise self.error(node, f"{where} must be {'an integer' if kind is int else 'a number'}, got {v!r}")
        if minimum is not None and (v <= minimum if exclusive else v < minimum):
            raise self.error(node, f"{where} must be {'>' if exclusive else '>='} {minimum}, got {v!r}")
        return kind(v)

    def string(self, node, where, choices=None, optional=False):
        v = self.value(node)
        if v is None and optional:
            return None
        if not isinstance(v, str):
            raise self.error(node, f"{where} must be a string, got {v!r}")
        if choices is not None and v not in choices:
            raise self.error(node, f"{where} must be one of {list(choices)}, got {v!r}")
        return v

    def boolean(self, node, where):
        v = self.value(node)
        if not isinstance(v, bool):
            raise self.error(node, f"{where} must be true or false, got {v!r}")
        return v

    def number_list(self, node, where, kind=float, minimum=None, optional=False, unique=False):
        if optional and isinstance(node, yaml.ScalarNode) and self.value(node) is None:
            return None
        if not isinstance(node, yaml.SequenceNode) or not node.value:
            raise self.error(node, f"{where} must be a non-empty list")
        items = tuple(self.number(n, f"{where}[{i}]", kind, minimum) for i, n in enumerate(node.value))
        if unique and len(set(items)) != len(items):
            raise self.error(node, f"{where} must not repeat values")
        return items

    def section(self, node, where, spec: Dict[str, Any], defaults):
        """Read a flat section whose keys map to ``(reader_method, kwargs)`` pairs."""
        entries = self.mapping(node, where)
        self.reject_unknown(entries, list(spec), where)
        values = {}
        for key, (method, kwargs) in spec.items():
            if key in entries:
                values[key] = getattr(self, method)(entries[key][1], f"{where}.{key}", **kwargs)
        return replace(defaults, **values)


def _check_key(key: str, source):
    try:
        raw = bytes.fromhex(key)
    except ValueError:
        raise ConfigError("shuffle key must be hexadecimal", source) from None
    if len(raw) != 16:
        raise ConfigError(f"shuffle key must be 128 bits (32 hex digits), got {len(raw) * 8} bits", source)


def _scheme_label(scheme: str, epsilon: Optional[float]) -> str:
    return f"dp-eps{epsilon:g}" if scheme == "dp" else scheme


def _read_schemes(r: _Reader, node) -> Tuple[SchemeEntry, ...]:
    if not isinstance(node, yaml.SequenceNode) or not node.value:
        raise r.error(node, "schemes must be a non-empty list")
    entries, seen = [], {}
    for i, item in enumerate(node.value):
        where = f"schemes[{i}]"
        if isinstance(item, yaml.ScalarNode):
            scheme = r.string(item, where, SCHEMES)
            if scheme == "dp":
                raise r.error(item, f"{where}: dp needs a privacy budget, write {{scheme: dp, epsilon: ...}}")
            entry, label_node = SchemeEntry(scheme, scheme), item
        else:
            fields_ = r.mapping(item, where)
            r.reject_unknown(fields_, ["scheme", "epsilon", "label"], where)
            if "scheme" not in fields_:
                raise r.error(item, f"{where}: missing key 'scheme'")
            scheme = r.string(fields_["scheme"][1], f"{where}.scheme", SCHEMES)
            epsilon = None
            if "epsilon" in fields_:
                if scheme != "dp":
                    raise r.error(fields_["epsilon"][0], f"{where}: epsilon only applies to dp, not {scheme}")
                epsilon = r.number(fields_["epsilon"][1], f"{where}.epsilon", minimum=0, exclusive=True)
            elif scheme == "dp":
                raise r.error(item, f"{where}: dp needs a privacy budget 'epsilon'")
            label = _scheme_label(scheme, epsilon)
            label_node = item
            if "label" in fields_:
                label_node = fields_["label"][1]
                label = r.string(label_node, f"{where}.label")
                if not label or "/" in label or label.startswith("."):
                    raise r.error(label_node, f"{where}.label must be a plain directory name")
            entry = SchemeEntry(scheme, label, epsilon)
        if entry.label in seen:
            raise r.error(label_node, f"{where}: label {entry.label!r} already used by schemes[{seen[entry.label]}]")
        seen[entry.label] = i
        entries.append(entry)
    return tuple(entries)


_TOP_KEYS = ("name", "dataset", "schemes", "snr_train_db", "snr_test_db", "d", "batch_size", "epochs",
             "learning_rate", "seeds", "include_noiseless", "architecture", "dp", "encryption", "ibal",
             "lbvq", "attack", "mi", "out")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Validate YAML text and build an :class:`ExperimentConfig`. Raises :class:`ConfigError`."""
    r = _Reader(source)
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ConfigError(f"YAML syntax: {exc.problem}", source,
                          mark.line + 1 if mark else None, mark.column + 1 if mark else None) from None
    if root is None:
        raise ConfigError("config is empty", source)
    top = r.mapping(root, "config")
    r.reject_unknown(top, _TOP_KEYS, "config")
    for required in ("dataset", "schemes"):
        if required not in top:
            raise r.error(root, f"missing required key {required!r}")

    get = lambda k: top[k][1] if k in top else None  # noqa: E731
    kw: Dict[str, Any] = {}
    kw["name"] = r.string(get("name"), "name") if "name" in top else Path(source).stem

    ds = r.section(get("dataset"), "dataset", {
        "name": ("string", {"choices": sorted(CORPORA)}),
        "root": ("string", {"optional": True}),
        "train_limit": ("number", {"kind": int, "minimum": 1, "optional": True}),
        "test_limit": ("number", {"kind": int, "minimum": 1, "optional": True}),
        "attribute": ("string", {"optional": True}),
        "balance": ("boolean", {}),
    }, DatasetConfig())
    info = corpus_info(ds.name)
    ds_entries = r.mapping(get("dataset"), "dataset")
    if info.kind == "attributes":
        if ds.attribute is None:
            raise r.error(get("dataset"), f"dataset {ds.name} needs an 'attribute' to classify")
        if ds.attribute not in info.attribute_names:
            hint = difflib.get_close_matches(ds.attribute, info.attribute_names, n=1)
            raise r.error(ds_entries["attribute"][1], f"unknown attribute {ds.attribute!r}"
                          + (f"; did you mean {hint[0]!r}?" if hint else ""))
    else:
        for key in ("attribute", "balance"):
            if key in ds_entries and r.value(ds_entries[key][1]) not in (None, False):
                raise r.error(ds_entries[key][0], f"dataset.{key} only applies to attribute corpora")
    kw["dataset"] = ds
    kw["schemes"] = _read_schemes(r, get("schemes"))

    if "snr_train_db" in top:
        kw["snr_train_db"] = r.number(get("snr_train_db"), "snr_train_db")
    if "snr_test_db" in top:
        kw["snr_test_db"] = r.number_list(get("snr_test_db"), "snr_test_db", unique=True)
    for key, minimum in (("d", 2), ("batch_size", 1), ("epochs", 1)):
        if key in top:
            kw[key] = r.number(get(key), key, int, minimum)
    if "learning_rate" in top:
        kw["learning_rate"] = r.number(get("learning_rate"), "learning_rate", minimum=0, exclusive=True)
    if "seeds" in top:
        kw["seeds"] = r.number_list(get("seeds"), "seeds", int, minimum=0, unique=True)
    if "include_noiseless" in top:
        kw["include_noiseless"] = r.boolean(get("include_noiseless"), "include_noiseless")
    if "out" in top:
        kw["out"] = r.string(get("out"), "out")

    if "architecture" in top:
        kw["architecture"] = r.section(get("architecture"), "architecture", {
            "widths": ("number_list", {"kind": int, "minimum": 1}),
            "head_hidden": ("number_list", {"kind": int, "minimum": 1}),
            "refiner_hidden": ("number", {"kind": int, "minimum": 1}),
            "lbvq_residual_blocks": ("number", {"kind": int, "minimum": 0}),
        }, ArchitectureConfig())
    if "dp" in top:
        kw["dp"] = r.section(get("dp"), "dp", {
            "clip_bound": ("number", {"minimum": 0, "exclusive": True}),
        }, DPSettings())
    if "encryption" in top:
        kw["encryption"] = r.section(get("encryption"), "encryption", {
            "key_hex": ("string", {"optional": True}),
            "key_env": ("string", {}),
        }, EncryptionSettings())
        if kw["encryption"].key_hex is not None:
            try:
                _check_key(kw["encryption"].key_hex, source)
            except ConfigError as exc:
                node = r.mapping(get("encryption"), "encryption")["key_hex"][1]
                raise r.error(node, str(exc).split(": ", 1)[-1]) from None
    if "ibal" in top:
        kw["ibal"] = r.section(get("ibal"), "ibal", {
            "lambda_adv": ("number", {"minimum": 0}),
            "lambda_ib": ("number", {"minimum": 0}),
            "adversary_steps": ("number", {"kind": int, "minimum": 1}),
        }, IBALSettings())
    if "lbvq" in top:
        kw["lbvq"] = r.section(get("lbvq"), "lbvq", {
            "K": ("number", {"kind": int, "minimum": 2}),
            "seg_dim": ("number", {"kind": int, "minimum": 1}),
            "beta": ("number", {"minimum": 0}),
            "warmup_epochs": ("number", {"kind": int, "minimum": 0}),
            "kmeans_samples": ("number", {"kind": int, "minimum": 1}),
        }, LBVQSettings())
        K = kw["lbvq"].K
        if K & (K - 1):
            raise r.error(r.mapping(get("lbvq"), "lbvq")["K"][1], f"lbvq.K must be a power of two, got {K}")
    if "attack" in top:
        kw["attack"] = r.section(get("attack"), "attack", {
            "snr_db": ("number_list", {"optional": True, "unique": True}),
            "pairs": ("number", {"kind": int, "minimum": 1, "optional": True}),
            "test_pairs": ("number", {"kind": int, "minimum": 1, "optional": True}),
            "epochs": ("number", {"kind": int, "minimum": 1}),
            "batch_size": ("number", {"kind": int, "minimum": 1}),
            "learning_rate": ("number", {"minimum": 0, "exclusive": True}),
            "mse_weight": ("number", {"minimum": 0}),
            "perceptual_weight": ("number", {"minimum": 0}),
            "perceptual_epochs": ("number", {"kind": int, "minimum": 1}),
            "intercept": ("string", {"choices": ("post_noise", "pre_noise")}),
            "grid_images": ("number", {"kind": int, "minimum": 1}),
        }, AttackSettings())
    if "mi" in top:
        kw["mi"] = r.section(get("mi"), "mi", {
            "min_pairs": ("number", {"kind": int, "minimum": 2}),
            "projection_size": ("number", {"kind": int, "minimum": 1}),
            "embed_dim": ("number", {"kind": int, "minimum": 1}),
            "hidden": ("number", {"kind": int, "minimum": 1}),
            "epochs": ("number", {"kind": int, "minimum": 1}),
            "batch_size": ("number", {"kind": int, "minimum": 2}),
            "learning_rate": ("number", {"minimum": 0, "exclusive": True}),
            "patience": ("number", {"kind": int, "minimum": 1}),
        }, MIEstimatorConfig())

    cfg = ExperimentConfig(**kw, source=source)
    _cross_checks(cfg, r, top, root)
    return cfg


def _cross_checks(cfg: ExperimentConfig, r: _Reader, top, root):
    info = corpus_info(cfg.dataset.name)
    stages = len(cfg.architecture.widths)
    if info.resolution % (2 ** stages):
        node = r.mapping(top["architecture"][1], "architecture")["widths"][1] if "architecture" in top else root
        raise r.error(node, f"{info.resolution}px images cannot be halved {stages} times")
    if cfg.d % 2:
        raise r.error(top["d"][1], f"d must be even (two real values per complex symbol), got {cfg.d}")
    uses = {e.scheme for e in cfg.schemes}
    if "lbvq" in uses and cfg.d % cfg.lbvq.seg_dim:
        node = top["lbvq"][1] if "lbvq" in top else top.get("d", (None, root))[1]
        raise r.error(node, f"d={cfg.d} is not divisible by lbvq.seg_dim={cfg.lbvq.seg_dim}")
    if "encryption" in uses:
        cfg_key = cfg.encryption.key_hex or os.environ.get(cfg.encryption.key_env)
        if not cfg_key:
            node = top["encryption"][1] if "encryption" in top else top["schemes"][1]
            raise r.error(node, f"encryption needs encryption.key_hex or the {cfg.encryption.key_env} "
                                "environment variable")
        _check_key(cfg_key, cfg.source)
    if cfg.attack.snr_db is not None:
        missing = [s for s in cfg.attack.snr_db if s not in cfg.snr_test_db]
        if missing:
            node = r.mapping(top["attack"][1], "attack")["snr_db"][1]
            raise r.error(node, f"attack.snr_db {missing} must be among snr_test_db {list(cfg.snr_test_db)}")
    if cfg.attack.test_pairs is not None and cfg.attack.test_pairs < cfg.mi.min_pairs:
        node = r.mapping(top["attack"][1], "attack")["test_pairs"][1]
        raise r.error(node, f"attack.test_pairs must be at least mi.min_pairs={cfg.mi.min_pairs}")
    if cfg.include_noiseless and NOISELESS in cfg.snr_test_db:
        raise r.error(top["snr_test_db"][1], "the noiseless sentinel is added by include_noiseless")


def load_config(path_or_preset) -> ExperimentConfig:
    """Load a config file, or a packaged preset by name (see :data:`PRESETS`)."""
    path = Path(path_or_preset)
    if path.is_file():
        return parse_config(path.read_text(encoding="utf-8"), str(path))
    name = str(path_or_preset)
    if name in PRESETS:
        text = resources.files("tosc_privacy.harness").joinpath("presets").joinpath(f"{name}.yaml").read_text("utf-8")
        return parse_config(text, f"preset:{name}")
    raise ConfigError(f"no config file {name!r} and no preset of that name; presets: {list(PRESETS)}")
