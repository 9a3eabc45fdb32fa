import hashlib
import math
import textwrap

import numpy as np
import pytest

from tosc_privacy.codec import ModelBundle
from tosc_privacy.errors import ConfigError, TrainingDivergenceError, ValidationError
from tosc_privacy.harness import cli
from tosc_privacy.harness.config import PRESETS, deviations, load_config, parse_config
from tosc_privacy.harness.report import COMPLEXITY_COLUMNS, _plot, collect_rows, emit_report
from tosc_privacy.harness.runner import run_attack, run_eval, run_suite, run_train
from tosc_privacy.metrics import read_rows
from tosc_privacy.synthetic import build_synthetic_corpus

KEY = "0123456789abcdef0123456789abcdef"


def config_text(**overrides):
    base = {
        "schemes": "[baseline, lbvq]",
        "snr_test_db": "[4, 12]",
        "epochs": "1",
        "extra": "",
    }
    base.update(overrides)
    return textwrap.dedent(f"""\
        name: tiny
        dataset:
          name: synthetic-objects
        schemes: {base['schemes']}
        snr_test_db: {base['snr_test_db']}
        d: 16
        batch_size: 32
        epochs: {base['epochs']}
        seeds: [0]
        include_noiseless: true
        architecture:
          widths: [4, 8]
          head_hidden: [16]
          refiner_hidden: 16
        encryption:
          key_hex: {KEY}
        lbvq:
          kmeans_samples: 100
        attack:
          snr_db: [12]
          epochs: 1
          perceptual_epochs: 1
        mi:
          min_pairs: 100
          epochs: 2
        """) + base["extra"]


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    build_synthetic_corpus(root, "synthetic-objects", 240, 120, seed=0)
    return root


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

class TestConfig:
    def test_defaults_match_reference_settings(self):
        cfg = parse_config("dataset: {name: cifar10}\nschemes: [baseline]\n")
        assert cfg.snr_train_db == 12.0
        assert cfg.snr_test_db == (4.0, 8.0, 12.0, 16.0, 20.0)
        assert cfg.d == 128
        assert cfg.lbvq.K == 16
        assert cfg.batch_size == 512
        assert deviations(cfg) == []

    def test_dp_labels(self):
        cfg = parse_config(config_text(schemes="[{scheme: dp, epsilon: 0.05}, {scheme: dp, epsilon: 0.9}]"))
        assert cfg.labels == ("dp-eps0.05", "dp-eps0.9")
        assert [e.epsilon for e in cfg.schemes] == [0.05, 0.9]

    @pytest.mark.parametrize("text, line, col, fragment", [
        ("dataset: {name: cifar10}\nschemes: [baseline]\nsnr_tarin_db: 12\n", 3, 1, "did you mean 'snr_train_db'"),
        ("dataset: {name: cifar10}\nschemes: [baseline]\nd: big\n", 3, 4, "must be an integer"),
        ("dataset: {name: cifar10}\nschemes:\n  - baseline\n  - dp\n", 4, 5, "privacy budget"),
        ("dataset: {name: cifar10}\nschemes:\n  - {scheme: baseline, epsilon: 0.1}\n", 3, 24, "only applies to dp"),
        ("dataset: {name: cifar10}\nschemes: [baseline, rot13]\n", 2, 21, "must be one of"),
        ("dataset: {name: cifar10}\nschemes: [baseline, baseline]\n", 2, 21, "already used"),
        ("dataset: {name: imagenet}\nschemes: [baseline]\n", 1, 17, "must be one of"),
        ("dataset: {name: celeba, attribute: Moustache}\nschemes: [baseline]\n", 1, 36, "did you mean 'Mustache'"),
        ("dataset: {name: cifar10}\nschemes: [lbvq]\nd: 126\n", 3, 4, "not divisible"),
        ("dataset: {name: cifar10}\nschemes: [baseline]\nattack: {snr_db: [5]}\n", 3, 18, "must be among"),
        ("dataset: {name: cifar10}\nschemes: [baseline]\nseeds: [0, 0]\n", 3, 8, "must not repeat"),
        ("dataset: {name: cifar10}\nschemes: [baseline\n", 3, 1, "YAML syntax"),
    ])
    def test_errors_carry_positions(self, text, line, col, fragment):
        with pytest.raises(ConfigError) as exc:
            parse_config(text, "exp.yaml")
        assert (exc.value.source, exc.value.line, exc.value.column) == ("exp.yaml", line, col), str(exc.value)
        assert fragment in str(exc.value)
        assert str(exc.value).startswith(f"exp.yaml:{line}:{col}:")

    def test_missing_required(self):
        with pytest.raises(ConfigError, match="'schemes'"):
            parse_config("dataset: {name: cifar10}\n")

    def test_encryption_key_from_environment(self, monkeypatch):
        text = "dataset: {name: cifar10}\nschemes: [encryption]\n"
        monkeypatch.delenv("TOSC_SHUFFLE_KEY", raising=False)
        with pytest.raises(ConfigError, match="TOSC_SHUFFLE_KEY"):
            parse_config(text)
        monkeypatch.setenv("TOSC_SHUFFLE_KEY", KEY.upper())
        assert parse_config(text).shuffle_key_hex() == KEY

    def test_bad_key_position(self):
        with pytest.raises(ConfigError) as exc:
            parse_config("dataset: {name: cifar10}\nschemes: [encryption]\nencryption:\n  key_hex: abcd\n")
        assert exc.value.line == 4 and "128 bits" in str(exc.value)

    def test_hash_ignores_location_and_hides_key(self):
        a = parse_config(config_text(schemes="[encryption]"))
        b = parse_config(config_text(schemes="[encryption]", extra="out: elsewhere\n"))
        assert a.config_hash == b.config_hash
        c = parse_config(config_text(schemes="[encryption]", epochs="2"))
        assert c.config_hash != a.config_hash
        payload = str(a.hash_payload())
        assert KEY not in payload
        assert hashlib.sha256(bytes.fromhex(KEY)).hexdigest() in payload

    @pytest.mark.parametrize("name", PRESETS)
    def test_presets_load(self, name):
        cfg = load_config(name)
        assert cfg.name == name
        assert len(cfg.seeds) >= 1

    def test_desk_presets(self):
        cifar = load_config("cifar10-small")
        assert cifar.epochs == 10 and cifar.dataset.train_limit == 10_000 and len(cifar.seeds) == 3
        assert {e.epsilon for e in cifar.schemes if e.scheme == "dp"} == {0.05, 0.1, 0.9}
        celeba = load_config("celeba-attr-small")
        assert celeba.dataset.attribute == "Mustache"

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="no config file"):
            load_config("nonexistent-preset")

    def test_deviations_listed(self):
        cfg = parse_config(config_text())
        lines = deviations(cfg)
        assert any(l.startswith("d: 128 -> 16") for l in lines)
        assert any(l.startswith("batch_size: 512 -> 32") for l in lines)


# --------------------------------------------------------------------------
# runner
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, data_root):
    out = tmp_path_factory.mktemp("run")
    cfg = parse_config(config_text())
    report = run_train(cfg, out=out, data_root=data_root)
    assert report.success, report.failed
    return cfg, out


class TestTrain:
    def test_bundle_and_log(self, trained_run):
        cfg, out = trained_run
        assert (out / "baseline" / "0" / "bundle.zip").is_file()
        log = (out / "baseline" / "0" / "train.log").read_text().splitlines()
        assert sum(l.startswith("epoch=") for l in log) == 1
        assert any(cfg.config_hash in l for l in log if l.startswith("#"))
        assert any("d: 128 -> 16" in l for l in log)

    def test_lbvq_metadata(self, trained_run):
        cfg, out = trained_run
        meta = ModelBundle.read_metadata(out / "lbvq" / "0" / "bundle.zip")
        assert meta["K"] == 16 and meta["seg_dim"] == 4
        assert meta["config_hash"] == cfg.config_hash and meta["seed"] == 0

    def test_rerun_same_final_loss(self, trained_run, data_root, tmp_path):
        cfg, out = trained_run
        run_train(cfg, out=tmp_path, labels=["baseline"], data_root=data_root)
        a = ModelBundle.read_metadata(out / "baseline" / "0" / "bundle.zip")["final_losses"]
        b = ModelBundle.read_metadata(tmp_path / "baseline" / "0" / "bundle.zip")["final_losses"]
        assert a == pytest.approx(b, rel=1e-6)

    def test_missing_dataset(self, tmp_path):
        from tosc_privacy.errors import NotFoundError
        with pytest.raises(NotFoundError):
            run_train(parse_config(config_text()), out=tmp_path, data_root=tmp_path / "nowhere")

    def test_divergence_isolated(self, data_root, tmp_path, monkeypatch):
        import tosc_privacy.harness.runner as runner
        real_fit = runner.fit

        def flaky_fit(system, *a, **kw):
            if system.scheme == "lbvq":
                raise TrainingDivergenceError("non-finite training loss", {"step": 3})
            return real_fit(system, *a, **kw)

        monkeypatch.setattr(runner, "fit", flaky_fit)
        report = run_train(parse_config(config_text()), out=tmp_path, data_root=data_root)
        assert report.ok == ["baseline/0"] and list(report.failed) == ["lbvq/0"]
        assert "diverged" in report.failed["lbvq/0"] and "step=3" in report.failed["lbvq/0"]
        assert (tmp_path / "baseline" / "0" / "bundle.zip").is_file()
        assert not (tmp_path / "baseline" / "0" / "FAILED").exists()
        assert (tmp_path / "lbvq" / "0" / "FAILED").is_file()
        assert not (tmp_path / "lbvq" / "0" / "bundle.zip").exists()


@pytest.fixture(scope="module")
def evaluated_run(trained_run, data_root):
    cfg, out = trained_run
    report = run_eval(cfg, out=out, data_root=data_root)
    assert report.success, report.failed
    return cfg, out


class TestEval:
    def test_row_per_snr(self, evaluated_run):
        cfg, out = evaluated_run
        rows = read_rows(out / "baseline" / "0" / "metrics.csv")
        assert [r["snr_db"] for r in rows] == [4.0, 12.0, math.inf]
        assert all(math.isnan(r["mi_leakage"]) for r in rows)
        assert all(r["config_hash"] == cfg.config_hash for r in rows)

    def test_row_count_matches_log(self, evaluated_run):
        _, out = evaluated_run
        log = (out / "lbvq" / "0" / "eval.log").read_text()
        n = int(log.split("# evaluations=")[1].split()[0])
        assert n == len(read_rows(out / "lbvq" / "0" / "metrics.csv")) == log.count("\neval ")

    def test_timing_kept_apart(self, evaluated_run):
        _, out = evaluated_run
        header = (out / "baseline" / "0" / "metrics.csv").read_text().splitlines()[0]
        assert "seconds" not in header
        timing = read_rows(out / "baseline" / "0" / "timing.csv")[0]
        assert float(timing["inference_seconds"]) > 0

    def test_missing_bundle(self, evaluated_run, data_root, tmp_path):
        cfg, _ = evaluated_run
        report = run_eval(cfg, out=tmp_path, data_root=data_root)
        assert set(report.failed) == {"baseline/0", "lbvq/0"}
        assert all("NotFoundError" in v for v in report.failed.values())

    def test_bundle_from_other_config_rejected(self, evaluated_run, data_root):
        _, out = evaluated_run
        other = parse_config(config_text(epochs="2"))
        report = run_eval(other, out=out, labels=["baseline"], data_root=data_root, seeds=[0])
        assert "ConfigError" in report.failed["baseline/0"]
        (out / "baseline" / "0" / "FAILED").unlink()


@pytest.mark.slow
def test_noiseless_not_worse_than_low_snr(data_root, tmp_path):
    cfg = parse_config(config_text(schemes="[baseline]", epochs="12", snr_test_db="[4, 12]"))
    assert run_train(cfg, out=tmp_path, data_root=data_root).success
    assert run_eval(cfg, out=tmp_path, data_root=data_root).success
    rows = {r["snr_db"]: r["accuracy"] for r in read_rows(tmp_path / "baseline" / "0" / "metrics.csv")}
    assert rows[math.inf] >= rows[4.0]


class TestAttack:
    def test_needs_eval(self, trained_run, data_root, tmp_path):
        cfg, _ = trained_run
        report = run_attack(cfg, out=tmp_path, data_root=data_root)
        assert not report.success

    def test_fills_attack_columns_and_grids(self, evaluated_run, data_root):
        cfg, out = evaluated_run
        report = run_attack(cfg, out=out, data_root=data_root)
        assert report.success, report.failed
        for label in ("baseline", "lbvq"):
            rows = {r["snr_db"]: r for r in read_rows(out / label / "0" / "metrics.csv")}
            assert np.isfinite(rows[12.0]["attacker_mse"]) and np.isfinite(rows[12.0]["mi_leakage"])
            assert rows[12.0]["intercept"] == "post_noise"
            assert math.isnan(rows[4.0]["attacker_mse"])
            assert sorted(p.name for p in (out / label / "0" / "grids").iterdir()) == ["snr12.png"]
            from PIL import Image
            assert Image.open(out / label / "0" / "grids" / "snr12.png").text["config_hash"] == cfg.config_hash


def test_suite_reruns_are_byte_identical(data_root, tmp_path):
    cfg = parse_config(config_text(schemes="[baseline, {scheme: dp, epsilon: 0.5}, encryption]"))
    outputs = []
    for name in ("a", "b"):
        report = run_suite(cfg, out=tmp_path / name, data_root=data_root)
        assert report.success, report.failed
        outputs.append({label: (tmp_path / name / label / "0" / "metrics.csv").read_bytes() for label in cfg.labels})
    assert outputs[0] == outputs[1]


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

class TestReport:
    def test_outputs_and_determinism(self, evaluated_run, tmp_path):
        _, out = evaluated_run
        first = {k: p.read_bytes() for k, p in emit_report(out, tmp_path / "r1").items()}
        second = {k: p.read_bytes() for k, p in emit_report(out, tmp_path / "r2").items()}
        assert first == second
        assert {"accuracy_vs_snr.png", "mi_vs_snr.png", "complexity.md", "complexity.csv"} <= set(first)
        header = first["complexity.csv"].decode().splitlines()[0].split(",")
        assert tuple(header) == COMPLEXITY_COLUMNS
        assert tuple(header) == ("Scheme", "FLOPs", "Params", "Train Time for 1 Epoch", "Test Time for 1 Instance")

    def test_every_scheme_is_a_series(self, evaluated_run, tmp_path):
        _, out = evaluated_run
        rows = collect_rows(out)
        assert _plot(tmp_path / "acc.png", rows, "accuracy", "acc", "t", {}) == 2
        text = emit_report(out, tmp_path / "r")["accuracy.csv"].read_text()
        assert "baseline," in text and "lbvq," in text

    def test_empty_results(self, tmp_path):
        with pytest.raises(ValidationError):
            emit_report(tmp_path)

    def test_attribute_table(self, tmp_path):
        from tosc_privacy.metrics import MetricsRecord, write_records
        for seed, acc in ((0, 0.8), (1, 0.9)):
            rec = MetricsRecord(scheme="lbvq", label="lbvq", dataset="celeba", attribute="Mustache", seed=seed,
                                snr_db=12.0, accuracy=acc, flops=10, params=5, config_hash="h")
            write_records(tmp_path / "lbvq" / str(seed) / "metrics.csv", [rec])
        written = emit_report(tmp_path)
        md = written["attribute_accuracy.md"].read_text()
        assert "85.00% ± 7.07% (n=2)" in md


# --------------------------------------------------------------------------
# command line
# --------------------------------------------------------------------------

class TestCLI:
    def test_config_error_exit_code(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("dataset: {name: cifar10}\nschemes: [baseline]\nd: big\n")
        assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        assert f"{path}:3:4:" in capsys.readouterr().err

    def test_check(self, capsys):
        assert cli.main(["check", "--config", "cifar10-small"]) == 0
        assert "batch_size: 512 -> 128" in capsys.readouterr().out

    def test_train_eval_report(self, data_root, tmp_path, capsys):
        path = tmp_path / "tiny.yaml"
        path.write_text(config_text(schemes="[baseline]"))
        common = ["--config", str(path), "--out", str(tmp_path / "o"), "--seed", "0", "--data-root", str(data_root)]
        assert cli.main(["train"] + common) == 0
        assert cli.main(["eval"] + common) == 0
        assert cli.main(["report", "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "report" / "complexity.md").is_file()

    def test_failed_run_exit_code(self, data_root, tmp_path):
        path = tmp_path / "tiny.yaml"
        path.write_text(config_text(schemes="[baseline]"))
        assert cli.main(["eval", "--config", str(path), "--out", str(tmp_path / "empty"),
                         "--data-root", str(data_root)]) == 1

    def test_synth(self, tmp_path):
        assert cli.main(["synth", "--out", str(tmp_path), "--train", "20", "--test", "10"]) == 0
        assert (tmp_path / "synthetic-objects" / "train" / "manifest.jsonl").is_file()
