import numpy as np
import pytest
import torch

from tosc_privacy.adversary import (
    AttackerSpec,
    Interception,
    PerceptualNet,
    VictimOracle,
    attack,
    collect_attack_pairs,
    load_or_train_perceptual,
    save_reconstruction_grid,
    train_attacker,
    train_perceptual_network,
)
from tosc_privacy.channel import NOISELESS
from tosc_privacy.codec import EncoderSpec, HeadSpec
from tosc_privacy.data import LabeledImageSet
from tosc_privacy.errors import TrainingDivergenceError, ValidationError
from tosc_privacy.privacy import DPConfig, LBVQConfig
from tosc_privacy.synthetic import synthesize_objects
from tosc_privacy.system import SchemeSpec, Transceiver

KEY = "00112233445566778899aabbccddeeff"
SMALL = dict(widths=(8, 16), resolution=32)


def victim(scheme="baseline", seed=0, d=32, **mech):
    torch.manual_seed(seed)
    spec = SchemeSpec(scheme, EncoderSpec(d=d, widths=(8, 16)), HeadSpec(input_dim=d, hidden=(32,)),
                      refiner_hidden=32, **mech)
    return Transceiver(spec).eval()


def image_set(n, seed, split="train"):
    images, labels = synthesize_objects(n, seed=seed)
    ids = tuple(f"{split}/{seed}-{i}" for i in range(n))
    return LabeledImageSet("synthetic-objects", split, images.astype(np.float32) / 255, labels, ids, 10)


@pytest.fixture(scope="module")
def train_set():
    return image_set(1200, 0)


@pytest.fixture(scope="module")
def test_set():
    return image_set(300, 1, "test")


def constant_predictor_mse(train_images, test_images):
    """Best image-independent guess: the per-pixel mean of the attacker's training images."""
    mean = train_images.mean(0, keepdims=True)
    return float(((test_images - mean) ** 2).mean())


class TestOracle:
    def test_exposes_query_only(self):
        oracle = VictimOracle(victim(), 12.0)
        public = {n for n in dir(oracle) if not n.startswith("_")}
        assert public == {"query", "kind", "snr_db", "intercept"}
        with pytest.raises(AttributeError):
            oracle.system = None
        assert not hasattr(oracle, "__dict__")

    def test_bad_intercept_point(self):
        with pytest.raises(ValidationError):
            VictimOracle(victim(), 12.0, intercept="receiver")

    def test_pre_noise_is_noise_free(self):
        oracle = VictimOracle(victim(), 0.0, intercept="pre_noise")
        x = torch.rand(3, 3, 32, 32)
        assert torch.equal(oracle.query(x, 1).data, oracle.query(x, 2).data)
        post = VictimOracle(victim(), 0.0)
        assert not torch.equal(post.query(x, 1).data, post.query(x, 2).data)


class TestCollect:
    def test_analog_dimensions(self, train_set):
        pairs = collect_attack_pairs(VictimOracle(victim(d=128), 12.0), train_set, 100, seed=0)
        assert len(pairs) == 100
        assert pairs.intercepted.kind == "analog_features" and pairs.intercepted.data.shape == (100, 128)
        assert pairs.originals.shape == (100, 3, 32, 32)

    def test_codebook_dimensions(self, train_set):
        system = victim("lbvq", d=128, lbvq=LBVQConfig())
        pairs = collect_attack_pairs(VictimOracle(system, 12.0), train_set, 50, seed=0)
        assert pairs.intercepted.kind == "codebook_indices" and pairs.intercepted.data.shape == (50, 32)
        assert int(pairs.intercepted.data.max()) < 16

    def test_deterministic(self, train_set):
        oracle = VictimOracle(victim("dp", dp=DPConfig(0.1)), 8.0)
        a = collect_attack_pairs(oracle, train_set, 64, seed=3, batch_size=20)
        b = collect_attack_pairs(oracle, train_set, 64, seed=3, batch_size=20)
        assert torch.equal(a.intercepted.data, b.intercepted.data) and a.ids == b.ids

    def test_encrypted_features_are_permuted(self, train_set):
        plain = victim("baseline", seed=0)
        enc = victim("encryption", seed=0, key_hex=KEY)
        enc.load_state_dict(plain.state_dict(), strict=False)
        a = collect_attack_pairs(VictimOracle(plain, NOISELESS), train_set, 20, seed=0)
        b = collect_attack_pairs(VictimOracle(enc, NOISELESS), train_set, 20, seed=0)
        assert not torch.allclose(a.intercepted.data, b.intercepted.data)
        torch.testing.assert_close(a.intercepted.data.sort(-1).values, b.intercepted.data.sort(-1).values)

    @pytest.mark.parametrize("n", [0, -5, 10**6])
    def test_bad_count(self, train_set, n):
        with pytest.raises(ValidationError):
            collect_attack_pairs(VictimOracle(victim(), 12.0), train_set, n, seed=0)


class TestTraining:
    def test_beats_constant_predictor_on_plain_victim(self, train_set):
        pairs = collect_attack_pairs(VictimOracle(victim(), 20.0), train_set, 1200, seed=0)
        spec = AttackerSpec(input_dim=32, perceptual_weight=0.0, **SMALL)
        trained = train_attacker(pairs, spec, epochs=25, seed=0)
        x = pairs.intercepted.data
        with torch.no_grad():
            train_mse = float(((trained.network(x) - pairs.originals) ** 2).mean())
        baseline = constant_predictor_mse(pairs.originals.numpy(), pairs.originals.numpy())
        assert train_mse < baseline

    def test_information_free_inputs_reach_constant_predictor(self, train_set, test_set):
        pairs = collect_attack_pairs(VictimOracle(victim(), 12.0), train_set, 1200, seed=0)
        gen = torch.Generator().manual_seed(0)
        pairs.intercepted = Interception("analog_features", torch.randn(pairs.intercepted.data.shape, generator=gen))
        spec = AttackerSpec(input_dim=32, perceptual_weight=0.0, **SMALL)
        trained = train_attacker(pairs, spec, epochs=15, seed=0)
        noise = Interception("analog_features", torch.randn(len(test_set), 32, generator=gen))
        result = attack(trained, noise, test_set.images)
        oracle = constant_predictor_mse(pairs.originals.numpy(), test_set.images.transpose(0, 3, 1, 2))
        assert result.mean_mse == pytest.approx(oracle, rel=0.05)

    def test_zero_perceptual_weight_is_pure_mse(self, train_set):
        pairs = collect_attack_pairs(VictimOracle(victim(), 12.0), train_set, 64, seed=0)
        net = PerceptualNet()
        pure = train_attacker(pairs, AttackerSpec(input_dim=32, perceptual_weight=0.0, **SMALL), 1, seed=4)
        mixed = train_attacker(pairs, AttackerSpec(input_dim=32, perceptual_weight=0.0, **SMALL), 1, seed=4,
                               perceptual=net)
        weighted = train_attacker(pairs, AttackerSpec(input_dim=32, perceptual_weight=0.5, **SMALL), 1, seed=4,
                                  perceptual=net)
        assert mixed.initial_loss == pytest.approx(pure.initial_loss, abs=1e-6)
        assert weighted.initial_loss > pure.initial_loss

    def test_deterministic(self, train_set):
        pairs = collect_attack_pairs(VictimOracle(victim(), 12.0), train_set, 128, seed=0)
        spec = AttackerSpec(input_dim=32, perceptual_weight=0.0, **SMALL)
        a = train_attacker(pairs, spec, 2, seed=1).history
        b = train_attacker(pairs, spec, 2, seed=1).history
        assert a == b

    def test_divergence(self, train_set):
        pairs = collect_attack_pairs(VictimOracle(victim(), 12.0), train_set, 32, seed=0)
        pairs.intercepted.data[0, 0] = float("nan")
        with pytest.raises(TrainingDivergenceError):
            train_attacker(pairs, AttackerSpec(input_dim=32, perceptual_weight=0.0, **SMALL), 1, seed=0)

    def test_kind_mismatch(self, train_set):
        pairs = collect_attack_pairs(VictimOracle(victim(), 12.0), train_set, 32, seed=0)
        with pytest.raises(ValidationError):
            train_attacker(pairs, AttackerSpec("codebook_indices", input_dim=32, perceptual_weight=0.0, **SMALL),
                           1, seed=0)

    def test_codebook_attacker(self, train_set):
        system = victim("lbvq", d=32, lbvq=LBVQConfig())
        pairs = collect_attack_pairs(VictimOracle(system, 12.0), train_set, 64, seed=0)
        spec = AttackerSpec("codebook_indices", input_dim=8, perceptual_weight=0.0, **SMALL)
        trained = train_attacker(pairs, spec, 1, seed=0)
        result = attack(trained, pairs.intercepted)
        assert result.reconstructions.shape == (64, 32, 32, 3)


@pytest.fixture(scope="module")
def trained(train_set):
    pairs = collect_attack_pairs(VictimOracle(victim(), 12.0), train_set, 200, seed=0)
    return train_attacker(pairs, AttackerSpec(input_dim=32, perceptual_weight=0.0, **SMALL), 1, seed=0)


class TestAttack:
    def test_output_count(self, trained, test_set):
        captured = collect_attack_pairs(VictimOracle(victim(), 12.0), test_set, 37, seed=5)
        result = attack(trained, captured.intercepted, captured.originals)
        assert len(result.reconstructions) == 37 and len(result.mse) == 37
        assert np.all(result.mse >= 0)
        assert result.reconstructions.min() >= 0 and result.reconstructions.max() <= 1

    def test_mi_leakage_filled_under_no_grad_scoring(self, trained, train_set):
        from tosc_privacy.metrics import MIEstimatorConfig
        captured = collect_attack_pairs(VictimOracle(victim(), 12.0), train_set, 1000, seed=6)
        result = attack(trained, captured.intercepted, captured.originals,
                        mi_config=MIEstimatorConfig(epochs=2), seed=0)
        assert np.isfinite(result.mi_leakage)

    def test_kind_mismatch(self, trained):
        with pytest.raises(ValidationError):
            attack(trained, Interception("codebook_indices", torch.zeros(2, 32, dtype=torch.long)))

    def test_length_mismatch(self, trained):
        with pytest.raises(ValidationError):
            attack(trained, Interception("analog_features", torch.zeros(2, 16)))

    def test_grid(self, trained, test_set, tmp_path):
        from PIL import Image
        captured = collect_attack_pairs(VictimOracle(victim(), 12.0), test_set, 8, seed=5)
        result = attack(trained, captured.intercepted, captured.originals)
        originals = captured.originals.permute(0, 2, 3, 1).numpy()
        path = save_reconstruction_grid(tmp_path / "g.png", originals, result.reconstructions,
                                        text={"config_hash": "abc", "seed": 0})
        img = Image.open(path)
        assert img.size == (8 * 32, 64)
        assert img.text["config_hash"] == "abc"


class TestPerceptual:
    def test_distance_properties(self):
        torch.manual_seed(0)
        net = PerceptualNet()
        a, b = torch.rand(4, 3, 32, 32), torch.rand(4, 3, 32, 32)
        assert torch.all(net.distance(a, a) == 0)
        assert torch.all(net.distance(a, b) > 0)
        torch.testing.assert_close(net.distance(a, b), net.distance(b, a))

    def test_trained_network_is_frozen_and_cached(self, train_set, tmp_path):
        path = tmp_path / "perc.zip"
        net = load_or_train_perceptual(train_set, path, seed=0, epochs=1)
        assert path.is_file()
        assert all(not p.requires_grad for p in net.parameters())
        again = load_or_train_perceptual(train_set, path, seed=0, epochs=1)
        x = torch.rand(2, 3, 32, 32)
        torch.testing.assert_close(net(x), again(x))

    def test_binary_attribute_targets(self):
        images = np.random.default_rng(0).uniform(size=(40, 16, 16, 3)).astype(np.float32)
        ds = LabeledImageSet("synthetic-faces", "train", images, np.arange(40) % 2, tuple(map(str, range(40))), 2)
        net = train_perceptual_network(ds, epochs=1, batch_size=16)
        assert net(torch.rand(1, 3, 16, 16)).shape == (1, 1)


@pytest.mark.slow
class TestPairedDirections:
    """Paired desk-scale runs over 3 seeds on the synthetic object corpus."""

    def _mse(self, system, train_set, test_set, seed, snr=12.0):
        oracle = VictimOracle(system, snr)
        pairs = collect_attack_pairs(oracle, train_set, len(train_set), seed=seed)
        spec = AttackerSpec(input_dim=system.spec.encoder.d, perceptual_weight=0.0, **SMALL)
        trained = train_attacker(pairs, spec, epochs=25, seed=seed)
        captured = collect_attack_pairs(oracle, test_set, len(test_set), seed=seed + 100)
        return attack(trained, captured.intercepted, captured.originals).mean_mse

    def test_dp_noise_raises_attack_error(self, train_set, test_set):
        for seed in range(3):
            plain = victim("baseline", seed=seed)
            noisy = victim("dp", seed=seed, dp=DPConfig(0.05))
            noisy.load_state_dict(plain.state_dict(), strict=False)
            assert self._mse(plain, train_set, test_set, seed) < self._mse(noisy, train_set, test_set, seed)

    def test_keyless_attacker_does_no_better_on_encrypted_features(self, train_set, test_set):
        for seed in range(3):
            plain = victim("baseline", seed=seed)
            enc = victim("encryption", seed=seed, key_hex=KEY)
            enc.load_state_dict(plain.state_dict(), strict=False)
            assert self._mse(enc, train_set, test_set, seed) >= self._mse(plain, train_set, test_set, seed)
