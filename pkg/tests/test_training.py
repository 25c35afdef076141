import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bcpvad import net, training
from bcpvad.training import FeatureSet, PlateauSchedule, TrainConfig


def toy_set(rng, n_clips=6, length=120):
    """Clips whose label is simply 'mean log-Mel above zero'."""
    fs = FeatureSet()
    for k in range(n_clips):
        on = (np.arange(length) // 20 + k) % 2
        x = rng.standard_normal((length, 32)) * 0.5 + (3.0 * on - 1.5)[:, None]
        fs.features.append(x)
        fs.targets.append(on.astype(float))
        fs.ids.append(f"c{k}")
    return fs


class TestAdam:
    def test_first_step_by_hand(self, small_params):
        cfg = TrainConfig(lr=0.01)
        g = {k: np.full(v.shape, 0.3) for k, v in small_params.tensors.items()}
        g["fc2.b"] = np.array([-2.0])
        new, mom = training.adam_step(small_params, g, training.AdamMoments.zeros(small_params), 1, cfg)
        # with bias correction the first step is lr * g / (|g| + eps)
        step = 0.01 * 0.3 / (0.3 + 1e-8)
        assert_allclose(new["fc1.w"], small_params["fc1.w"] - step, atol=1e-15)
        assert new["fc2.b"][0] == pytest.approx(0.01 * 2.0 / (2.0 + 1e-8))
        assert_allclose(mom.m["fc1.w"], 0.03)
        assert_allclose(mom.v["fc1.w"], 0.001 * 0.09)
        assert_array_equal(small_params["fc2.b"], 0.0)

    def test_second_step_by_hand(self, small_params):
        cfg = TrainConfig(lr=0.1)
        names = list(small_params.tensors)
        g1 = {k: np.full(small_params[k].shape, 1.0) for k in names}
        g2 = {k: np.full(small_params[k].shape, -0.5) for k in names}
        p, m = training.adam_step(small_params, g1, training.AdamMoments.zeros(small_params), 1, cfg)
        p, m = training.adam_step(p, g2, m, 2, cfg)
        m_ = 0.9 * 0.1 * 1.0 + 0.1 * -0.5
        v_ = 0.999 * 0.001 + 0.001 * 0.25
        step2 = 0.1 * (m_ / (1 - 0.9 ** 2)) / (np.sqrt(v_ / (1 - 0.999 ** 2)) + 1e-8)
        step1 = 0.1 / (1 + 1e-8)
        assert p["fc2.b"][0] == pytest.approx(-step1 - step2, rel=1e-12)

    def test_shape_mismatch(self, small_params):
        g = small_params.zeros_like()
        g["fc2.b"] = np.zeros(2)
        with pytest.raises(ValueError):
            training.adam_step(small_params, g, training.AdamMoments.zeros(small_params), 1, TrainConfig())


class TestPlateau:
    def test_example(self):
        s = PlateauSchedule(1e-3)
        stops = [s.update(x) for x in (1.0, 0.9, 0.91, 0.92, 0.93)]
        assert stops == [False] * 5
        assert s.lr == pytest.approx(5e-4)
        assert s.best == 0.9
        assert s.update(0.94) is False
        assert s.update(0.95) is True

    def test_improvement_resets(self):
        s = PlateauSchedule(1.0, halve_patience=2, stop_patience=3)
        for x in (1.0, 1.1, 1.2, 0.5, 0.6):
            s.update(x)
        assert s.lr == 0.5 and s.since_best == 1

    def test_config_validation(self):
        with pytest.raises(training.ConfigurationError):
            TrainConfig(lr=0.0)
        with pytest.raises(training.ConfigurationError):
            TrainConfig(batch_size=-1)


class TestData:
    def test_sample_batch(self, rng):
        fs = toy_set(rng, length=50)
        fs.features.append(rng.standard_normal((30, 32)))
        fs.targets.append(np.zeros(30))
        x, z = training.sample_batch(fs, np.random.default_rng(0), 16, 40)
        assert x.shape[0] == 16 and x.shape[2] == 32
        assert x.shape[1] == z.shape[1] <= 40
        a = training.sample_batch(fs, np.random.default_rng(5), 4, 10)
        b = training.sample_batch(fs, np.random.default_rng(5), 4, 10)
        assert_array_equal(a[0], b[0])

    def test_load_features(self, tiny_manifest):
        fs = training.load_features(tiny_manifest, "train", "bc")
        assert len(fs) == 3
        assert fs.features[0].shape[1] == 32
        assert len(fs.features[0]) == len(fs.targets[0])
        again = training.load_features(tiny_manifest, "train", "bc")
        assert_array_equal(again.features[2], fs.features[2])
        with pytest.raises(training.ConfigurationError):
            training.load_features(tiny_manifest, "train", "xx")


class TestTrain:
    def test_loss_decreases(self, rng):
        tr, te = toy_set(rng), toy_set(rng, n_clips=2)
        cfg = TrainConfig(lr=0.01, batch_size=4, steps_per_epoch=15, max_epochs=3, bptt_len=40)
        seen = []
        params, hist = training.train(tr, te, cfg, model_seed=1, progress=seen.append)
        assert [h.epoch for h in hist] == [0, 1, 2, 3]
        assert len(seen) == 3
        assert np.isnan(hist[0].train_loss)
        assert min(h.test_loss for h in hist[1:]) < hist[0].test_loss
        assert training.evaluate_loss(params, te) == pytest.approx(min(h.test_loss for h in hist))

    def test_deterministic(self, rng):
        tr, te = toy_set(rng, n_clips=3, length=60), toy_set(rng, n_clips=1, length=60)
        cfg = TrainConfig(batch_size=2, steps_per_epoch=3, max_epochs=1, bptt_len=20)
        a, _ = training.train(tr, te, cfg)
        b, _ = training.train(tr, te, cfg)
        assert_array_equal(a["gru1.W_z"], b["gru1.W_z"])

    def test_empty_split(self, rng):
        with pytest.raises(training.ConfigurationError):
            training.train(FeatureSet(), toy_set(rng))

    def test_divergence_detected(self, rng, monkeypatch):
        monkeypatch.setattr(training, "bce_loss", lambda p, z: float("nan"))
        cfg = TrainConfig(batch_size=2, steps_per_epoch=2, max_epochs=1, bptt_len=10)
        with pytest.raises(net.NumericError):
            training.train(toy_set(rng, 2, 30), toy_set(rng, 1, 30), cfg)

    def test_log_round_trip(self, tmp_path):
        hist = [training.EpochLog(0, float("nan"), 0.7, 1e-3, 0.0),
                training.EpochLog(1, 0.5, 0.4, 5e-4, 12.25)]
        training.write_log_csv(hist, tmp_path / "log.csv")
        back = training.read_log_csv(tmp_path / "log.csv")
        assert back[1] == hist[1]
        assert np.isnan(back[0].train_loss) and back[0].test_loss == 0.7
