import csv

import numpy as np
import pytest

from hybridgnet import autodiff as ad
from hybridgnet import data, model as M, training as T
from hybridgnet.model import ForwardOutputs


def perfect_outputs(target, coarse, mu=None, logvar=None):
    return ForwardOutputs(ad.Tensor(target), mu=mu, logvar=logvar, ds_coarse=ad.Tensor(coarse), ds_fine=ad.Tensor(target))


@pytest.fixture(scope="module")
def small_cfg():
    return M.HybridGNetConfig(image_size=64)


@pytest.fixture(scope="module")
def phantoms():
    rng = np.random.default_rng(0)
    samples = [data.synthesize_phantom(rng, 64) for _ in range(3)]
    for s, split in zip(samples, ["train", "train", "val"]):
        s.split = split
    return samples


class TestLoss:
    def test_perfect_is_zero(self):
        t = np.random.default_rng(0).uniform(size=(2, 120, 2))
        c = np.random.default_rng(1).uniform(size=(2, 60, 2))
        out = perfect_outputs(t, c, ad.Tensor(np.zeros((2, 480))), ad.Tensor(np.zeros((2, 480))))
        total, parts = T.loss_total(out, t, c, T.TrainConfig(), 128)
        assert total.data == 0.0 and parts["loss_kl"] == 0.0

    def test_one_hot_mu(self):
        t, c = np.full((120, 2), 0.5), np.full((60, 2), 0.5)
        mu = np.zeros(480)
        mu[7] = 1.0
        out = perfect_outputs(t, c, ad.Tensor(mu), ad.Tensor(np.zeros(480)))
        total, _ = T.loss_total(out, t, c, T.TrainConfig(kl_weight=1e-5), 128)
        assert abs(total.data - 0.5e-5) < 1e-12

    def test_pixel_scaling(self):
        t = np.full((120, 2), 0.5)
        out = ForwardOutputs(ad.Tensor(t + 0.01))
        l64 = T.loss_total(out, t, None, T.TrainConfig(), 64)[0].data
        l128 = T.loss_total(out, t, None, T.TrainConfig(), 128)[0].data
        assert l128 == pytest.approx(4 * l64, rel=1e-12)
        assert l64 == pytest.approx((0.01 * 64) ** 2, rel=1e-9)

    def test_ds_terms_weighted(self):
        t, c = np.zeros((120, 2)), np.zeros((60, 2))
        out = ForwardOutputs(ad.Tensor(t), ds_coarse=ad.Tensor(c + 0.1), ds_fine=ad.Tensor(t + 0.2))
        total, parts = T.loss_total(out, t, c, T.TrainConfig(ds_weight=0.5), 10)
        assert parts["loss_ds"] == pytest.approx(1.0 + 4.0)
        assert total.data == pytest.approx(2.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            T.loss_total(ForwardOutputs(ad.Tensor(np.zeros((119, 2)))), np.zeros((120, 2)), None, T.TrainConfig(), 64)


class TestAdam:
    def test_zero_gradient_no_decay(self):
        p = {"w": ad.parameter(np.array([1.0, -2.0]))}
        T.Adam().step(p, {"w": np.zeros(2)}, lr=0.1)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        p = {"w": ad.parameter(np.array(0.0))}
        T.Adam().step(p, {"w": np.array(1.0)}, lr=0.1)
        assert p["w"].data == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)

    def test_decoupled_decay(self):
        p = {"w": ad.parameter(np.array(2.0))}
        T.Adam().step(p, {"w": np.array(0.0)}, lr=0.1, weight_decay=0.5)
        assert p["w"].data == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_nan_names_parameter(self):
        p = {"enc.w": ad.parameter(np.zeros(2))}
        with pytest.raises(T.DivergenceError, match="enc.w"):
            T.Adam().step(p, {"enc.w": np.array([0.0, np.nan])}, lr=0.1)

    def test_deterministic_trajectories(self):
        grads = np.random.default_rng(0).standard_normal((5, 3))
        results = []
        for _ in range(2):
            p, opt = {"w": ad.parameter(np.ones(3))}, T.Adam()
            for g in grads:
                opt.step(p, {"w": g}, lr=0.01, weight_decay=1e-5)
            results.append(p["w"].data)
        np.testing.assert_array_equal(*results)


class TestSchedule:
    def test_values(self):
        cfg = T.TrainConfig(lr=1e-4, lr_decay_every=100)
        assert T.lr_at(0, cfg) == 1e-4
        assert T.lr_at(100, cfg) == pytest.approx(9e-5, rel=1e-12)
        assert T.lr_at(250, cfg) == pytest.approx(1e-4 * 0.81, rel=1e-12)

    def test_default_period_depends_on_igsc(self):
        cfg = T.TrainConfig()
        assert T.lr_at(50, cfg, igsc=True) == cfg.lr
        assert T.lr_at(50, cfg, igsc=False) == pytest.approx(cfg.lr * 0.9)

    @pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"epochs": 0}, {"lr_decay_factor": 1.5}, {"lr_decay_every": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            T.TrainConfig(**kwargs).validate()


class TestCheckpoint:
    def test_save_load_save_identical(self, tmp_path, small_cfg):
        model = M.build_model(small_cfg, seed=3)
        T.save_checkpoint(tmp_path / "a", T.Checkpoint(model.params, {"model": small_cfg.to_dict()}, 4, 1.5))
        ck = T.load_checkpoint(tmp_path / "a")
        T.save_checkpoint(tmp_path / "b", ck)
        for name in ("manifest.json", "params.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        size = sum(v.data.size for v in model.params.values())
        assert (tmp_path / "a" / "params.bin").stat().st_size == 4 * size

    def test_restored_model_predicts_like_f32_original(self, tmp_path, small_cfg):
        model = M.build_model(small_cfg, seed=3)
        T.save_checkpoint(tmp_path / "c", T.Checkpoint(model.params, {"model": small_cfg.to_dict()}))
        restored = T.model_from_checkpoint(T.load_checkpoint(tmp_path / "c"))
        img = np.random.default_rng(0).uniform(size=(64, 64))
        np.testing.assert_allclose(restored.predict(img), model.predict(img), atol=1e-2)

    def test_truncated_blob(self, tmp_path, small_cfg):
        model = M.build_model(small_cfg)
        T.save_checkpoint(tmp_path / "d", T.Checkpoint(model.params, {}))
        blob = tmp_path / "d" / "params.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(ValueError):
            T.load_checkpoint(tmp_path / "d")


class TestGradientFlow:
    def test_every_group_has_gradient(self, small_cfg, phantoms):
        model = M.build_model(small_cfg, seed=0)
        images, targets = T.prepare_batch(phantoms[:2], 64)
        with ad.ComputationRecord() as rec:
            loss, _ = T.batch_loss(model, images, targets, T.TrainConfig(), np.random.default_rng(0), "train")
        ad.backward(rec, loss)
        dead = [k for k, v in model.trainable().items() if not np.any(v.grad)]
        assert dead == []

    def test_small_step_decreases_loss(self, small_cfg, phantoms):
        images, targets = T.prepare_batch(phantoms[:1], 64)
        cfg = T.TrainConfig()
        for seed in range(20):
            model = M.build_model(small_cfg, seed=seed)
            with ad.ComputationRecord() as rec:
                loss, _ = T.batch_loss(model, images, targets, cfg, None, "infer")
            ad.backward(rec, loss)
            before = float(loss.data)
            tr = model.trainable()
            T.Adam().step(tr, {k: v.grad for k, v in tr.items()}, lr=1e-6, weight_decay=cfg.weight_decay)
            after = T.batch_loss(model, images, targets, cfg, None, "infer")[1]["loss_total"]
            assert after < before, f"seed {seed}: {after} >= {before}"


class TestTrainLoop:
    def test_log_and_checkpoints(self, tmp_path, small_cfg, phantoms):
        model = M.build_model(small_cfg, seed=0)
        cfg = T.TrainConfig(epochs=2, lr=1e-3, batch_size=2, seed=1)
        res = T.train(phantoms, model, cfg, log_path=tmp_path / "log.csv", checkpoint_dir=tmp_path / "ck")
        rows = list(csv.reader(open(tmp_path / "log.csv")))
        assert tuple(rows[0]) == T.LOG_FIELDS and len(rows) == 3
        assert (tmp_path / "ck" / "best" / "params.bin").is_file()
        assert res.best.val_loss == min(r["val_loss"] for r in res.log)

    def test_same_seed_same_first_epoch(self, small_cfg, phantoms):
        losses = []
        for _ in range(2):
            model = M.build_model(small_cfg, seed=0)
            res = T.train(phantoms, model, T.TrainConfig(epochs=1, lr=1e-3, batch_size=2, seed=5))
            losses.append(res.log[0]["loss_total"])
        assert losses[0] == losses[1]

    def test_requires_val_split(self, small_cfg, phantoms):
        only_train = [data.Sample(s.image, s.landmarks, split="train") for s in phantoms]
        with pytest.raises(ValueError):
            T.train(only_train, M.build_model(small_cfg), T.TrainConfig(epochs=1))

    def test_divergence_keeps_best(self, tmp_path, small_cfg, phantoms):
        model = M.build_model(small_cfg, seed=0)
        cfg = T.TrainConfig(epochs=3, lr=1e-3, batch_size=2)
        calls = {"n": 0}
        original = T.Adam.step

        def poisoned(self, params, grads, lr, wd=0.0):
            calls["n"] += 1
            if calls["n"] > 1:
                grads = {k: np.full_like(g, np.nan) for k, g in grads.items()}
            return original(self, params, grads, lr, wd)

        T.Adam.step = poisoned
        try:
            with pytest.raises(T.DivergenceError):
                T.train(phantoms, model, cfg, checkpoint_dir=tmp_path / "ck")
        finally:
            T.Adam.step = original
        assert T.load_checkpoint(tmp_path / "ck" / "best").epoch == 0

    def test_pca_trains_only_head_and_respects_floor(self, phantoms):
        cfg = M.HybridGNetConfig(kind="pca", pca_components=1, image_size=64)
        model = M.build_model(cfg, seed=0)
        res = T.train(phantoms, model, T.TrainConfig(epochs=1, lr=1e-3, batch_size=2))
        assert set(model.trainable()) == {k for k in model.params if k.startswith("encoder.") or k.startswith("pca.head")}
        train = [s for s in phantoms if s.split == "train"]
        _, targets = T.prepare_batch(train, 64)
        rho = targets.reshape(len(train), -1)
        mean, comps = model.params["pca.mean"].data, model.params["pca.components"].data
        recon = M.pca_decode(M.pca_project(rho, mean, comps), mean, comps).reshape(rho.shape)
        floor = np.mean((recon - rho) ** 2) * 64**2
        assert res.log[0]["loss_mse"] >= floor - 1e-9
