import numpy as np
import pytest

from hybridgnet import autodiff as ad
from hybridgnet import model as M
from hybridgnet.gradcheck import check_gradients


@pytest.fixture(scope="module")
def hybrid():
    return M.build_model(M.HybridGNetConfig(), seed=0)


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(0).uniform(size=(128, 128))


def mse_loss(out, target):
    return ad.mse(out.positions, target)


class TestConfig:
    def test_latent_size(self):
        cfg = M.HybridGNetConfig()
        assert cfg.latent_nodes == 60 and cfg.latent_size == 480

    @pytest.mark.parametrize(
        "kwargs",
        [{"cheb_order": 0}, {"igsc_levels": (6, 5, 4)}, {"igsc_levels": (7,)}, {"image_size": 100}, {"kind": "unet"}, {"kind": "pca"}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            M.HybridGNetConfig(**kwargs).validate()

    def test_roundtrip(self):
        cfg = M.HybridGNetConfig(igsc_levels=(6,), cheb_order=3)
        assert M.HybridGNetConfig.from_dict(cfg.to_dict()) == cfg


class TestEncode:
    def test_shapes(self, hybrid, image):
        mu, logvar, maps = hybrid.encode(image)
        assert mu.shape == (1, 480) and logvar.shape == (1, 480)
        assert maps[5].shape[-2:] == (4, 4)
        assert maps[6].shape[-2:] == (2, 2)

    def test_deterministic(self, hybrid, image):
        np.testing.assert_array_equal(hybrid.encode(image)[0].data, hybrid.encode(image)[0].data)

    def test_zero_image_finite(self, hybrid):
        mu, logvar, _ = hybrid.encode(np.zeros((128, 128)))
        assert np.isfinite(mu.data).all() and np.isfinite(logvar.data).all()

    def test_wrong_size(self, hybrid):
        with pytest.raises(ValueError):
            hybrid.encode(np.zeros((64, 64)))


class TestDecode:
    def test_row_counts(self, hybrid, image):
        out = hybrid.forward(image, mode="infer")
        assert out.positions.shape == (1, 120, 2)
        assert out.ds_coarse.shape == (1, 60, 2)
        assert out.ds_fine.shape == (1, 120, 2)

    def test_latent_length_mismatch(self, hybrid, image):
        _, _, maps = hybrid.encode(image)
        with pytest.raises(ValueError):
            hybrid.decode(ad.Tensor(np.zeros(479)), maps)

    def test_severed_skip_path(self, image):
        model = M.build_model(M.HybridGNetConfig(), seed=1)
        for name, p in model.params.items():
            if ".ds" in name or ".igsc" in name:
                p.data[...] = 0.0
        # the projection still has to carry node features through, so keep an identity on them
        for j in (1, 2):
            w = model.params[f"decoder.igsc{j}.proj.weight"].data
            w[: w.shape[1], :] = np.eye(w.shape[1])
        z = ad.Tensor(np.random.default_rng(2).standard_normal(480))
        other = np.random.default_rng(3).uniform(size=(128, 128))
        a = model.decode(z, model.encode(image)[2]).positions.data
        b = model.decode(z, model.encode(other)[2]).positions.data
        np.testing.assert_array_equal(a, b)

    def test_encoder_gradient_through_skips(self, hybrid, image):
        mu, _, _ = hybrid.encode(image)
        z = ad.Tensor(mu.data[0])
        target = np.full((120, 2), 0.5)
        name = "encoder.block6.conv2.weight"
        kernel = hybrid.params[name]
        with ad.ComputationRecord() as rec:
            root = mse_loss(hybrid.decode(z, hybrid.encode(image)[2]), target)
        ad.backward(rec, root)
        grad = kernel.grad.copy()
        assert np.abs(grad).max() > 0
        # finite-difference spot check on the largest entry, with z held fixed
        idx = np.unravel_index(np.argmax(np.abs(grad)), grad.shape)
        h = 1e-5
        vals = []
        for sign in (1, -1):
            kernel.data[idx] += sign * h
            vals.append(mse_loss(hybrid.decode(z, hybrid.encode(image)[2]), target).data)
            kernel.data[idx] -= sign * h
        fd = (vals[0] - vals[1]) / (2 * h)
        assert fd == pytest.approx(grad[idx], rel=1e-4)


class TestForward:
    def test_infer_is_repeatable(self, hybrid, image):
        a = hybrid.forward(image, mode="infer").positions.data
        np.testing.assert_array_equal(a, hybrid.forward(image, mode="infer").positions.data)

    def test_seeded_train_mode(self, hybrid, image):
        a = hybrid.forward(image, np.random.default_rng(5), "train").positions.data
        b = hybrid.forward(image, np.random.default_rng(5), "train").positions.data
        np.testing.assert_array_equal(a, b)

    def test_predict_in_pixels(self, hybrid, image):
        pred = hybrid.predict(image)
        np.testing.assert_allclose(pred, hybrid.forward(image, mode="infer").positions.data * 128)

    def test_no_igsc_depends_on_image_only_through_z(self, image):
        model = M.build_model(M.HybridGNetConfig(igsc_levels=()), seed=0)
        z = ad.Tensor(np.random.default_rng(1).standard_normal(480))
        other = 1.0 - image
        a = model.decode(z, model.encode(image)[2]).positions.data
        b = model.decode(z, model.encode(other)[2]).positions.data
        np.testing.assert_array_equal(a, b)
        assert model.forward(image, mode="infer").ds_coarse is None

    def test_batch_equivariance(self, hybrid):
        imgs = np.random.default_rng(4).uniform(size=(3, 128, 128))
        batched = hybrid.forward(imgs, mode="infer").positions.data
        for i in range(3):
            single = hybrid.forward(imgs[i], mode="infer").positions.data[0]
            np.testing.assert_allclose(batched[i], single, atol=1e-12)

    def test_decoder_smaller_than_dense_mirror(self, hybrid):
        assert hybrid.num_parameters("decoder.") < M.mirrored_conv_decoder_parameters(hybrid.config)

    def test_finite_over_random_inits(self):
        # 20 parameter draws x 50 images = 1000 forward passes at a small image size
        cfg = M.HybridGNetConfig(image_size=64)
        rng = np.random.default_rng(0)
        for seed in range(20):
            model = M.build_model(cfg, seed=seed)
            imgs = rng.uniform(size=(50, 64, 64))
            out = model.forward(imgs, np.random.default_rng(seed), "train")
            assert np.isfinite(out.positions.data).all()

    def test_parameter_names_sorted_serialization_is_unique(self, hybrid):
        names = list(hybrid.params)
        assert len(names) == len(set(names))


class TestPCA:
    def test_rank_one_line(self):
        rng = np.random.default_rng(0)
        direction = rng.standard_normal(8)
        rho = 1.0 + rng.standard_normal((10, 1)) * direction
        _, s, _ = np.linalg.svd(rho - rho.mean(axis=0))
        assert np.sum(s > 1e-10 * s.max()) == 1
        M.pca_fit(rho, 1)
        with pytest.raises(ValueError):
            M.pca_fit(rho, 2)

    def test_full_reconstruction(self):
        rho = np.random.default_rng(1).standard_normal((12, 8))
        mean, comps, _ = M.pca_fit(rho, 8)
        rec = M.pca_decode(M.pca_project(rho, mean, comps), mean, comps)
        np.testing.assert_allclose(rec.reshape(12, 8), rho, atol=1e-9)

    def test_variance_matches_covariance_eigenvalues(self):
        rho = np.random.default_rng(2).standard_normal((6, 4))
        _, comps, var = M.pca_fit(rho, 4)
        centred = rho - rho.mean(axis=0)
        cov = np.zeros((4, 4))
        for row in centred:
            cov += np.outer(row, row)
        cov /= 5
        eig = np.sort(np.linalg.eigvalsh(cov))[::-1]
        np.testing.assert_allclose(var, eig, atol=1e-10)
        assert np.all(np.diff(var) <= 0)
        np.testing.assert_allclose(comps @ comps.T, np.eye(4), atol=1e-10)

    def test_too_many_components(self):
        with pytest.raises(ValueError):
            M.pca_fit(np.ones((3, 4)), 4)

    def test_model_forward_uses_shape_model(self):
        cfg = M.HybridGNetConfig(kind="pca", pca_components=2, image_size=64)
        model = M.build_model(cfg)
        mean = np.random.default_rng(0).uniform(size=240)
        model.set_shape_model(mean, np.eye(2, 240))
        model.params["pca.head.weight"].data[...] = 0.0
        out = model.forward(np.zeros((64, 64)), mode="infer").positions.data
        np.testing.assert_array_equal(out[0], mean.reshape(120, 2))
        assert "pca.mean" not in model.trainable()


class TestFC:
    def test_zero_weights_give_bias(self):
        model = M.build_model(M.HybridGNetConfig(kind="fc", image_size=64))
        p = {k: ad.Tensor(np.zeros_like(v.data)) for k, v in model.params.items()}
        bias = np.arange(240.0)
        p["fc.out.bias"] = ad.Tensor(bias)
        out = M.fc_decode(ad.Tensor(np.ones(480)), p, 120)
        assert out.shape == (120, 2)
        np.testing.assert_array_equal(out.data, bias.reshape(120, 2))

    def test_shape_mismatch(self):
        model = M.build_model(M.HybridGNetConfig(kind="fc", image_size=64))
        with pytest.raises(ValueError):
            M.fc_decode(ad.Tensor(np.ones(480)), model.params, 100)

    def test_head_gradient(self):
        rng = np.random.default_rng(0)
        shapes = {"fc.hidden1": (6, 5), "fc.hidden2": (5, 5), "fc.out": (5, 8)}
        arrays = []
        for name, shape in shapes.items():
            arrays += [rng.standard_normal(shape), rng.standard_normal(shape[1])]
        names = [f"{n}.{s}" for n in shapes for s in ("weight", "bias")]

        def build(z, *ps):
            return M.fc_decode(z, dict(zip(names, ps)), 4)

        assert check_gradients(build, [rng.standard_normal((2, 6))] + arrays) < 1e-4
