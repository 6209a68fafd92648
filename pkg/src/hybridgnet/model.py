"""HybridGNet and the PCA / FC landmark baselines.

All three share the residual CNN encoder. HybridGNet decodes a variational
latent code with six Chebyshev graph convolutions, one unpooling step, and up
to two image-to-graph skip connections (IGSC) that sample encoder features at
intermediate node positions predicted by deep-supervision heads.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import JSRT_ORGAN_SIZES, GraphTopology, build_topology, chebyshev_conv, unpool

KINDS = ("hybrid", "pca", "fc")
NUM_ENCODER_BLOCKS = 6
IGSC_FEATURE_INIT_SCALE = 0.01


@dataclass
class HybridGNetConfig:
    kind: str = "hybrid"
    image_size: int = 128
    encoder_channels: tuple[int, ...] = (8, 16, 32, 64, 128, 128)
    latent_features: int = 8
    decoder_channels: int = 32
    cheb_order: int = 6
    igsc_levels: tuple[int, ...] = (6, 5)
    ds_enabled: bool = True
    organ_sizes: tuple[int, ...] = JSRT_ORGAN_SIZES
    pca_components: int = 0
    fc_hidden: int = 256

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.igsc_levels = tuple(int(v) for v in self.igsc_levels)
        self.organ_sizes = tuple(int(v) for v in self.organ_sizes)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if len(self.encoder_channels) != NUM_ENCODER_BLOCKS:
            raise ValueError(f"encoder_channels needs {NUM_ENCODER_BLOCKS} entries")
        if self.image_size % (2**NUM_ENCODER_BLOCKS):
            raise ValueError(f"image_size must be divisible by {2**NUM_ENCODER_BLOCKS}")
        if self.cheb_order < 1:
            raise ValueError("cheb_order must be >= 1")
        if len(self.igsc_levels) > 2:
            raise ValueError("at most two IGSC modules are supported")
        if any(not 1 <= v <= NUM_ENCODER_BLOCKS for v in self.igsc_levels):
            raise ValueError("igsc_levels must name encoder blocks 1..6")
        if self.kind == "pca" and self.pca_components < 1:
            raise ValueError("pca model needs pca_components >= 1")

    @property
    def num_nodes(self) -> int:
        return int(sum(self.organ_sizes))

    @property
    def latent_nodes(self) -> int:
        return int(sum(math.ceil(s / 2) for s in self.organ_sizes))

    @property
    def latent_size(self) -> int:
        return self.latent_nodes * self.latent_features

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "HybridGNetConfig":
        return cls(**d)


@dataclass
class ForwardOutputs:
    positions: Tensor  # [N, M, 2], normalized
    mu: Tensor | None = None
    logvar: Tensor | None = None
    ds_coarse: Tensor | None = None  # [N, M/2, 2]
    ds_fine: Tensor | None = None  # [N, M, 2]
    extras: dict = field(default_factory=dict)


def _kaiming(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class _ParamBuilder:
    def __init__(self, rng):
        self.rng = rng
        self.params: dict[str, Tensor] = {}

    def conv(self, name, cin, cout, k):
        self.params[f"{name}.weight"] = ad.parameter(_kaiming(self.rng, (cout, cin, k, k), cin * k * k))
        self.params[f"{name}.bias"] = ad.parameter(np.zeros(cout))

    def affine(self, name, fin, fout):
        self.params[f"{name}.weight"] = ad.parameter(_kaiming(self.rng, (fin, fout), fin))
        self.params[f"{name}.bias"] = ad.parameter(np.zeros(fout))

    def norm(self, name, c):
        self.params[f"{name}.gamma"] = ad.parameter(np.ones(c))
        self.params[f"{name}.beta"] = ad.parameter(np.zeros(c))

    def cheb(self, name, k, fin, fout):
        self.params[f"{name}.theta"] = ad.parameter(_kaiming(self.rng, (k, fin, fout), k * fin))
        self.params[f"{name}.bias"] = ad.parameter(np.zeros(fout))


def _as_batch(images) -> np.ndarray:
    x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=float)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    return x


class LandmarkModel:
    """Shared residual encoder; subclasses provide the landmark decoder."""

    def __init__(self, config: HybridGNetConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        config.validate()
        self.config = config
        self.topology: GraphTopology = build_topology(config.organ_sizes, 1)
        if params is None:
            builder = _ParamBuilder(np.random.default_rng(seed))
            self._init_encoder(builder)
            self._init_decoder(builder)
            params = builder.params
        self.params = params

    # -- parameters --

    def _init_encoder(self, b: _ParamBuilder) -> None:
        cin = 1
        for i, cout in enumerate(self.config.encoder_channels, 1):
            p = f"encoder.block{i}"
            b.conv(f"{p}.conv1", cin, cout, 3)
            b.norm(f"{p}.norm1", cout)
            b.conv(f"{p}.conv2", cout, cout, 3)
            b.norm(f"{p}.norm2", cout)
            if cin != cout:
                b.conv(f"{p}.proj", cin, cout, 1)
            cin = cout

    def _init_decoder(self, b: _ParamBuilder) -> None:
        raise NotImplementedError

    @property
    def flat_features(self) -> int:
        side = self.config.image_size // 2**NUM_ENCODER_BLOCKS
        return self.config.encoder_channels[-1] * side * side

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def num_parameters(self, prefix: str = "") -> int:
        return sum(v.data.size for k, v in self.params.items() if k.startswith(prefix))

    # -- encoder --

    def encode_features(self, images) -> tuple[Tensor, dict[int, Tensor]]:
        """Run the six residual blocks; returns flattened features and per-block maps."""
        x = _as_batch(images)
        s = self.config.image_size
        if x.shape[1:] != (1, s, s):
            raise ValueError(f"expected images of shape (1, {s}, {s}), got {x.shape[1:]}")
        p = self.params
        h = Tensor(x)
        maps = {}
        for i in range(1, NUM_ENCODER_BLOCKS + 1):
            pre = f"encoder.block{i}"
            y = ad.conv2d(h, p[f"{pre}.conv1.weight"], p[f"{pre}.conv1.bias"], 1, 1)
            y = ad.relu(self._norm2d(y, f"{pre}.norm1"))
            y = ad.conv2d(y, p[f"{pre}.conv2.weight"], p[f"{pre}.conv2.bias"], 1, 1)
            y = self._norm2d(y, f"{pre}.norm2")
            skip = ad.conv2d(h, p[f"{pre}.proj.weight"], p[f"{pre}.proj.bias"]) if f"{pre}.proj.weight" in p else h
            h = ad.maxpool2d(ad.relu(y + skip), 2)
            maps[i] = h
        return ad.reshape(h, (h.shape[0], -1)), maps

    def _norm2d(self, x: Tensor, name: str) -> Tensor:
        c = x.shape[1]
        g = ad.reshape(self.params[f"{name}.gamma"], (c, 1, 1))
        b = ad.reshape(self.params[f"{name}.beta"], (c, 1, 1))
        return ad.layer_norm(x, g, b, axis=1)

    def _latent(self, flat: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        mu = ad.affine(flat, p["latent.mu.weight"], p["latent.mu.bias"])
        logvar = ad.affine(flat, p["latent.logvar.weight"], p["latent.logvar.bias"])
        return mu, logvar

    def forward(self, images, rng: np.random.Generator | None = None, mode: str = "train") -> ForwardOutputs:
        raise NotImplementedError

    def predict(self, images, batch_size: int = 8) -> np.ndarray:
        """Inference-mode landmark positions in pixels, [N, M, 2]."""
        x = _as_batch(images)
        out = []
        for i in range(0, len(x), batch_size):
            out.append(self.forward(x[i : i + batch_size], mode="infer").positions.data)
        return np.concatenate(out) * self.config.image_size


class HybridGNet(LandmarkModel):
    def _init_decoder(self, b: _ParamBuilder) -> None:
        cfg = self.config
        k, f, h = cfg.cheb_order, cfg.latent_features, cfg.decoder_channels
        lat, flat = cfg.latent_size, self.flat_features
        b.affine("latent.mu", flat, lat)
        b.affine("latent.logvar", flat, lat)
        widths = [f, h, h, h, h, h]
        for i, fin in enumerate(widths, 1):
            fout = 2 if i == 6 else h
            b.cheb(f"decoder.gcn{i}", k, fin, fout)
            if i < 6:
                b.norm(f"decoder.norm{i}", h)
        for j, level in enumerate(cfg.igsc_levels, 1):
            ch = cfg.encoder_channels[level - 1]
            b.cheb(f"decoder.ds{j}", k, h, 2)
            b.affine(f"decoder.igsc{j}.proj", h + ch, h)
            # rows reading sampled image features start near zero so the skip opens gradually
            b.params[f"decoder.igsc{j}.proj.weight"].data[h:] *= IGSC_FEATURE_INIT_SCALE

    def encode(self, images):
        """Returns ``(mu, logvar, skip_maps)`` with skip maps keyed by encoder block."""
        flat, maps = self.encode_features(images)
        mu, logvar = self._latent(flat)
        return mu, logvar, {lvl: maps[lvl] for lvl in self.config.igsc_levels}

    def _gcn(self, x: Tensor, i: int, level: int, act: bool = True) -> Tensor:
        p = self.params
        y = chebyshev_conv(x, self.topology.laplacians[level], p[f"decoder.gcn{i}.theta"], p[f"decoder.gcn{i}.bias"])
        if not act:
            return y
        return ad.relu(ad.layer_norm(y, p[f"decoder.norm{i}.gamma"], p[f"decoder.norm{i}.beta"]))

    def _igsc(self, x: Tensor, j: int, level: int, fmap: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        pos = chebyshev_conv(x, self.topology.laplacians[level], p[f"decoder.ds{j}.theta"], p[f"decoder.ds{j}.bias"])
        feats = ad.bilinear_roi_pool(fmap, pos)
        x = ad.affine(ad.concat([x, feats], axis=-1), p[f"decoder.igsc{j}.proj.weight"], p[f"decoder.igsc{j}.proj.bias"])
        return x, pos

    def decode(self, z: Tensor, skip_maps: dict[int, Tensor]) -> ForwardOutputs:
        cfg = self.config
        if z.shape[-1] != cfg.latent_size:
            raise ValueError(f"latent code has {z.shape[-1]} components, expected {cfg.latent_size}")
        batched = z.ndim == 2
        if not batched:
            z = ad.reshape(z, (1, -1))
        levels = cfg.igsc_levels
        x = ad.reshape(z, (z.shape[0], cfg.latent_nodes, cfg.latent_features))
        x = self._gcn(x, 1, 1)
        x = self._gcn(x, 2, 1)
        ds_coarse = ds_fine = None
        if len(levels) >= 1:
            x, ds_coarse = self._igsc(x, 1, 1, skip_maps[levels[0]])
        x = self._gcn(x, 3, 1)
        x = unpool(x, self.topology.plans[0])
        x = self._gcn(x, 4, 0)
        x = self._gcn(x, 5, 0)
        if len(levels) >= 2:
            x, ds_fine = self._igsc(x, 2, 0, skip_maps[levels[1]])
        pos = self._gcn(x, 6, 0, act=False)
        if not batched:
            pos = ad.reshape(pos, pos.shape[1:])
            ds_coarse = ad.reshape(ds_coarse, ds_coarse.shape[1:]) if ds_coarse is not None else None
            ds_fine = ad.reshape(ds_fine, ds_fine.shape[1:]) if ds_fine is not None else None
        return ForwardOutputs(pos, ds_coarse=ds_coarse, ds_fine=ds_fine)

    def forward(self, images, rng=None, mode="train") -> ForwardOutputs:
        mu, logvar, skips = self.encode(images)
        z = ad.reparameterize(mu, logvar, rng, train=(mode == "train"))
        out = self.decode(z, skips)
        out.mu, out.logvar = mu, logvar
        return out


def pca_fit(rho: np.ndarray, num_components: int):
    """PCA of vectorized landmark sets ``rho`` ([N, 2M]).

    Returns ``(mean, components, explained_variance)``; components are the
    orthonormal right singular vectors of the centred data, one per row.
    """
    rho = np.asarray(rho, dtype=float)
    n = rho.shape[0]
    if num_components < 1 or num_components > n:
        raise ValueError(f"num_components must lie in [1, {n}]")
    mean = rho.mean(axis=0)
    _, s, vt = np.linalg.svd(rho - mean, full_matrices=False)
    rank = int(np.sum(s > s.max() * 1e-10)) if s.size and s.max() > 0 else 0
    if num_components > rank:
        raise ValueError(f"num_components={num_components} exceeds data rank {rank}")
    var = s**2 / max(n - 1, 1)
    return mean, vt[:num_components], var[:num_components]


def pca_project(rho: np.ndarray, mean: np.ndarray, components: np.ndarray) -> np.ndarray:
    return (np.asarray(rho, float) - mean) @ components.T


def pca_decode(coeffs, mean: np.ndarray, components: np.ndarray) -> np.ndarray:
    """``mean + coeffs @ components`` reshaped to [..., M, 2]."""
    rho = np.asarray(coeffs, float) @ components + mean
    return rho.reshape(rho.shape[:-1] + (-1, 2))


class PCAModel(LandmarkModel):
    """CNN encoder regressing PCA shape coefficients."""

    def _init_decoder(self, b: _ParamBuilder) -> None:
        cfg = self.config
        b.affine("pca.head", self.flat_features, cfg.pca_components)
        m2 = 2 * cfg.num_nodes
        b.params["pca.mean"] = Tensor(np.full(m2, 0.5))
        b.params["pca.components"] = Tensor(np.eye(cfg.pca_components, m2))

    def set_shape_model(self, mean: np.ndarray, components: np.ndarray) -> None:
        self.params["pca.mean"] = Tensor(mean)
        self.params["pca.components"] = Tensor(components)

    def forward(self, images, rng=None, mode="train") -> ForwardOutputs:
        flat, _ = self.encode_features(images)
        p = self.params
        coeffs = ad.affine(flat, p["pca.head.weight"], p["pca.head.bias"])
        rho = ad.matmul(coeffs, p["pca.components"]) + p["pca.mean"]
        pos = ad.reshape(rho, (rho.shape[0], -1, 2))
        return ForwardOutputs(pos, extras={"coeffs": coeffs})


def fc_decode(z: Tensor, params: dict[str, Tensor], num_nodes: int) -> Tensor:
    """Two affine+ReLU layers then an affine map to ``num_nodes`` x 2 positions."""
    x = ad.relu(ad.affine(z, params["fc.hidden1.weight"], params["fc.hidden1.bias"]))
    x = ad.relu(ad.affine(x, params["fc.hidden2.weight"], params["fc.hidden2.bias"]))
    out = ad.affine(x, params["fc.out.weight"], params["fc.out.bias"])
    if out.shape[-1] != 2 * num_nodes:
        raise ValueError(f"fc head emits {out.shape[-1]} values, expected {2 * num_nodes}")
    return ad.reshape(out, out.shape[:-1] + (num_nodes, 2))


class FCModel(LandmarkModel):
    """CNN encoder, variational latent and a fully connected landmark decoder."""

    def _init_decoder(self, b: _ParamBuilder) -> None:
        cfg = self.config
        lat, hid = cfg.latent_size, cfg.fc_hidden
        b.affine("latent.mu", self.flat_features, lat)
        b.affine("latent.logvar", self.flat_features, lat)
        b.affine("fc.hidden1", lat, hid)
        b.affine("fc.hidden2", hid, hid)
        b.affine("fc.out", hid, 2 * cfg.num_nodes)

    def forward(self, images, rng=None, mode="train") -> ForwardOutputs:
        flat, _ = self.encode_features(images)
        mu, logvar = self._latent(flat)
        z = ad.reparameterize(mu, logvar, rng, train=(mode == "train"))
        return ForwardOutputs(fc_decode(z, self.params, self.config.num_nodes), mu=mu, logvar=logvar)


def build_model(config: HybridGNetConfig, params=None, seed: int = 0) -> LandmarkModel:
    cls = {"hybrid": HybridGNet, "pca": PCAModel, "fc": FCModel}[config.kind]
    return cls(config, params=params, seed=seed)


def mirrored_conv_decoder_parameters(config: HybridGNetConfig, out_channels: int = 3) -> int:
    """Parameter count of a dense CNN decoder mirroring the encoder.

    The mirror maps the latent code back to the last encoder map with an
    affine layer, runs the six residual blocks in reverse channel order (with
    upsampling instead of pooling), and ends in a 1x1 convolution to
    ``out_channels`` per-pixel maps. Used as the reference for decoder size.
    """
    side = config.image_size // 2**NUM_ENCODER_BLOCKS
    chans = list(reversed(config.encoder_channels))
    flat = chans[0] * side * side
    total = config.latent_size * flat + flat
    cin = chans[0]
    for cout in chans[1:] + [chans[-1]]:
        total += cin * cout * 9 + cout + 2 * cout  # conv1 + norm1
        total += cout * cout * 9 + cout + 2 * cout  # conv2 + norm2
        if cin != cout:
            total += cin * cout + cout
        cin = cout
    return total + cin * out_channels + out_channels
