"""Central finite-difference checks for every differentiable op."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import graph


def numerical_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn`` wrt every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(build: Callable[..., ad.Tensor], inputs: list[np.ndarray], h: float = 1e-5, wrt=None) -> float:
    """Max relative error between analytic and numerical gradients of ``build``.

    ``build`` maps parameter tensors to an output tensor; a fixed random
    projection turns that output into a scalar so the full Jacobian is probed.
    ``wrt`` restricts the comparison to the listed input positions.
    """
    params = [ad.parameter(x) for x in inputs]
    with ad.ComputationRecord() as rec:
        out = build(*params)
    proj = np.random.default_rng(1234).standard_normal(out.shape)
    with ad.ComputationRecord() as rec:
        out = build(*params)
        root = ad.tsum(ad.mul(out, proj))
    ad.backward(rec, root)

    def scalar() -> float:
        return float(np.sum(build(*params).data * proj))

    worst = 0.0
    for i, p in enumerate(params):
        if wrt is not None and i not in wrt:
            continue
        num = numerical_grad(scalar, p.data, h)
        worst = max(worst, relative_error(p.grad, num))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def _case_conv(rng):
    n, c, f = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
    k = int(rng.choice([1, 2, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = rng.integers(k, 6), rng.integers(k, 6)
    x = rng.standard_normal((n, c, h, w))
    kern = rng.standard_normal((f, c, k, k))
    b = rng.standard_normal(f)
    return (lambda x, kk, b: ad.conv2d(x, kk, b, stride, pad)), [x, kern, b], None


def _case_maxpool(rng):
    win = int(rng.choice([1, 2]))
    # distinct values keep every window's argmax well separated
    x = rng.permutation(16 * 2).reshape(1, 2, 4, 4) / 10.0 + rng.uniform(0, 0.01, (1, 2, 4, 4))
    return (lambda x: ad.maxpool2d(x, win)), [x], None


def _safe_centers(rng, m, h, w):
    # sample positions stay off pixel-centre kinks and away from the clamped border
    fx = rng.integers(1, w - 2, m) + rng.uniform(0.1, 0.9, m)
    fy = rng.integers(1, h - 2, m) + rng.uniform(0.1, 0.9, m)
    return np.stack([(fx + 0.5) / w, (fy + 0.5) / h], axis=-1)


def _case_roi_features(rng):
    c, h, w, m = 2, int(rng.integers(3, 6)), int(rng.integers(3, 6)), 3
    fm = rng.standard_normal((c, h, w))
    centers = rng.uniform(-0.2, 1.2, (m, 2))
    return ad.bilinear_roi_pool, [fm, centers], {0}


def _case_roi_coords(rng):
    c, h, w, m = 2, int(rng.integers(4, 7)), int(rng.integers(4, 7)), 3
    fm = rng.standard_normal((c, h, w))
    return ad.bilinear_roi_pool, [fm, _safe_centers(rng, m, h, w)], None


def _case_roi_batched(rng):
    n, c, h, w, m = 2, 2, 5, 5, 3
    fm = rng.standard_normal((n, c, h, w))
    centers = np.stack([_safe_centers(rng, m, h, w) for _ in range(n)])
    return ad.bilinear_roi_pool, [fm, centers], None


def _case_layer_norm(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    x = rng.standard_normal(shape)
    gamma = rng.standard_normal(shape[-1])
    beta = rng.standard_normal(shape[-1])
    return ad.layer_norm, [x, gamma, beta], None


def _case_layer_norm_channels(rng):
    x = rng.standard_normal((2, 3, 2, 2))
    gamma = rng.standard_normal((3, 1, 1))
    beta = rng.standard_normal((3, 1, 1))
    return (lambda x, g, b: ad.layer_norm(x, g, b, axis=1)), [x, gamma, beta], None


def _case_matmul(rng):
    a = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), 3))
    b = rng.standard_normal((3, int(rng.integers(1, 4))))
    return ad.matmul, [a, b], None


def _case_affine(rng):
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), 3))
    w = rng.standard_normal((3, 2))
    b = rng.standard_normal(2)
    return ad.affine, [x, w, b], None


def _case_relu(rng):
    return ad.relu, [_away_from_zero(rng, (3, 4))], None


def _case_elementwise(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((1, 4))
    return (lambda a, b: ad.exp(ad.mul(a, 0.3)) * b - (a + b)), [a, b], None


def _case_shape_ops(rng):
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((2, 3, 1))

    def build(a, b):
        c = ad.concat([a, b], axis=-1)
        t = ad.transpose(c, (2, 0, 1))[1:4]
        return ad.reshape(t, (-1,)) * 1.5 + ad.tmean(a, axis=1).sum()

    return build, [a, b], None


def _case_mse(rng):
    a = rng.standard_normal((4, 2))
    b = rng.standard_normal((4, 2))
    return ad.mse, [a, b], None


def _case_kl(rng):
    mu = rng.standard_normal(5)
    lv = rng.standard_normal(5) * 0.5
    return ad.kl_divergence, [mu, lv], None


def _case_reparam(rng):
    mu = rng.standard_normal(4)
    lv = rng.standard_normal(4) * 0.5
    seed = int(rng.integers(1 << 30))
    return (lambda m, l: ad.reparameterize(m, l, np.random.default_rng(seed))), [mu, lv], None


def _random_graph(rng, m):
    a = np.triu((rng.uniform(size=(m, m)) < 0.4).astype(float), 1)
    a[0, 1] = 1.0
    return a + a.T


def _case_cheb(rng):
    m = int(rng.integers(3, 9))
    _, ls = graph.build_laplacian(_random_graph(rng, m))
    k = int(rng.integers(1, 5))
    x = rng.standard_normal((2, m, 3))
    theta = rng.standard_normal((k, 3, 2))
    b = rng.standard_normal(2)
    return (lambda x, t, b: graph.chebyshev_conv(x, ls, t, b)), [x, theta, b], None


def _case_pooling(rng):
    sizes = tuple(int(s) for s in rng.integers(4, 8, 3))
    plan = graph.make_pooling_plan(sizes)
    x = rng.standard_normal((sum(sizes), 2))
    return (lambda x: graph.unpool(graph.pool(x, plan), plan)), [x], None


# op name -> (case factory, tolerance)
CASES: dict[str, tuple[Callable, float]] = {
    "conv2d": (_case_conv, 1e-4),
    "maxpool2d": (_case_maxpool, 1e-4),
    "roi_pool_features": (_case_roi_features, 1e-4),
    "roi_pool_coords": (_case_roi_coords, 1e-3),
    "roi_pool_batched": (_case_roi_batched, 1e-3),
    "relu": (_case_relu, 1e-4),
    "affine": (_case_affine, 1e-4),
    "matmul": (_case_matmul, 1e-4),
    "layer_norm": (_case_layer_norm, 1e-4),
    "layer_norm_channels": (_case_layer_norm_channels, 1e-4),
    "elementwise": (_case_elementwise, 1e-4),
    "shape_ops": (_case_shape_ops, 1e-4),
    "mse": (_case_mse, 1e-4),
    "kl_divergence": (_case_kl, 1e-6),
    "reparameterize": (_case_reparam, 1e-4),
    "chebyshev_conv": (_case_cheb, 1e-4),
    "pool_unpool": (_case_pooling, 1e-4),
}


@dataclass
class OpReport:
    op: str
    trials: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def run_suite(seed: int = 0, trials: int = 20, ops=None) -> list[OpReport]:
    rng = np.random.default_rng(seed)
    reports = []
    for name, (factory, tol) in CASES.items():
        if ops is not None and name not in ops:
            continue
        worst = 0.0
        for _ in range(trials):
            build, inputs, wrt = factory(rng)
            worst = max(worst, check_gradients(build, inputs, wrt=wrt))
        reports.append(OpReport(name, trials, worst, tol))
    return reports


def format_report(reports: list[OpReport], elapsed: float | None = None) -> str:
    lines = [f"{'op':<22}{'trials':>7}{'max_rel_err':>14}{'tol':>10}  status"]
    for r in reports:
        lines.append(f"{r.op:<22}{r.trials:>7}{r.max_rel_error:>14.3e}{r.tolerance:>10.0e}  {'PASS' if r.passed else 'FAIL'}")
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.1f}s")
    return "\n".join(lines)


def timed_suite(seed: int = 0, trials: int = 20) -> tuple[list[OpReport], float]:
    t0 = time.perf_counter()
    reports = run_suite(seed, trials)
    return reports, time.perf_counter() - t0
