"""Contour graphs: Laplacians, Chebyshev spectral convolution, pooling plans."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# right lung, left lung, heart
JSRT_ORGAN_SIZES = (44, 50, 26)
ORGAN_NAMES = ("right_lung", "left_lung", "heart")


def organ_ranges(sizes) -> list[tuple[int, int]]:
    """Contiguous [start, stop) index range of each organ."""
    bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def cycle_adjacency(sizes) -> np.ndarray:
    """Binary adjacency with one closed cycle per organ range."""
    m = int(sum(sizes))
    a = np.zeros((m, m))
    for start, stop in organ_ranges(sizes):
        n = stop - start
        if n < 2:
            raise ValueError(f"organ cycle needs at least 2 nodes, got {n}")
        idx = np.arange(start, stop)
        nxt = np.roll(idx, -1)
        a[idx, nxt] = 1.0
        a[nxt, idx] = 1.0
    return a


def largest_eigenvalue(mat: np.ndarray, tol: float = 1e-9, max_iter: int = 10_000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    m = mat.shape[0]
    v = np.random.default_rng(0).standard_normal(m)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = mat @ v
        new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            return new
        lam = new
    return lam


def build_laplacian(adj: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(L, L_scaled)`` with ``L = D - A`` and ``L_scaled = 2L/lambda_max - I``."""
    adj = np.asarray(adj, dtype=float)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError("adjacency must be square")
    if not np.any(adj):
        raise ValueError("adjacency has no edges")
    if not np.array_equal(adj, adj.T):
        raise ValueError("adjacency must be symmetric")
    lap = np.diag(adj.sum(axis=1)) - adj
    lam = largest_eigenvalue(lap)
    scaled = (2.0 / lam) * lap - np.eye(adj.shape[0])
    return lap, scaled


def chebyshev_conv(x: Tensor, l_scaled: np.ndarray, theta: Tensor, bias: Tensor) -> Tensor:
    """Chebyshev spectral graph convolution.

    ``x`` is [..., M, Fin], ``theta`` is [K, Fin, Fout], ``bias`` is [Fout].
    Computes ``sum_k T_k(L_scaled) x theta_k + bias`` using the three-term
    recursion on ``T_k(L_scaled) x``.
    """
    k, fin, fout = theta.shape
    m = l_scaled.shape[0]
    if x.ndim < 2 or x.shape[-2] != m or x.shape[-1] != fin:
        raise ValueError(f"chebyshev_conv: features {x.shape} do not match graph ({m} nodes) / theta {theta.shape}")
    if bias.shape != (fout,):
        raise ValueError(f"chebyshev_conv: bias must be ({fout},), got {bias.shape}")
    terms = [x]
    if k > 1:
        terms.append(ad.matmul(l_scaled, x))
    for _ in range(2, k):
        terms.append(2.0 * ad.matmul(l_scaled, terms[-1]) - terms[-2])
    stacked = ad.concat(terms, axis=-1) if k > 1 else x
    return ad.affine(stacked, ad.reshape(theta, (k * fin, fout)), bias)


@dataclass(frozen=True)
class PoolingPlan:
    """Fixed pairing of fine nodes into coarse nodes for one resolution step."""

    fine_sizes: tuple[int, ...]
    coarse_sizes: tuple[int, ...]
    pool_matrix: np.ndarray  # coarse x fine
    unpool_matrix: np.ndarray  # fine x coarse

    @property
    def num_fine(self) -> int:
        return int(sum(self.fine_sizes))

    @property
    def num_coarse(self) -> int:
        return int(sum(self.coarse_sizes))


def make_pooling_plan(fine_sizes) -> PoolingPlan:
    fine_sizes = tuple(int(s) for s in fine_sizes)
    coarse_sizes = tuple(math.ceil(s / 2) for s in fine_sizes)
    if min(coarse_sizes) < 2:
        raise ValueError(f"pooling {fine_sizes} would collapse an organ to a single node")
    mf, mc = sum(fine_sizes), sum(coarse_sizes)
    pool = np.zeros((mc, mf))
    unpool = np.zeros((mf, mc))
    for (fs, fe), (cs, ce) in zip(organ_ranges(fine_sizes), organ_ranges(coarse_sizes)):
        n_f, n_c = fe - fs, ce - cs
        for i in range(n_c):
            members = [fs + 2 * i] + ([fs + 2 * i + 1] if 2 * i + 1 < n_f else [])
            pool[cs + i, members] = 1.0 / len(members)
            unpool[fs + 2 * i, cs + i] = 1.0
            if 2 * i + 1 < n_f:
                succ = cs + (i + 1) % n_c
                unpool[fs + 2 * i + 1, [cs + i, succ]] = 0.5
    return PoolingPlan(fine_sizes, coarse_sizes, pool, unpool)


@dataclass
class GraphTopology:
    """Shared node set, adjacency and per-level operators for all samples."""

    organ_sizes: tuple[int, ...]
    adjacency: np.ndarray
    level_sizes: list[tuple[int, ...]] = field(default_factory=list)
    laplacians: list[np.ndarray] = field(default_factory=list)
    plans: list[PoolingPlan] = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return int(sum(self.organ_sizes))

    def num_nodes_at(self, level: int) -> int:
        return int(sum(self.level_sizes[level]))


def build_pooling_plan(topology: GraphTopology, num_levels: int) -> list[PoolingPlan]:
    """Pooling plans for ``num_levels`` halvings of ``topology``'s organ cycles."""
    if min(topology.organ_sizes) < 4:
        raise ValueError("each organ cycle needs at least 4 nodes at the finest level")
    plans = []
    sizes = topology.organ_sizes
    for _ in range(num_levels):
        plan = make_pooling_plan(sizes)
        plans.append(plan)
        sizes = plan.coarse_sizes
    return plans


def build_topology(organ_sizes=JSRT_ORGAN_SIZES, num_levels: int = 1) -> GraphTopology:
    organ_sizes = tuple(int(s) for s in organ_sizes)
    topo = GraphTopology(organ_sizes, cycle_adjacency(organ_sizes))
    topo.plans = build_pooling_plan(topo, num_levels)
    topo.level_sizes = [organ_sizes] + [p.coarse_sizes for p in topo.plans]
    topo.laplacians = [build_laplacian(cycle_adjacency(s))[1] for s in topo.level_sizes]
    return topo


def pool(x, plan: PoolingPlan):
    """Average each fine node pair into its coarse node (Tensor or ndarray, [..., M, F])."""
    if x.shape[-2] != plan.num_fine:
        raise ValueError(f"pool expects {plan.num_fine} rows, got {x.shape[-2]}")
    if isinstance(x, Tensor):
        return ad.matmul(plan.pool_matrix, x)
    return plan.pool_matrix @ np.asarray(x)


def unpool(x, plan: PoolingPlan):
    """Duplicate coarse nodes and insert successor midpoints along each cycle."""
    if x.shape[-2] != plan.num_coarse:
        raise ValueError(f"unpool expects {plan.num_coarse} rows, got {x.shape[-2]}")
    if isinstance(x, Tensor):
        return ad.matmul(plan.unpool_matrix, x)
    return plan.unpool_matrix @ np.asarray(x)
