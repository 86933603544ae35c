"""Grid-Laplacian benchmark: AMG W-cycles against Jacobi-preconditioned CG."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .amg import AmgConfig, amg_solve, operator_complexity, setup_hierarchy
from .sparsela import pcg_jacobi

__all__ = ["grid_laplacian", "square_grid_laplacian", "path_laplacian", "BenchRow",
           "bench_amg", "bench_matrix", "BENCH_AMG_CONFIG", "thread_count"]

# coarsen down to a handful of nodes so the level count reflects the grid size
BENCH_AMG_CONFIG = AmgConfig(coarsest_max=32, direct_max=512)


def grid_laplacian(k: int) -> sp.csr_matrix:
    """Unit-weight 8-neighbour graph Laplacian on a ``(2^k+1) x (2^k+1)`` grid."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return square_grid_laplacian(2 ** k + 1)


def _laplacian_from_pairs(a, b, N):
    W = sp.csr_matrix((np.ones(2 * a.size), (np.concatenate([a, b]), np.concatenate([b, a]))),
                      shape=(N, N))
    deg = np.asarray(W.sum(axis=1)).ravel()
    L = (sp.diags(deg) - W).tocsr()
    L.sort_indices()
    return L


def path_laplacian(N: int) -> sp.csr_matrix:
    """Unit-weight Laplacian of the path graph on ``N`` vertices."""
    if N < 2:
        raise ValueError("a path needs at least two vertices")
    i = np.arange(N - 1)
    return _laplacian_from_pairs(i, i + 1, N)


def square_grid_laplacian(s: int) -> sp.csr_matrix:
    """Unit-weight 8-neighbour graph Laplacian on an ``s x s`` grid."""
    if s < 2:
        raise ValueError("grid side must be >= 2")
    idx = np.arange(s * s).reshape(s, s)
    pairs = []
    for di, dj in ((0, 1), (1, 0), (1, 1), (1, -1)):
        b = idx[max(0, di):s + min(0, di), max(0, dj):s + min(0, dj)]
        a = idx[max(0, -di):s - max(0, di), max(0, -dj):s - max(0, dj)]
        pairs.append((a.ravel(), b.ravel()))
    a = np.concatenate([p[0] for p in pairs])
    b = np.concatenate([p[1] for p in pairs])
    return _laplacian_from_pairs(a, b, s * s)


@dataclass(frozen=True)
class BenchRow:
    inv_h: int
    eps: float
    itamg: int
    itpcg: int
    levels: int
    opcom: float

    def as_dict(self):
        return {"1/h": self.inv_h, "eps": self.eps, "itamg": self.itamg,
                "itpcg": self.itpcg, "J": self.levels, "opcom": self.opcom}


def thread_count() -> int:
    raw = os.environ.get("TRANSOLVE_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return 1


def _bench_shifted(L, label, eps, tol, config, seed):
    N = L.shape[0]
    A = (L + eps * sp.identity(N, format="csr")).tocsr()
    kernel_image = L @ np.ones(N) + eps
    singular = bool(eps == 0 and not np.any(np.abs(kernel_image) > 1e-12 * abs(L).max()))
    f = np.random.default_rng(seed).standard_normal(N)
    h = setup_hierarchy(A, config, kernel_image=kernel_image, singular=singular)
    amg = amg_solve(A, f, tol=tol, max_iter=200, hierarchy=h)
    pcg = pcg_jacobi(A, f, tol=tol, max_iter=50 * N, singular=singular)
    return BenchRow(label, float(eps), amg.iterations, pcg.iterations,
                    h.num_levels, operator_complexity(h))


def _bench_one(k, eps, tol, config, seed):
    return _bench_shifted(grid_laplacian(k), 2 ** k, eps, tol, config, seed)


def _run(fn, jobs, threads):
    threads = threads or thread_count()
    if threads == 1:
        return [fn(*j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda j: fn(*j), jobs))


def bench_matrix(L, eps_list=(1e-4, 1e-6, 1e-8, 1e-10, 0.0), tol=1e-11, config=None,
                 seed=0, threads=None):
    """Benchmark rows for ``L + eps I`` with a user-supplied symmetric ``L``.

    The ``1/h`` column holds the matrix size.
    """
    config = config or BENCH_AMG_CONFIG
    L = sp.csr_matrix(L)
    jobs = [(L, L.shape[0], eps, tol, config, seed) for eps in eps_list]
    return _run(_bench_shifted, jobs, threads)


def bench_amg(grid_k, eps_list=(1e-4, 1e-6, 1e-8, 1e-10, 0.0), tol=1e-11,
              config=None, seed=0, threads=None):
    """One row per ``(k, eps)``: AMG and PCG iteration counts, levels, complexity."""
    config = config or BENCH_AMG_CONFIG
    ks = [grid_k] if np.isscalar(grid_k) else list(grid_k)
    jobs = [(k, eps, tol, config, seed) for k in ks for eps in eps_list]
    return _run(_bench_one, jobs, threads)
