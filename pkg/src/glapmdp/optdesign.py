"""G-optimal experimental design over a finite vector set.

Computes a probability distribution ``g`` over vectors ``{v_i}`` minimizing
the worst-case leverage ``max_i ||v_i||^2_{V(g)^{-1}}`` where
``V(g) = sum_i g_i v_i v_i^T``.  By Kiefer-Wolfowitz duality the optimum
equals the dimension of the spanned subspace, which gives a clean stopping
certificate: iterate Frank-Wolfe on the log-det criterion until
``max_i leverage <= rank * (1 + tol)``.

Rank deficiency is handled by working in an orthonormal basis of the span
(eigenvalue cutoff ``1e-10 * lambda_max`` on the Gram matrix), so the
certificate is honest with respect to the span's rank rather than the
ambient dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Weights below this are dropped before the Caratheodory pass.
PRUNE_EPS = 1e-9

# Relative eigenvalue cutoff defining the numerical span of the input set.
SPAN_CUTOFF = 1e-10


class DesignError(ValueError):
    """Degenerate input (for example, every vector is zero)."""


class DesignNotConverged(RuntimeError):
    """Frank-Wolfe hit the iteration cap before certifying the bound."""

    def __init__(self, best_bound, rank, iterations):
        self.best_bound = best_bound
        self.rank = rank
        self.iterations = iterations
        super().__init__(
            f"no certificate after {iterations} iterations: "
            f"best max-leverage {best_bound:.6g} vs target rank {rank}"
        )


@dataclass(frozen=True)
class DesignWeights:
    """A design distribution with its achieved Kiefer-Wolfowitz certificate.

    ``certified_bound`` is the maximum leverage of any input vector under this
    design's covariance, recomputed after pruning.  For averaged designs (see
    `mixed_design`) it is the worst component certificate.
    """

    weights: np.ndarray
    support_size: int
    certified_bound: float
    rank: int
    iterations: int = 0


def _span_basis(vectors):
    """Orthonormal basis Q (d, r) of the numerical span of the rows."""
    gram = vectors.T @ vectors
    evals, evecs = np.linalg.eigh(gram)
    cutoff = SPAN_CUTOFF * max(evals[-1], 0.0)
    keep = evals > cutoff
    if not keep.any():
        raise DesignError("all vectors are numerically zero")
    return evecs[:, keep]


def _leverages(xr, g):
    """Leverage of every row of ``xr`` under the design ``g`` (full rank in span)."""
    V = (xr * g[:, None]).T @ xr
    try:
        L = np.linalg.cholesky(V)
        y = np.linalg.solve(L, xr.T)
        return np.einsum("ij,ij->j", y, y)
    except np.linalg.LinAlgError:
        # support lost a direction to underflow; fall back to a pseudo-solve
        evals, evecs = np.linalg.eigh(V)
        cutoff = SPAN_CUTOFF * max(evals[-1], 0.0)
        inv = np.where(evals > cutoff, 1.0 / np.maximum(evals, cutoff), 0.0)
        y = evecs.T @ xr.T
        return np.einsum("ij,ij->j", y * inv[:, None], y)


def _vech_rows(xr):
    """Map each row v to the upper triangle of v v^T (moment coordinates)."""
    r = xr.shape[1]
    iu = np.triu_indices(r)
    outer = xr[:, :, None] * xr[:, None, :]
    return outer[:, iu[0], iu[1]]


def _caratheodory_reduce(xr, g, target):
    """Shrink the support to ``target`` atoms without moving V(g) or sum(g).

    Standard affine Caratheodory elimination in moment space: find a
    dependency among the support atoms' moment vectors (augmented with a
    constant coordinate to preserve total mass) and walk along it until a
    weight hits zero.
    """
    g = g.copy()
    while True:
        support = np.nonzero(g > 0)[0]
        if support.size <= target:
            break
        # more atoms than moment coordinates: an exact dependency exists
        Z = np.vstack([_vech_rows(xr[support]).T, np.ones(support.size)])
        _, _, vt = np.linalg.svd(Z)
        lam = vt[-1]
        if np.linalg.norm(Z @ lam) > 1e-8:
            break
        if not (lam > 1e-14).any():
            lam = -lam
        pos = lam > 1e-14
        if not pos.any():
            break
        ratios = g[support][pos] / lam[pos]
        t = ratios.min()
        new_w = g[support] - t * lam
        new_w[new_w < 1e-15] = 0.0
        before = support.size
        g[support] = new_w
        if np.count_nonzero(g > 0) >= before:
            break
    return g


def g_optimal_design(vectors, tol=0.01, max_iters=None):
    """Frank-Wolfe G-optimal design with a Kiefer-Wolfowitz certificate.

    Parameters
    ----------
    vectors : (n, d) array_like
        Finite design set; zero rows are tolerated (they get no weight) but
        an all-zero set is an error.
    tol : float
        Certificate slack: stop once ``max leverage <= rank * (1 + tol)``.
    max_iters : int, optional
        Defaults to ``max(10 * n * d, 2 * d / tol)``; the second term covers
        the solver's O(d/tol) convergence tail, which dominates for small n.

    Returns
    -------
    DesignWeights
        Weights over the input index set (support pruned below
        ``PRUNE_EPS`` and Caratheodory-reduced to at most
        ``rank*(rank+1)/2 + 1`` atoms), with the recomputed certificate.

    Raises
    ------
    DesignError
        Empty or all-zero input.
    DesignNotConverged
        Iteration cap reached; carries the best bound seen.
    """
    X = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    n, d = X.shape
    if n == 0:
        raise DesignError("empty vector set")
    if tol <= 0:
        raise DesignError("tol must be positive")
    Q = _span_basis(X)  # raises on all-zero input
    r = Q.shape[1]
    xr = X @ Q
    if max_iters is None:
        max_iters = max(10 * n * d, int(np.ceil(2 * d / tol)))

    # uniform over the informative rows; zero vectors carry no design value
    # and uniform dead mass on them drains only sublinearly under Frank-Wolfe
    sq = np.einsum("ij,ij->i", xr, xr)
    live = sq > (1e-12 * np.sqrt(sq.max())) ** 2
    g = np.where(live, 1.0, 0.0)
    g /= g.sum()
    best_bound = np.inf
    iterations = 0
    certified = False
    for iterations in range(max_iters + 1):
        lev = _leverages(xr, g)
        m = int(np.argmax(lev))  # first max: lowest-index tie-break
        best_bound = min(best_bound, float(lev[m]))
        if lev[m] <= r * (1.0 + tol):
            certified = True
            break
        if iterations == max_iters:
            break
        # Wolfe step for the log-det objective along (1-gamma) g + gamma e_m
        gamma = (lev[m] / r - 1.0) / (lev[m] - 1.0)
        g *= 1.0 - gamma
        g[m] += gamma
    if not certified:
        raise DesignNotConverged(best_bound, r, iterations)

    g[g <= PRUNE_EPS] = 0.0
    g = _caratheodory_reduce(xr, g, target=r * (r + 1) // 2 + 1)
    g /= g.sum()
    final_lev = _leverages(xr, g)
    return DesignWeights(
        weights=g,
        support_size=int(np.count_nonzero(g > 0)),
        certified_bound=float(final_lev.max()),
        rank=r,
        iterations=iterations,
    )


def mixed_design(per_step_designs):
    """Coordinate-wise average of designs over one shared index set."""
    designs = list(per_step_designs)
    if not designs:
        raise DesignError("no designs to mix")
    size = designs[0].weights.shape[0]
    if any(dw.weights.shape[0] != size for dw in designs):
        raise DesignError("designs are over mismatched index sets")
    weights = np.mean([dw.weights for dw in designs], axis=0)
    return DesignWeights(
        weights=weights,
        support_size=int(np.count_nonzero(weights > 0)),
        certified_bound=max(dw.certified_bound for dw in designs),
        rank=max(dw.rank for dw in designs),
    )
