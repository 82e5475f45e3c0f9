"""Finite policy classes: linear softmax nets and brute-force comparators.

The bandit layer selects among a finite set of policies, so the quality of
the best policy in that set is what ultimately bounds the regret.  This
module builds such sets as nets over the softmax parameter ball

    pi_h(a|s) ~ exp(temp * <phi(s,a), w_h>),   ||w_h||_2 <= 1 per step,

and provides the averaged-loss reduction used to identify the
best-in-hindsight comparator: against any fixed policy set, the argmin of the
summed episode values equals the argmin under the episode-averaged loss
vectors, because occupancy measures do not depend on the losses.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .core import MdpError, Policy, exact_visitation

# Cap for exhaustive deterministic-policy enumeration.
_ENUM_LIMIT = 200_000


@dataclass(frozen=True)
class SoftmaxPolicy:
    """Linear softmax policy parameters: one d-vector per step, unit ball each."""

    params: np.ndarray  # (H, d), ||params[h]||_2 <= 1
    temperature: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.params, dtype=np.float64)
        if w.ndim != 2:
            raise MdpError("softmax params must have shape (H, d)")
        if self.temperature <= 0:
            raise MdpError("temperature must be positive")
        norms = np.linalg.norm(w, axis=1)
        if norms.max(initial=0.0) > 1.0 + 1e-9:
            raise MdpError("softmax parameters must lie in the per-step unit ball")
        object.__setattr__(self, "params", w)


@dataclass(frozen=True)
class PolicyCover:
    """A finite policy set with the metadata needed to reproduce it exactly."""

    policies: tuple
    eps_prime: float
    mode: str
    seed: int
    budget: int
    temperature: float
    complete: bool = True  # False when the budget truncated the net

    def __len__(self):
        return len(self.policies)


def default_temperature(d, H, num_episodes=None):
    """Problem-size-scaled softmax temperature, ``2 sqrt(d K) H``."""
    K = 1 if num_episodes is None else max(int(num_episodes), 1)
    return 2.0 * np.sqrt(d * K) * H


def _ball_lattice(d, spacing):
    """Lattice points of the unit ball at the given spacing, projected inward.

    Points within ``spacing * sqrt(d) / 2`` outside the ball are kept and
    projected back onto it, so every ball point stays within half a cell
    diagonal of the emitted net (projection is nonexpansive).
    """
    radius = 1.0 + spacing * np.sqrt(d) / 2.0
    kmax = int(np.floor(radius / spacing))
    if (2 * kmax + 1) ** d > 4_000_000:
        raise MdpError(
            f"grid net over {(2 * kmax + 1) ** d} lattice candidates is too "
            "large; use mode='random' or a coarser eps_prime")
    axes = [np.arange(-kmax, kmax + 1)] * d
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d) * spacing
    norms = np.linalg.norm(grid, axis=1)
    grid = grid[norms <= radius]
    norms = np.linalg.norm(grid, axis=1)
    over = norms > 1.0
    grid[over] /= norms[over, None]
    # dedupe points that projected onto the same boundary point
    keys = np.round(grid, 12)
    _, idx = np.unique(keys, axis=0, return_index=True)
    grid = grid[np.sort(idx)]
    # deterministic order: origin first, then by norm, then lexicographic
    order = np.lexsort(tuple(grid[:, j] for j in reversed(range(d))) + (np.linalg.norm(grid, axis=1),))
    return grid[order]


def build_cover(d, H, eps_prime, budget, mode="grid", seed=0, temperature=None,
                num_episodes=None):
    """Construct a finite softmax policy cover of the parameter ball.

    Parameters
    ----------
    eps_prime : float in (0, 1]
        Target net resolution in the summed per-step norm
        ``sum_h ||w_h - w*_h||_2``.
    budget : int >= 1
        Maximum number of policies; the zero-parameter (uniform) policy is
        always included and always first.
    mode : {"grid", "random"}
        ``grid`` is a deterministic lattice net at spacing
        ``2 * eps_prime / (sqrt(d) * H)``; ``random`` draws i.i.d. points
        uniformly from the per-step unit balls.
    temperature : float, optional
        Softmax temperature shared by all policies in the cover; defaults to
        `default_temperature`.
    """
    if not 0.0 < eps_prime <= 1.0:
        raise MdpError("eps_prime must be in (0, 1]")
    if budget < 1:
        raise MdpError("budget must be >= 1")
    if temperature is None:
        temperature = default_temperature(d, H, num_episodes)
    rng = np.random.default_rng(seed)

    params_list = [np.zeros((H, d))]
    complete = True
    if mode == "grid":
        spacing = 2.0 * eps_prime / (np.sqrt(d) * H)
        lattice = _ball_lattice(d, spacing)
        # origin is in the lattice; skip it (already added) in the product
        total = len(lattice) ** H
        for combo in itertools.product(range(len(lattice)), repeat=H):
            if len(params_list) >= budget:
                complete = len(params_list) >= total
                break
            if all(c == 0 for c in combo):
                continue
            params_list.append(np.stack([lattice[c] for c in combo]))
        else:
            complete = True
    elif mode == "random":
        for _ in range(budget - 1):
            x = rng.normal(size=(H, d))
            x /= np.linalg.norm(x, axis=1, keepdims=True)
            radii = rng.random(H) ** (1.0 / d)
            params_list.append(x * radii[:, None])
        complete = False  # a random net carries no covering certificate
    else:
        raise MdpError(f"unknown cover mode {mode!r}")

    policies = tuple(SoftmaxPolicy(w, temperature) for w in params_list)
    return PolicyCover(policies, eps_prime, mode, seed, budget, temperature, complete)


def softmax_to_tabular(mdp, softmax_policy):
    """Materialize the action tables of a softmax policy on a concrete MDP."""
    logits = softmax_policy.temperature * np.einsum(
        "sad,hd->hsa", mdp.features, softmax_policy.params
    )
    logits -= logits.max(axis=2, keepdims=True)
    tables = np.exp(logits)
    tables /= tables.sum(axis=2, keepdims=True)
    return Policy(tables, kind="softmax")


def materialize_cover(mdp, cover):
    """Tabular form of every policy in a cover (softmax entries get expanded)."""
    out = []
    for pol in cover.policies:
        if isinstance(pol, SoftmaxPolicy):
            out.append(softmax_to_tabular(mdp, pol))
        else:
            out.append(pol)
    return out


def average_loss(losses):
    """Episode-averaged loss vectors, one per step: ``(1/K) sum_k theta[k]``."""
    if losses.num_episodes < 1:
        raise MdpError("need at least one episode")
    return losses.theta.mean(axis=0)


def best_policy_brute_force(mdp, losses, policy_set):
    """Exact argmin of the summed episode values over a finite policy set.

    Returns ``(index, total_value)``; ties break to the lowest index.
    """
    policy_set = list(policy_set)
    if not policy_set:
        raise MdpError("empty policy set")
    totals = np.empty(len(policy_set))
    for i, pol in enumerate(policy_set):
        phi = exact_visitation(mdp, pol).phi
        totals[i] = np.einsum("hd,khd->", phi, losses.theta)
    best = int(np.argmin(totals))
    return best, float(totals[best])


def enumerate_deterministic_policies(S, A, H, limit=_ENUM_LIMIT):
    """Every deterministic policy (one action per (h, s)), lexicographic order."""
    count = A ** (S * H)
    if count > limit:
        raise MdpError(f"{count} deterministic policies exceeds limit {limit}")
    eye = np.eye(A)
    out = []
    for assignment in itertools.product(range(A), repeat=H * S):
        tables = eye[np.asarray(assignment).reshape(H, S)]
        out.append(Policy(tables))
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def cover_to_dict(cover):
    pols = []
    for pol in cover.policies:
        if isinstance(pol, SoftmaxPolicy):
            pols.append({
                "kind": "softmax",
                "params": pol.params.reshape(-1).tolist(),
                "shape": list(pol.params.shape),
                "temperature": pol.temperature,
            })
        else:
            pols.append({
                "kind": pol.kind,
                "tables": pol.tables.reshape(-1).tolist(),
                "shape": list(pol.tables.shape),
            })
    return {
        "type": "policy_cover",
        "eps_prime": cover.eps_prime,
        "mode": cover.mode,
        "seed": cover.seed,
        "budget": cover.budget,
        "temperature": cover.temperature,
        "complete": cover.complete,
        "policies": pols,
    }


def cover_from_dict(data):
    if data.get("type") != "policy_cover":
        raise MdpError("not a policy_cover document")
    pols = []
    for rec in data["policies"]:
        if rec["kind"] == "softmax":
            params = np.asarray(rec["params"], dtype=np.float64).reshape(rec["shape"])
            pols.append(SoftmaxPolicy(params, rec["temperature"]))
        else:
            tables = np.asarray(rec["tables"], dtype=np.float64).reshape(rec["shape"])
            pols.append(Policy(tables, kind=rec["kind"]))
    return PolicyCover(
        tuple(pols), data["eps_prime"], data["mode"], data["seed"],
        data["budget"], data["temperature"], data["complete"],
    )


def save_cover(cover, path):
    with open(path, "w") as fh:
        json.dump(cover_to_dict(cover), fh)
        fh.write("\n")


def load_cover(path):
    with open(path) as fh:
        return cover_from_dict(json.load(fh))
