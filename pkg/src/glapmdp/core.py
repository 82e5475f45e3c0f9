"""Linear adversarial MDP model, episode simulation, and exact oracles.

The environment is an episodic MDP whose transition kernel and per-episode
losses factor through a known feature map: ``P_h(s'|s,a) = <phi(s,a), mu_h(s')>``
and ``loss_kh(s,a) = <phi(s,a), theta_kh>``.  Everything here is dense and
small-scale on purpose: the exact dynamic-programming routines
(`exact_visitation`, `exact_value`, `policy_covariance`) are the ground-truth
oracles that the estimation and bandit layers are tested against.

Conventions
-----------
* ``features`` is an ``(S, A, d)`` array, ``features[s, a]`` is phi(s, a).
* ``measures`` is an ``(H, d, S)`` array, column ``measures[h][:, s']`` is the
  measure density at the successor state s'.
* Policies are step-indexed row-stochastic tables of shape ``(H, S, A)``.
* Steps are 0-indexed internally (step ``h`` in math is index ``h-1``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

# Absolute tolerance for stochasticity checks; double-precision forward DP
# over short horizons stays well inside this.
STOCHASTIC_ATOL = 1e-9

# Retries for the random-instance sampler before giving up.
_SAMPLER_RETRIES = 100


class MdpError(ValueError):
    """Raised for structurally invalid constructions or bad parameters."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearMDP:
    """A finite linear MDP: transitions factor through a known feature map.

    Parameters
    ----------
    num_states, num_actions, horizon, feature_dim : int
        Problem dimensions (S, A, H, d).
    features : (S, A, d) array
        Known feature map, ``||features[s, a]||_2 <= 1``.
    measures : (H, d, S) array
        Per-step transition measures; ``P_h(s'|s,a) = features[s,a] @ measures[h][:, s']``.
    initial_state : int or (S,) array
        Deterministic start state, or a distribution over states.
    """

    num_states: int
    num_actions: int
    horizon: int
    feature_dim: int
    features: np.ndarray
    measures: np.ndarray
    initial_state: object = 0

    def __post_init__(self):
        S, A, H, d = self.num_states, self.num_actions, self.horizon, self.feature_dim
        feats = np.asarray(self.features, dtype=np.float64)
        meas = np.asarray(self.measures, dtype=np.float64)
        if feats.shape != (S, A, d):
            raise MdpError(f"features shape {feats.shape} != {(S, A, d)}")
        if meas.shape != (H, d, S):
            raise MdpError(f"measures shape {meas.shape} != {(H, d, S)}")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "measures", meas)

    def initial_distribution(self):
        """Start-state distribution as an (S,) array."""
        if np.isscalar(self.initial_state) or isinstance(self.initial_state, (int, np.integer)):
            rho = np.zeros(self.num_states)
            rho[int(self.initial_state)] = 1.0
            return rho
        rho = np.asarray(self.initial_state, dtype=np.float64)
        if rho.shape != (self.num_states,):
            raise MdpError("initial_state distribution has wrong shape")
        return rho

    @cached_property
    def transitions(self):
        """Dense kernel, shape (H, S, A, S): transitions[h][s, a, s']."""
        return np.einsum("sad,hdt->hsat", self.features, self.measures)

    @cached_property
    def _transition_cumsum(self):
        return np.cumsum(np.clip(self.transitions, 0.0, None), axis=3)


@dataclass(frozen=True)
class LossSequence:
    """Adversarial loss vectors theta[k, h] for K episodes of H steps.

    ``scale`` records the factor the raw vectors were divided by so that all
    realized losses lie in [-1, 1] (1.0 when no rescaling was needed).
    """

    theta: np.ndarray  # (K, H, d)
    scale: float = 1.0

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64)
        if th.ndim != 3:
            raise MdpError("theta must have shape (K, H, d)")
        object.__setattr__(self, "theta", th)

    @property
    def num_episodes(self):
        return self.theta.shape[0]

    @property
    def horizon(self):
        return self.theta.shape[1]


@dataclass(frozen=True)
class Policy:
    """Step-indexed stochastic policy, ``tables[h][s, a] = pi_h(a|s)``."""

    tables: np.ndarray  # (H, S, A), rows sum to 1
    kind: str = "tabular"  # "tabular", or "softmax" for materialized softmax policies

    def __post_init__(self):
        tab = np.asarray(self.tables, dtype=np.float64)
        if tab.ndim != 3:
            raise MdpError("policy tables must have shape (H, S, A)")
        rows = tab.sum(axis=2)
        if not np.allclose(rows, 1.0, atol=1e-12, rtol=0.0):
            raise MdpError("policy rows must sum to 1 within 1e-12")
        if tab.min() < 0:
            raise MdpError("policy probabilities must be nonnegative")
        object.__setattr__(self, "tables", tab)


@dataclass(frozen=True)
class Trajectory:
    """One bandit-feedback episode: (state, action, observed loss) per step."""

    states: np.ndarray  # (H,)
    actions: np.ndarray  # (H,)
    losses: np.ndarray  # (H,)
    episode: int = 0

    @property
    def steps(self):
        return list(zip(self.states.tolist(), self.actions.tolist(), self.losses.tolist()))

    @property
    def total_loss(self):
        return float(self.losses.sum())


@dataclass(frozen=True)
class VisitationProfile:
    """Exact per-step feature visitations and state-action occupancies."""

    phi: np.ndarray  # (H, d), phi[h] = E_pi[phi(s_h, a_h)]
    occupancy: np.ndarray  # (H, S, A)


@dataclass(frozen=True)
class Violation:
    code: str
    where: tuple
    value: float

    def __str__(self):
        return f"{self.code} at {self.where}: {self.value!r}"


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def add(self, code, where, value):
        self.violations.append(Violation(code, tuple(where), float(value)))

    def __str__(self):
        if self.ok:
            return "valid"
        return "\n".join(str(v) for v in self.violations)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate_mdp(mdp):
    """Check every structural invariant of a LinearMDP; report, never raise.

    Flags feature norms above 1, measure total-mass norms above sqrt(d),
    negative implied transition probabilities, and rows that do not sum to 1.

    Returns
    -------
    ValidationReport
        Empty (``report.ok``) iff the instance is valid.
    """
    report = ValidationReport()
    S, A, H = mdp.num_states, mdp.num_actions, mdp.horizon
    d = mdp.feature_dim

    norms = np.linalg.norm(mdp.features, axis=2)
    for s, a in zip(*np.nonzero(norms > 1.0 + STOCHASTIC_ATOL)):
        report.add("feature_norm", (s, a), norms[s, a])

    for h in range(H):
        mass = np.linalg.norm(mdp.measures[h].sum(axis=1))
        if mass > np.sqrt(d) + STOCHASTIC_ATOL:
            report.add("measure_mass_norm", (h,), mass)

    P = mdp.transitions
    for h, s, a, t in zip(*np.nonzero(P < -STOCHASTIC_ATOL)):
        report.add("negative_transition", (h, s, a, t), P[h, s, a, t])
    rows = P.sum(axis=3)
    for h, s, a in zip(*np.nonzero(np.abs(rows - 1.0) > STOCHASTIC_ATOL)):
        report.add("row_sum", (h, s, a), rows[h, s, a])

    rho0 = mdp.initial_distribution()
    if rho0.min() < -STOCHASTIC_ATOL or abs(rho0.sum() - 1.0) > STOCHASTIC_ATOL:
        report.add("initial_distribution", (), rho0.sum())
    return report


def reachable_states(mdp):
    """Boolean (H, S) mask of states visitable at each step under any policy."""
    H = mdp.horizon
    reach = np.zeros((H, mdp.num_states), dtype=bool)
    reach[0] = mdp.initial_distribution() > 0
    for h in range(H - 1):
        if reach[h].any():
            # s' reachable if some reachable (s, a) transitions to it
            reach[h + 1] = mdp.transitions[h][reach[h]].sum(axis=(0, 1)) > 1e-12
    return reach


def validate_losses(losses, mdp=None):
    """Check loss-vector norm bounds and, given an MDP, the realized-loss range."""
    report = ValidationReport()
    d = losses.theta.shape[2]
    norms = np.linalg.norm(losses.theta, axis=2)
    for k, h in zip(*np.nonzero(norms > np.sqrt(d) + STOCHASTIC_ATOL)):
        report.add("theta_norm", (k, h), norms[k, h])
    if mdp is not None:
        reach = reachable_states(mdp)
        # max |<phi(s,a), theta_kh>| over reachable states at each step
        inner = np.einsum("sad,khd->khsa", mdp.features, losses.theta)
        for h in range(losses.horizon):
            bad = np.abs(inner[:, h][:, reach[h], :]) > 1.0 + STOCHASTIC_ATOL
            for k in np.nonzero(bad.any(axis=(1, 2)))[0]:
                report.add("loss_range", (int(k), h), np.abs(inner[int(k), h]).max())
    return report


def make_loss_sequence(theta, mdp=None):
    """Build a LossSequence, rescaling so every realized loss is in [-1, 1].

    A single global factor is applied (preserving the adversary's shape): the
    larger of the worst reachable |<phi, theta>| and the worst
    ``||theta||_2 / sqrt(d)`` ratio.  The factor is recorded in ``scale``.
    """
    th = np.asarray(theta, dtype=np.float64)
    if th.ndim != 3:
        raise MdpError("theta must have shape (K, H, d)")
    d = th.shape[2]
    scale = max(1.0, float(np.linalg.norm(th, axis=2).max(initial=0.0)) / np.sqrt(d))
    if mdp is not None:
        reach = reachable_states(mdp)
        inner = np.einsum("sad,khd->khsa", mdp.features, th)
        worst = 0.0
        for h in range(th.shape[1]):
            if reach[h].any():
                worst = max(worst, float(np.abs(inner[:, h][:, reach[h], :]).max(initial=0.0)))
        scale = max(scale, worst)
    return LossSequence(theta=th / scale, scale=scale)


# ---------------------------------------------------------------------------
# instance constructors
# ---------------------------------------------------------------------------


def make_tabular_mdp(transitions, initial_state=0):
    """Embed a dense tabular MDP as a linear MDP with one-hot features.

    ``phi(s, a) = e_(s*A+a)`` in dimension d = S*A, and ``mu_h`` rows are the
    transition probabilities, so every bound holds exactly:
    ``||phi|| = 1`` and ``||mu_h(S)||_2 = sqrt(S*A) = sqrt(d)``.

    Parameters
    ----------
    transitions : (H, S, A, S) array
        Row-stochastic kernel P_h(s'|s,a).
    initial_state : int or (S,) array
    """
    P = np.asarray(transitions, dtype=np.float64)
    H, S, A, S2 = P.shape
    if S != S2:
        raise MdpError("transitions must have shape (H, S, A, S)")
    d = S * A
    features = np.eye(d).reshape(S, A, d)
    measures = P.reshape(H, d, S).copy()
    return LinearMDP(S, A, H, d, features, measures, initial_state)


def make_random_tabular_mdp(S, A, H, seed, initial_state=0, concentration=1.0):
    """Random full-support tabular instance in the one-hot embedding (d = S*A)."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(S, concentration), size=(H, S, A))
    return make_tabular_mdp(P, initial_state)


def make_random_mdp(S, A, H, d, seed, initial_state=0):
    """Sample a valid random linear MDP with exactly rank-d structure.

    Construction: sample a shared low-rank factorization of row-stochastic
    kernels.  Mixing weights c(s,a) on the d-simplex are the features
    (``||c||_2 <= ||c||_1 = 1``) and d per-step component distributions over
    states are the measure rows (total mass ``||mu_h(S)||_2 = sqrt(d)``), so
    ``P_h = c @ q_h`` is stochastic by construction and the realizability is
    exact rather than approximate.  Retries draws until the feature matrix has
    full column rank.

    Raises
    ------
    MdpError
        If d > S*A, or no full-rank draw is found within the retry budget.
    """
    if S < 1 or A < 1 or H < 1:
        raise MdpError("S, A, H must be >= 1")
    if d > S * A:
        raise MdpError(f"feature dimension d={d} exceeds S*A={S * A}")
    if d < 1:
        raise MdpError("d must be >= 1")
    rng = np.random.default_rng(seed)
    for _ in range(_SAMPLER_RETRIES):
        weights = rng.dirichlet(np.full(d, 0.5), size=S * A) if d > 1 \
            else np.ones((S * A, 1))
        components = rng.dirichlet(np.ones(S), size=(H, d))  # (H, d, S)
        if np.linalg.matrix_rank(weights, tol=1e-10) < d:
            continue
        features = weights.reshape(S, A, d)
        mdp = LinearMDP(S, A, H, d, features, components, initial_state)
        if validate_mdp(mdp).ok:
            return mdp
    raise MdpError(f"no valid rank-{d} instance found in {_SAMPLER_RETRIES} draws")


def uniform_policy(S, A, H):
    """The uniform-random policy."""
    return Policy(np.full((H, S, A), 1.0 / A))


def random_policy(S, A, H, rng, concentration=1.0):
    """Random row-stochastic policy with Dirichlet rows."""
    return Policy(rng.dirichlet(np.full(A, concentration), size=(H, S)))


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def _inverse_cdf(cum_rows, u):
    """Vectorized categorical sampling: first index where cumsum >= u."""
    idx = (cum_rows < u[:, None]).sum(axis=1)
    return np.minimum(idx, cum_rows.shape[1] - 1)


def simulate_episode_cum(mdp, pol_cum, theta_k, rng, episode=0):
    """Fast episode path taking a precomputed per-step action-cdf table."""
    H = mdp.horizon
    states = np.empty(H, dtype=np.int64)
    actions = np.empty(H, dtype=np.int64)
    losses = np.empty(H)
    rho_cum = np.cumsum(mdp.initial_distribution())
    s = int(np.searchsorted(rho_cum, rng.random(), side="right"))
    s = min(s, mdp.num_states - 1)
    cum_t = mdp._transition_cumsum
    A = mdp.num_actions
    for h in range(H):
        states[h] = s
        a = min(int(np.searchsorted(pol_cum[h, s], rng.random(), side="right")), A - 1)
        actions[h] = a
        losses[h] = mdp.features[s, a] @ theta_k[h]
        if h + 1 < H:
            s = min(int(np.searchsorted(cum_t[h, s, a], rng.random(), side="right")),
                    mdp.num_states - 1)
    return Trajectory(states, actions, losses, episode)


def simulate_episode(mdp, policy, theta_k, rng, episode=0):
    """Roll one bandit-feedback episode.

    ``s_1`` is drawn from the initial distribution, ``a_h ~ pi_h(.|s_h)``,
    the observed loss is exactly ``<phi(s_h, a_h), theta_k[h]>`` (the only
    randomness is in transitions and action draws), and
    ``s_{h+1} ~ P_h(.|s_h, a_h)``.

    Parameters
    ----------
    theta_k : (H, d) array
        The adversary's loss vectors for this episode.
    """
    return simulate_episode_cum(mdp, np.cumsum(policy.tables, axis=2), theta_k, rng, episode)


def rollout_batch(mdp, tables, n, rng, steps=None):
    """Simulate ``n`` independent episodes of one policy, vectorized.

    Returns ``(states, actions)`` with shapes ``(n, steps+1)`` and
    ``(n, steps)``; the extra state column is the successor of the final
    simulated step (needed for transition-model regression).  ``steps``
    defaults to the full horizon H.
    """
    H = mdp.horizon
    steps = H if steps is None else min(steps, H)
    S = mdp.num_states
    states = np.empty((n, steps + 1), dtype=np.int64)
    actions = np.empty((n, steps), dtype=np.int64)
    rho_cum = np.cumsum(mdp.initial_distribution())
    states[:, 0] = _inverse_cdf(np.broadcast_to(rho_cum, (n, S)), rng.random(n))
    cum_t = mdp._transition_cumsum
    for h in range(steps):
        pol_cum = np.cumsum(tables[h], axis=1)
        actions[:, h] = _inverse_cdf(pol_cum[states[:, h]], rng.random(n))
        states[:, h + 1] = _inverse_cdf(cum_t[h, states[:, h], actions[:, h]], rng.random(n))
    return states, actions


class Simulator:
    """Trajectory oracle around a LinearMDP; counts the episodes it serves."""

    def __init__(self, mdp):
        self.mdp = mdp
        self.episodes_served = 0

    def episode(self, policy, theta_k, rng, episode=0):
        self.episodes_served += 1
        return simulate_episode(self.mdp, policy, theta_k, rng, episode)

    def episode_cum(self, pol_cum, theta_k, rng, episode=0):
        self.episodes_served += 1
        return simulate_episode_cum(self.mdp, pol_cum, theta_k, rng, episode)

    def rollouts(self, tables, n, rng, steps=None):
        self.episodes_served += n
        return rollout_batch(self.mdp, tables, n, rng, steps)


# ---------------------------------------------------------------------------
# exact oracles
# ---------------------------------------------------------------------------


def exact_visitation(mdp, policy):
    """Exact per-step occupancies and feature visitations by forward DP.

    ``rho_1`` is the initial distribution; ``occ_h(s,a) = rho_h(s) pi_h(a|s)``;
    ``rho_{h+1}(s') = sum_{s,a} occ_h(s,a) P_h(s'|s,a)``; the visitation vector
    is ``phi_h = sum_{s,a} occ_h(s,a) phi(s,a)``.
    """
    H, S, A = mdp.horizon, mdp.num_states, mdp.num_actions
    occ = np.empty((H, S, A))
    phi = np.empty((H, mdp.feature_dim))
    rho = mdp.initial_distribution()
    for h in range(H):
        occ[h] = rho[:, None] * policy.tables[h]
        phi[h] = np.einsum("sa,sad->d", occ[h], mdp.features)
        if h + 1 < H:
            rho = np.einsum("sa,sat->t", occ[h], mdp.transitions[h])
    return VisitationProfile(phi, occ)


def exact_value(mdp, policy, losses, k):
    """Exact expected episode loss sum_h <phi_pi_h, theta_kh> for episode k."""
    if not 0 <= k < losses.num_episodes:
        raise MdpError(f"episode index {k} out of range")
    prof = exact_visitation(mdp, policy)
    return float(np.einsum("hd,hd->", prof.phi, losses.theta[k]))


def policy_covariance(mdp, policy, h):
    """Exact step-h feature second moment E_pi[phi phi^T], a (d, d) PSD matrix."""
    occ = exact_visitation(mdp, policy).occupancy[h]
    return np.einsum("sa,sad,sae->de", occ, mdp.features, mdp.features)


def exploratory_lambda(mdp, policies):
    """Certified lower bound for the exploratory constant on a policy set.

    Returns ``min_h max_pi lambda_min(Lambda_pi_h)`` over the supplied
    policies; positive values certify that every feature direction is
    visitable at every step (restricted to this set).
    """
    policies = list(policies)
    if not policies:
        raise MdpError("need at least one policy")
    best = np.full(mdp.horizon, -np.inf)
    for pol in policies:
        prof = exact_visitation(mdp, pol)
        for h in range(mdp.horizon):
            cov = np.einsum("sa,sad,sae->de", prof.occupancy[h], mdp.features, mdp.features)
            best[h] = max(best[h], float(np.linalg.eigvalsh(cov)[0]))
    return float(best.min())


# ---------------------------------------------------------------------------
# serialization (structured text, bit-exact round trip)
# ---------------------------------------------------------------------------


def mdp_to_dict(mdp):
    init = mdp.initial_state
    if not (np.isscalar(init) or isinstance(init, (int, np.integer))):
        init = np.asarray(init, dtype=np.float64).tolist()
    else:
        init = int(init)
    return {
        "type": "linear_mdp",
        "S": mdp.num_states,
        "A": mdp.num_actions,
        "H": mdp.horizon,
        "d": mdp.feature_dim,
        "features": mdp.features.reshape(-1).tolist(),
        "measures": mdp.measures.reshape(-1).tolist(),
        "initial_state": init,
    }


def mdp_from_dict(data):
    if data.get("type") != "linear_mdp":
        raise MdpError("not a linear_mdp document")
    S, A, H, d = data["S"], data["A"], data["H"], data["d"]
    init = data["initial_state"]
    if isinstance(init, list):
        init = np.asarray(init, dtype=np.float64)
    return LinearMDP(
        S, A, H, d,
        np.asarray(data["features"], dtype=np.float64).reshape(S, A, d),
        np.asarray(data["measures"], dtype=np.float64).reshape(H, d, S),
        init,
    )


def losses_to_dict(losses):
    K, H, d = losses.theta.shape
    return {
        "type": "loss_sequence",
        "K": K,
        "H": H,
        "d": d,
        "scale": losses.scale,
        "theta": losses.theta.reshape(-1).tolist(),
    }


def losses_from_dict(data):
    if data.get("type") != "loss_sequence":
        raise MdpError("not a loss_sequence document")
    theta = np.asarray(data["theta"], dtype=np.float64).reshape(data["K"], data["H"], data["d"])
    return LossSequence(theta=theta, scale=float(data["scale"]))


def save_json(obj_dict, path):
    with open(path, "w") as fh:
        json.dump(obj_dict, fh)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def save_mdp(mdp, path):
    save_json(mdp_to_dict(mdp), path)


def load_mdp(path):
    return mdp_from_dict(load_json(path))


def save_losses(losses, path):
    save_json(losses_to_dict(losses), path)


def load_losses(path):
    return losses_from_dict(load_json(path))
