"""Exponential-weights policy selection over a cover, with design mixing.

Each episode the learner samples a policy from

    p_k(pi) = (1 - gamma) w_k(pi) / W_k + gamma g(pi),

where ``g`` is the step-averaged G-optimal design over the estimated feature
visitations.  After observing the chosen policy's per-step scalar losses it
forms ridge one-sample loss-vector estimates

    theta_hat[h] = Sigma_h^{-1} phi_hat[pi_k, h] * loss_h,
    Sigma_h      = sum_pi p_k(pi) phi_hat[pi, h] phi_hat[pi, h]^T,

scores every policy optimistically (estimated value minus a leverage bonus),
and applies a multiplicative-weights update.  Weights live in log space; the
design mixing floor ``p >= gamma * g`` keeps every Sigma_h invertible and
every leverage below ``d H / gamma``, which the update asserts each episode.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import MdpError, simulate_episode_cum
from .featureest import FeatureTable
from .optdesign import g_optimal_design, mixed_design

logger = logging.getLogger(__name__)

# Slack for runtime inequality checks.
CHECK_SLACK = 1e-8


class GlapInvariantError(AssertionError):
    """A per-episode magnitude or mixture invariant failed at runtime."""


class GlapSingularError(np.linalg.LinAlgError):
    """Sigma_h not positive definite even after the jitter guard."""


@dataclass(frozen=True)
class GlapConfig:
    """Run parameters; the learning rate is pinned to gamma / (d H^2)."""

    gamma: float
    delta: float
    K: int
    d: int
    H: int
    bonus_log_pi: bool = False  # use log(|Pi|/delta) in the bonus instead of log(1/delta)
    check_invariants: bool = True
    design_tol: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.gamma <= 0.5:
            raise MdpError("gamma must be in (0, 1/2]")
        if not 0.0 < self.delta < 1.0:
            raise MdpError("delta must be in (0, 1)")
        if self.K < 0:
            raise MdpError("K must be nonnegative")

    @property
    def eta(self):
        return self.gamma / (self.d * self.H ** 2)

    def min_episodes_for_bounded_update(self, n_policies):
        """Episode count above which |eta * V_tilde| <= 1 is guaranteed."""
        return 4.0 * self.d * self.H * np.log(n_policies / self.delta)

    def bonus_scale(self, n_policies):
        log_arg = n_policies / self.delta if self.bonus_log_pi else 1.0 / self.delta
        return 2.0 * np.sqrt(self.H * np.log(log_arg) / (self.d * max(self.K, 1)))


@dataclass
class HedgeState:
    """Mutable per-run state of the hedge."""

    phi: np.ndarray  # (n, H, d) feature visitation table
    log_w: np.ndarray  # (n,) log exploitation weights
    g: np.ndarray  # (n,) mixed exploration design
    g_per_step: np.ndarray  # (H, n)
    p: np.ndarray  # (n,) sampling distribution
    sigma: np.ndarray  # (H, d, d)
    chol: np.ndarray  # (H, d, d)
    config: GlapConfig
    episode: int = 0
    update_compliant: bool = field(default=False)  # K large enough for |eta V~| <= 1
    jitter_events: int = 0
    sigma_jittered: bool = False  # last factorization needed the jitter guard

    @property
    def n_policies(self):
        return self.phi.shape[0]

    def exploitation_weights(self):
        q = np.exp(self.log_w - self.log_w.max())
        return q / q.sum()

    def copy(self):
        return HedgeState(
            phi=self.phi, log_w=self.log_w.copy(), g=self.g,
            g_per_step=self.g_per_step, p=self.p.copy(),
            sigma=self.sigma.copy(), chol=self.chol.copy(),
            config=self.config, episode=self.episode,
            update_compliant=self.update_compliant,
            jitter_events=self.jitter_events,
        )


def _as_phi_array(table):
    if isinstance(table, FeatureTable):
        return table.phi
    phi = np.asarray(table, dtype=np.float64)
    if phi.ndim != 3:
        raise MdpError("feature table must have shape (n_policies, H, d)")
    return phi


def sigma_matrices(phi, p):
    """Per-step second moments sum_pi p(pi) phi phi^T, shape (H, d, d)."""
    return np.einsum("n,nhd,nhe->hde", p, phi, phi)


def _cholesky_with_jitter(sigma, state=None):
    """Batched Cholesky with a logged jitter fallback for near-singular steps."""
    try:
        chol = np.linalg.cholesky(sigma)
        if state is not None:
            state.sigma_jittered = False
        return chol
    except np.linalg.LinAlgError:
        pass
    d = sigma.shape[-1]
    jitter = 1e-12 * np.trace(sigma, axis1=1, axis2=2) / d
    bumped = sigma + jitter[:, None, None] * np.eye(d)
    if state is not None:
        state.jitter_events += 1
        state.sigma_jittered = True
    logger.warning("sigma cholesky needed jitter (%.3g max)", jitter.max())
    try:
        return np.linalg.cholesky(bumped)
    except np.linalg.LinAlgError as exc:
        raise GlapSingularError("sigma singular beyond jitter guard") from exc


def _mixture_probabilities(log_w, gamma, g):
    q = np.exp(log_w - log_w.max())
    q /= q.sum()
    p = (1.0 - gamma) * q + gamma * g
    return p / p.sum()


def glap_init(table, config):
    """Set up weights, exploration design, probabilities, and second moments.

    Solves one G-optimal design per step over that step's estimated
    visitations, averages them, and mixes with the (initially uniform)
    exploitation weights.
    """
    phi = _as_phi_array(table)
    n, H, d = phi.shape
    if H != config.H or d != config.d:
        raise MdpError(f"table dims {(H, d)} do not match config {(config.H, config.d)}")
    designs = [g_optimal_design(phi[:, h, :], tol=config.design_tol) for h in range(H)]
    g_per_step = np.stack([dw.weights for dw in designs])
    g = mixed_design(designs).weights

    min_k = config.min_episodes_for_bounded_update(n)
    compliant = config.K >= min_k
    if not compliant:
        warnings.warn(
            f"K={config.K} below {min_k:.0f}; the bounded-update guarantee "
            "|eta V~| <= 1 is not in force", RuntimeWarning, stacklevel=2,
        )

    log_w = np.zeros(n)
    p = _mixture_probabilities(log_w, config.gamma, g)
    sigma = sigma_matrices(phi, p)
    state = HedgeState(
        phi=phi, log_w=log_w, g=g, g_per_step=g_per_step, p=p,
        sigma=sigma, chol=np.empty_like(sigma), config=config,
        update_compliant=compliant,
    )
    state.chol = _cholesky_with_jitter(sigma, state)
    return state


def sample_policy(state, rng):
    """Draw a policy index from the current mixture distribution."""
    cum = np.cumsum(state.p)
    idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return min(idx, state.n_policies - 1)


def leverage_scores(state):
    """||phi_hat[pi, h]||^2 under Sigma_h^{-1} for every (pi, h), shape (n, H)."""
    y = np.linalg.solve(state.chol, state.phi.transpose(1, 2, 0))  # (H, d, n)
    return np.einsum("hdn,hdn->nh", y, y)


def conditional_mean_estimates(state, h, theta_h, true_phi):
    """Closed-form conditional expectation of each policy's loss estimate.

    Averages the one-sample estimator over the policy draw analytically:
    ``E[l_hat^pi_h] = phi_hat_pi^T Sigma_h^{-1} (sum_pi' p(pi') phi_hat_pi'
    phi_pi'^T) theta_h`` where ``true_phi`` supplies the exact visitations
    that generate the observed losses.  With an exact table this collapses to
    ``<phi_pi, theta_h>`` identically.
    """
    mixed = np.einsum("n,nd,ne->de", state.p, state.phi[:, h, :], true_phi[:, h, :])
    rhs = mixed @ theta_h
    L = state.chol[h]
    x = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    return state.phi[:, h, :] @ x


def _check_update(state, ell_hat, lev, v_tilde):
    cfg = state.config
    # solve accuracy degrades with cond(Sigma); the identities hold exactly in
    # exact arithmetic, so scale the slack by a cheap condition estimate
    diags = np.diagonal(state.chol, axis1=1, axis2=2)
    kappa = float((diags.max(axis=1) / diags.min(axis=1)).max()) ** 2
    slack = max(CHECK_SLACK, kappa * 1e-13)
    bound = cfg.d * cfg.H / cfg.gamma
    if lev.max() > bound * (1.0 + slack) + slack:
        raise GlapInvariantError(
            f"leverage {lev.max():.6g} exceeds dH/gamma={bound:.6g}")
    if np.abs(ell_hat).max() > bound * (1.0 + slack) + slack:
        raise GlapInvariantError(
            f"|loss estimate| {np.abs(ell_hat).max():.6g} exceeds dH/gamma")
    mix = state.p @ lev  # (H,) second-moment traces
    if state.sigma_jittered:
        # rank-deficient steps: the identity holds with the numerical rank
        evals = np.linalg.eigvalsh(state.sigma)
        expected = (evals > 1e-10 * evals[:, -1:]).sum(axis=1).astype(float)
    else:
        expected = float(cfg.d)
    if np.abs(mix - expected).max() > slack:
        raise GlapInvariantError(
            f"second-moment trace {mix} deviates from rank {expected}")
    if state.update_compliant and np.abs(cfg.eta * v_tilde).max() > 1.0 + slack:
        raise GlapInvariantError("|eta * V~| exceeded 1 on a compliant config")
    floor = state.p - cfg.gamma * state.g
    if floor.min() < -1e-12:
        raise GlapInvariantError("probability floor p >= gamma g violated")


def glap_update(state, chosen, observed):
    """One hedge step from the chosen policy's observed per-step losses.

    Mutates ``state`` in place (weights, probabilities, second moments) and
    returns it.  ``observed`` holds the H scalar losses of the played
    episode; trajectories' state identities are never used.
    """
    cfg = state.config
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != (cfg.H,):
        raise MdpError(f"expected {cfg.H} per-step losses")
    if np.abs(observed).max(initial=0.0) > 1.0 + CHECK_SLACK:
        raise MdpError("observed losses must lie in [-1, 1]")

    phi = state.phi
    # theta_hat[h] = Sigma_h^{-1} phi[chosen, h] * loss_h  (batched over h)
    rhs = (phi[chosen] * observed[:, None])[:, :, None]  # (H, d, 1)
    half = np.linalg.solve(state.chol, rhs)
    theta_hat = np.linalg.solve(
        state.chol.transpose(0, 2, 1), half)[:, :, 0]  # (H, d)

    ell_hat = np.einsum("nhd,hd->nh", phi, theta_hat)  # (n, H)
    lev = leverage_scores(state)  # (n, H)
    v_hat = ell_hat.sum(axis=1)
    v_tilde = v_hat - cfg.bonus_scale(state.n_policies) * lev.sum(axis=1)

    if cfg.check_invariants:
        _check_update(state, ell_hat, lev, v_tilde)

    state.log_w -= cfg.eta * v_tilde
    state.log_w -= state.log_w.max()  # softmax shift invariance keeps p exact
    state.p = _mixture_probabilities(state.log_w, cfg.gamma, state.g)
    state.sigma = sigma_matrices(phi, state.p)
    state.chol = _cholesky_with_jitter(state.sigma, state)
    state.episode += 1
    return state


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


@dataclass
class RunTrace:
    """Per-episode record of a run, serializable to a deterministic CSV."""

    chosen: np.ndarray
    realized_loss: np.ndarray
    exact_value: np.ndarray
    cum_regret: np.ndarray
    p_entropy: np.ndarray
    max_leverage: np.ndarray
    p_hashes: list
    best_policy: int
    algorithm: str = "glap"
    oracle_episodes: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_episodes(self):
        return len(self.chosen)

    @property
    def final_regret(self):
        return float(self.cum_regret[-1]) if self.num_episodes else 0.0

    def to_csv(self, path):
        cols = ("episode", "chosen_policy", "realized_loss", "exact_value",
                "cum_regret_vs_best_in_cover", "p_entropy", "max_leverage")
        with open(path, "w", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            for k in range(self.num_episodes):
                fh.write(
                    f"{k},{int(self.chosen[k])},{float(self.realized_loss[k])!r},"
                    f"{float(self.exact_value[k])!r},{float(self.cum_regret[k])!r},"
                    f"{float(self.p_entropy[k])!r},{float(self.max_leverage[k])!r}\n"
                )


def _entropy(p):
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _hash(p):
    return hashlib.sha256(p.tobytes()).hexdigest()[:16]


def exact_value_matrix(mdp, policies, losses):
    """Exact V_k^pi for every episode and cover policy, shape (K, n)."""
    from .core import exact_visitation

    phi = np.stack([exact_visitation(mdp, pol).phi for pol in policies])
    return np.einsum("khd,nhd->kn", losses.theta, phi)


def run_glap(sim, policies, table, config, losses, rng, *, values=None,
             regret_offset=0.0, record_hashes=True):
    """Run the full hedge for ``config.K`` episodes against a loss sequence.

    Parameters
    ----------
    sim : core.Simulator
    policies : list of core.Policy
        Materialized cover, aligned with the rows of ``table``.
    table : FeatureTable or (n, H, d) array
        Feature visitations fed to the hedge (exact or estimated).
    values : (K, n) array, optional
        Precomputed exact episode values (for regret accounting); computed
        from the simulator's MDP when omitted.
    regret_offset : float
        Starting cumulative regret (live-mode estimation charge).

    Returns
    -------
    RunTrace
    """
    K = config.K
    if losses.num_episodes < K:
        raise MdpError("loss sequence shorter than K")
    state = glap_init(table, config)
    if values is None:
        values = exact_value_matrix(sim.mdp, policies, losses)
    best = int(np.argmin(values[:K].sum(axis=0))) if K else 0
    pol_cums = [np.cumsum(pol.tables, axis=2) for pol in policies]

    chosen = np.empty(K, dtype=np.int64)
    realized = np.empty(K)
    exact_vals = np.empty(K)
    cum_regret = np.empty(K)
    entropy = np.empty(K)
    max_lev = np.empty(K)
    hashes = []
    running = regret_offset
    for k in range(K):
        idx = sample_policy(state, rng)
        traj = sim.episode_cum(pol_cums[idx], losses.theta[k], rng, episode=k)
        chosen[k] = idx
        realized[k] = traj.total_loss
        exact_vals[k] = values[k, idx]
        running += values[k, idx] - values[k, best]
        cum_regret[k] = running
        entropy[k] = _entropy(state.p)
        max_lev[k] = float(leverage_scores(state).max())
        if record_hashes:
            hashes.append(_hash(state.p))
        glap_update(state, idx, traj.losses)

    return RunTrace(
        chosen=chosen, realized_loss=realized, exact_value=exact_vals,
        cum_regret=cum_regret, p_entropy=entropy, max_leverage=max_lev,
        p_hashes=hashes, best_policy=best, algorithm="glap",
        meta={"gamma": config.gamma, "delta": config.delta, "K": K,
              "eta": config.eta, "final_state_episode": state.episode,
              "jitter_events": state.jitter_events},
    )
