"""End-to-end benchmark harness: instances, adversaries, runs, reports.

Wires the full pipeline behind a flat key-value configuration: generate (or
load) an instance, generate an adversary's loss sequence, estimate feature
visitations (simulator or live accounting), run the selected algorithm over
every seed, and emit deterministic per-seed trace CSVs plus one aggregate
summary.  Identical config + seeds must produce byte-identical outputs, so
floats are written with ``repr`` and nothing time- or host-dependent lands in
the files.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import core, featureest, glap, policycover

logger = logging.getLogger(__name__)

ALGORITHMS = ("glap", "uniform", "exp3_exact_features", "best_fixed_oracle")

# Flat config schema: every key has a typed default; unknown keys are errors.
DEFAULTS = {
    "mdp.file": "",
    "mdp.kind": "lowrank",  # lowrank | tabular
    "mdp.S": 4,
    "mdp.A": 2,
    "mdp.H": 3,
    "mdp.d": 4,
    "mdp.seed": 0,
    "mdp.initial": "fixed",  # fixed | uniform
    "adversary.kind": "drift",  # fixed | drift | switching | randomized
    "adversary.seed": 1,
    "adversary.omega": 0.0005,
    "adversary.period": 250,
    "adversary.pieces": 8,
    "adversary.magnitude": 1.0,
    "cover.file": "",
    "cover.mode": "random",
    "cover.budget": 30,
    "cover.eps_prime": 0.5,
    "cover.seed": 2,
    "cover.temperature": 0.0,  # 0 -> problem-size default
    "algorithm": "glap",
    "mode": "simulator",  # simulator | live
    "glap.preset": "none",  # none | simulator | live
    "glap.gamma": 0.1,
    "glap.delta": 0.05,
    "glap.K": 1000,
    "glap.eps": 0.1,
    "glap.bonus_log_pi": False,
    "est.budget": 2_000_000,
    "est.eps_exp_scale": "desk",  # desk | paper | <float>
    "est.lambda_floor": -1.0,  # negative -> confidence-term default
    "est.warmup": 50,
    "est.redesign_every": 500,
    "est.uniform_mix": 0.5,
    "live.charge": "realized",  # realized | pessimistic
    "seeds": "0",
    "out": "out",
}


class ConfigError(ValueError):
    """Bad key, bad value, or unparseable config line."""


def _coerce(key, raw, like):
    if isinstance(like, bool):
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return str(raw)


def parse_config_lines(lines, base=None):
    """Parse ``key=value`` lines (# comments allowed) over the defaults."""
    cfg = dict(DEFAULTS if base is None else base)
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cfg[key] = _coerce(key, raw, DEFAULTS[key])
    return cfg


def load_config(path=None, overrides=()):
    """Load a config file (optional) and apply ``key=value`` overrides after."""
    cfg = dict(DEFAULTS)
    if path:
        with open(path) as fh:
            cfg = parse_config_lines(fh, base=cfg)
    cfg = parse_config_lines(overrides, base=cfg)
    if cfg["algorithm"] not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {cfg['algorithm']!r}")
    if cfg["mode"] not in ("simulator", "live"):
        raise ConfigError(f"unknown mode {cfg['mode']!r}")
    if cfg["glap.K"] < 1:
        raise ConfigError("glap.K must be >= 1")
    return cfg


def parse_seeds(spec):
    try:
        seeds = [int(tok) for tok in str(spec).split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad seeds spec {spec!r}: {exc}") from None
    if not seeds:
        raise ConfigError("need at least one seed")
    return seeds


# ---------------------------------------------------------------------------
# adversaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Adversary:
    """Parametric loss-vector process, evaluable at any episode index.

    Negative indices are legal (used to charge live-mode estimation episodes
    that happen before the bandit phase starts).  The scale factor fixes the
    worst realized loss over reachable pairs at ``magnitude`` and keeps
    ``||theta|| <= sqrt(d)``, uniformly over episode indices.
    """

    kind: str
    horizon: int
    dim: int
    seed: int
    omega: float
    period: int
    magnitude: float
    base_u: np.ndarray  # (H, d) or (pieces, H, d) for switching
    base_v: np.ndarray
    scale: float
    reach_features: np.ndarray = None  # (H, S, A, d), zero at unreachable states

    def theta_at(self, k):
        if self.kind == "fixed":
            return self.base_u / self.scale
        if self.kind == "drift":
            ang = self.omega * k
            return (np.cos(ang) * self.base_u + np.sin(ang) * self.base_v) / self.scale
        if self.kind == "switching":
            piece = (k // self.period) % self.base_u.shape[0]
            return self.base_u[piece] / self.scale
        if self.kind == "randomized":
            rng = np.random.default_rng([self.seed, 977, k + 2 ** 40])
            raw = rng.normal(size=(self.horizon, self.dim))
            inner = np.einsum("hsad,hd->hsa", self.reach_features, raw)
            norm_ratio = float(np.linalg.norm(raw, axis=1).max()) / np.sqrt(self.dim)
            bound = max(float(np.abs(inner).max()), norm_ratio, 1e-12)
            return raw / (bound * self.scale)
        raise ConfigError(f"unknown adversary kind {self.kind!r}")

    def sequence(self, K, mdp=None):
        theta = np.stack([self.theta_at(k) for k in range(K)]) if K else \
            np.zeros((0, self.horizon, self.dim))
        seq = core.LossSequence(theta=theta, scale=self.scale)
        if mdp is not None and K:
            report = core.validate_losses(seq, mdp)
            if not report.ok:
                raise ConfigError(f"adversary produced invalid losses: {report}")
        return seq


def _loss_bound(mdp, vectors):
    """Max |<phi(s,a), v>| over reachable pairs, and the norm/sqrt(d) ratio."""
    reach = core.reachable_states(mdp)
    inner = np.einsum("sad,hd->hsa", mdp.features, vectors)
    worst = 0.0
    for h in range(vectors.shape[0]):
        if reach[h].any():
            worst = max(worst, float(np.abs(inner[h][reach[h]]).max(initial=0.0)))
    norm_ratio = float(np.linalg.norm(vectors, axis=1).max()) / np.sqrt(mdp.feature_dim)
    return max(worst, norm_ratio)


def build_adversary(mdp, kind, seed, omega=0.0005, period=250, pieces=8,
                    magnitude=1.0):
    """Construct a loss process whose realized losses stay in [-magnitude, magnitude]."""
    if not 0 < magnitude <= 1.0:
        raise ConfigError("adversary magnitude must be in (0, 1]")
    H, d = mdp.horizon, mdp.feature_dim
    rng = np.random.default_rng([seed, 431])
    zeros = np.zeros((H, d))
    if kind == "fixed":
        u = rng.normal(size=(H, d))
        scale = _loss_bound(mdp, u) / magnitude
        return Adversary(kind, H, d, seed, omega, period, magnitude, u, zeros, scale)
    if kind == "drift":
        u = rng.normal(size=(H, d))
        v = rng.normal(size=(H, d))
        # orthogonalize the rotation plane per step so the angle-free norm
        # bound max(||u||, ||v||) is exact
        for h in range(H):
            v[h] -= (u[h] @ v[h]) / (u[h] @ u[h]) * u[h]
        # worst case over all rotation angles: sqrt(<phi,u>^2 + <phi,v>^2)
        reach = core.reachable_states(mdp)
        iu = np.einsum("sad,hd->hsa", mdp.features, u)
        iv = np.einsum("sad,hd->hsa", mdp.features, v)
        worst = 0.0
        for h in range(H):
            if reach[h].any():
                worst = max(worst, float(np.sqrt(iu[h][reach[h]] ** 2 + iv[h][reach[h]] ** 2).max()))
        norms = max(float(np.linalg.norm(u, axis=1).max()),
                    float(np.linalg.norm(v, axis=1).max())) / np.sqrt(d)
        scale = max(worst, norms) / magnitude
        return Adversary(kind, H, d, seed, omega, period, magnitude, u, v, scale)
    if kind == "switching":
        u = rng.normal(size=(pieces, H, d))
        scale = max(_loss_bound(mdp, u[j]) for j in range(pieces)) / magnitude
        return Adversary(kind, H, d, seed, omega, period, magnitude, u,
                         np.zeros_like(u), scale)
    if kind == "randomized":
        reach = core.reachable_states(mdp)
        # (H, S, A, d): features masked to reachable states per step
        masked = mdp.features[None] * reach[:, :, None, None]
        return Adversary(kind, H, d, seed, omega, period, magnitude, zeros,
                         zeros, 1.0 / magnitude, reach_features=masked)
    raise ConfigError(f"unknown adversary kind {kind!r}")


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def preset_parameters(preset, K, d, H, n_policies, delta):
    """The two analysis-driven (eps, gamma) schedules, clamped to (0, 1/2].

    ``simulator``: eps = d H^2 log(K/delta) / K, gamma = sqrt(d H log(|Pi|/delta) / K).
    ``live``:      eps = K^{-2/5} d^{9/5} H^{9/5} log^{2/5}(K/delta),
                   gamma = K^{-1/5} d^{7/5} H^{7/5} log^{1/5}(K/delta).
    """
    logk = np.log(max(K, 2) / delta)
    logpi = np.log(n_policies / delta)
    if preset == "simulator":
        eps = d * H * H * logk / K
        gamma = np.sqrt(d * H * logpi / K)
    elif preset == "live":
        eps = K ** (-0.4) * d ** 1.8 * H ** 1.8 * logk ** 0.4
        gamma = K ** (-0.2) * d ** 1.4 * H ** 1.4 * logk ** 0.2
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    if eps > 0.5 or gamma > 0.5:
        logger.warning("preset %s clamped at desk scale: eps=%.3g gamma=%.3g",
                       preset, eps, gamma)
    return min(eps, 0.5), min(gamma, 0.5)


# ---------------------------------------------------------------------------
# instance assembly
# ---------------------------------------------------------------------------


def build_instance(cfg):
    """Materialize (mdp, cover, policies, adversary) from a config dict."""
    if cfg["mdp.file"]:
        mdp = core.load_mdp(cfg["mdp.file"])
    else:
        S, A, H, d = cfg["mdp.S"], cfg["mdp.A"], cfg["mdp.H"], cfg["mdp.d"]
        initial = 0 if cfg["mdp.initial"] == "fixed" else np.full(S, 1.0 / S)
        if cfg["mdp.kind"] == "tabular":
            if d not in (0, S * A):
                raise ConfigError("tabular embedding requires mdp.d == S*A")
            mdp = core.make_random_tabular_mdp(S, A, H, cfg["mdp.seed"], initial)
        elif cfg["mdp.kind"] == "lowrank":
            mdp = core.make_random_mdp(S, A, H, d, cfg["mdp.seed"], initial)
        else:
            raise ConfigError(f"unknown mdp.kind {cfg['mdp.kind']!r}")

    if cfg["cover.file"]:
        cover = policycover.load_cover(cfg["cover.file"])
    else:
        temp = cfg["cover.temperature"] or None
        cover = policycover.build_cover(
            mdp.feature_dim, mdp.horizon, cfg["cover.eps_prime"],
            cfg["cover.budget"], mode=cfg["cover.mode"], seed=cfg["cover.seed"],
            temperature=temp, num_episodes=cfg["glap.K"],
        )
    policies = policycover.materialize_cover(mdp, cover)
    adversary = build_adversary(
        mdp, cfg["adversary.kind"], cfg["adversary.seed"],
        omega=cfg["adversary.omega"], period=cfg["adversary.period"],
        pieces=cfg["adversary.pieces"], magnitude=cfg["adversary.magnitude"],
    )
    return mdp, cover, policies, adversary


class ChargingSimulator(core.Simulator):
    """Live-mode wrapper: estimation rollouts run full episodes and accrue regret.

    Each estimation episode is charged either its realized loss under the
    adversary's pre-phase loss vectors (indices -1, -2, ...) or the
    pessimistic per-episode bound H.
    """

    def __init__(self, mdp, adversary, charge_mode):
        super().__init__(mdp)
        self.adversary = adversary
        self.charge_mode = charge_mode
        self.total_charge = 0.0

    def rollouts(self, tables, n, rng, steps=None):
        states, actions = super().rollouts(tables, n, rng, steps=self.mdp.horizon)
        H = self.mdp.horizon
        if self.charge_mode == "pessimistic":
            self.total_charge += n * H
        else:
            feats = self.mdp.features[states[:, :H], actions]  # (n, H, d)
            start = self.episodes_served - n
            for i in range(n):
                theta = self.adversary.theta_at(-(start + i + 1))
                self.total_charge += float(np.einsum("hd,hd->", feats[i], theta))
        return states, actions


# ---------------------------------------------------------------------------
# per-seed pipelines
# ---------------------------------------------------------------------------


def _estimation_table(cfg, mdp, cover, adversary, seed):
    """Run feature estimation for one seed; returns (table, oracle_episodes, charge)."""
    rng = np.random.default_rng([seed, 101])
    eps = cfg["glap.eps"]
    scale = cfg["est.eps_exp_scale"]
    if scale not in ("paper", "desk"):
        scale = float(scale)
    floor = cfg["est.lambda_floor"]
    floor = None if floor < 0 else floor
    if cfg["mode"] == "live":
        sim = ChargingSimulator(mdp, adversary, cfg["live.charge"])
    else:
        sim = core.Simulator(mdp)
    table = featureest.estimate_feature_visitations(
        sim, cover, eps, cfg["glap.delta"], cfg["est.budget"], rng,
        eps_exp_scale=scale, lambda_floor=floor, warmup=cfg["est.warmup"],
        redesign_every=cfg["est.redesign_every"],
        uniform_mix=cfg["est.uniform_mix"],
    )
    charge = sim.total_charge if cfg["mode"] == "live" else 0.0
    return table, sim.episodes_served, charge


def _baseline_trace(sim, policies, losses, values, K, choose, algorithm, rng):
    """Shared episode loop for the uniform and best-fixed baselines."""
    n = len(policies)
    best = int(np.argmin(values[:K].sum(axis=0)))
    pol_cums = [np.cumsum(pol.tables, axis=2) for pol in policies]
    chosen = np.empty(K, dtype=np.int64)
    realized = np.empty(K)
    exact_vals = np.empty(K)
    cum = np.empty(K)
    running = 0.0
    p_uniform = np.full(n, 1.0 / n)
    entropy = float(-(p_uniform * np.log(p_uniform)).sum()) if algorithm == "uniform" else 0.0
    for k in range(K):
        idx = choose(k, rng, best)
        traj = sim.episode_cum(pol_cums[idx], losses.theta[k], rng, episode=k)
        chosen[k] = idx
        realized[k] = traj.total_loss
        exact_vals[k] = values[k, idx]
        running += values[k, idx] - values[k, best]
        cum[k] = running
    return glap.RunTrace(
        chosen=chosen, realized_loss=realized, exact_value=exact_vals,
        cum_regret=cum, p_entropy=np.full(K, entropy),
        max_leverage=np.full(K, np.nan), p_hashes=[], best_policy=best,
        algorithm=algorithm,
    )


def run_seed(cfg, mdp, cover, policies, adversary, losses, values, seed):
    """Full pipeline for one seed; returns (RunTrace, summary_row_dict)."""
    algorithm = cfg["algorithm"]
    K = cfg["glap.K"]
    rng = np.random.default_rng([seed, 202])
    sim = core.Simulator(mdp)
    oracle_episodes = 0
    charge = 0.0

    if algorithm in ("glap", "exp3_exact_features"):
        delta = cfg["glap.delta"]
        gamma, eps = cfg["glap.gamma"], cfg["glap.eps"]
        if cfg["glap.preset"] != "none":
            eps, gamma = preset_parameters(cfg["glap.preset"], K, mdp.feature_dim,
                                           mdp.horizon, len(policies), delta)
        config = glap.GlapConfig(
            gamma=gamma, delta=delta, K=K, d=mdp.feature_dim, H=mdp.horizon,
            bonus_log_pi=cfg["glap.bonus_log_pi"],
        )
        if algorithm == "exp3_exact_features":
            table = featureest.exact_feature_table(mdp, cover, eps=eps, delta=delta)
        else:
            cfg_est = dict(cfg)
            cfg_est["glap.eps"] = eps
            table, oracle_episodes, charge = _estimation_table(
                cfg_est, mdp, cover, adversary, seed)
        trace = glap.run_glap(sim, policies, table, config, losses, rng,
                              values=values, regret_offset=charge)
        trace.oracle_episodes = oracle_episodes if cfg["mode"] == "simulator" else 0
        trace.meta["estimation_charge"] = charge
        trace.meta["estimation_episodes"] = oracle_episodes
    elif algorithm == "uniform":
        n = len(policies)
        trace = _baseline_trace(
            sim, policies, losses, values, K,
            lambda k, r, best: int(r.integers(n)), "uniform", rng)
    elif algorithm == "best_fixed_oracle":
        trace = _baseline_trace(
            sim, policies, losses, values, K,
            lambda k, r, best: best, "best_fixed_oracle", rng)
    else:
        raise ConfigError(f"unknown algorithm {algorithm!r}")

    row = {
        "seed": seed,
        "status": "ok",
        "algorithm": algorithm,
        "mode": cfg["mode"],
        "K": K,
        "final_regret": trace.final_regret,
        "oracle_episodes": trace.oracle_episodes,
        "estimation_episodes": trace.meta.get("estimation_episodes", 0),
        "estimation_charge": trace.meta.get("estimation_charge", 0.0),
        "error": "",
    }
    return trace, row


def _failure_row(cfg, seed, exc):
    return {
        "seed": seed, "status": "failed", "algorithm": cfg["algorithm"],
        "mode": cfg["mode"], "K": cfg["glap.K"], "final_regret": float("nan"),
        "oracle_episodes": 0, "estimation_episodes": 0, "estimation_charge": 0.0,
        "error": f"{type(exc).__name__}: {exc}",
    }


def _seed_task(args):
    cfg, payload, seed = args
    mdp, cover, policies, adversary, losses, values = payload
    try:
        trace, row = run_seed(cfg, mdp, cover, policies, adversary, losses, values, seed)
        path = os.path.join(cfg["out"], f"trace_seed{seed}.csv")
        trace.to_csv(path)
        return row
    except Exception as exc:  # recorded per-seed; other seeds proceed
        return _failure_row(cfg, seed, exc)


SUMMARY_COLUMNS = ("seed", "status", "algorithm", "mode", "K", "final_regret",
                   "oracle_episodes", "estimation_episodes", "estimation_charge",
                   "error")


def _fmt(value):
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_summary(rows, cfg, path):
    """Summary CSV: one row per seed plus mean/median aggregates and a config echo."""
    ok_rows = [r for r in rows if r["status"] == "ok"]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(SUMMARY_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in SUMMARY_COLUMNS) + "\n")
        template = {c: "" for c in SUMMARY_COLUMNS}
        template.update(algorithm=cfg["algorithm"], mode=cfg["mode"], K=cfg["glap.K"])
        for name, fn in (("mean", np.mean), ("median", np.median)):
            agg = dict(template, seed=name, status="aggregate", error="")
            if ok_rows:
                agg["final_regret"] = float(fn([r["final_regret"] for r in ok_rows]))
                agg["oracle_episodes"] = float(fn([r["oracle_episodes"] for r in ok_rows]))
                agg["estimation_episodes"] = float(fn([r["estimation_episodes"] for r in ok_rows]))
                agg["estimation_charge"] = float(fn([r["estimation_charge"] for r in ok_rows]))
            else:
                for col in ("final_regret", "oracle_episodes",
                            "estimation_episodes", "estimation_charge"):
                    agg[col] = float("nan")
            fh.write(",".join(_fmt(agg[c]) for c in SUMMARY_COLUMNS) + "\n")
        for key in sorted(DEFAULTS):
            if key == "out":  # output location is not an experiment parameter
                continue
            echo = _fmt(cfg[key]).replace(",", ";")
            fh.write(f"#config,{key},{echo}" + "," * (len(SUMMARY_COLUMNS) - 3) + "\n")


def run_experiment(cfg, jobs=1):
    """Run every seed of an experiment config; returns the summary rows.

    Artifacts land in ``cfg['out']``: one ``trace_seed<N>.csv`` per seed and
    a ``summary.csv``.  A failed seed contributes a failure row and does not
    abort the others.
    """
    os.makedirs(cfg["out"], exist_ok=True)
    mdp, cover, policies, adversary = build_instance(cfg)
    losses = adversary.sequence(cfg["glap.K"], mdp)
    values = glap.exact_value_matrix(mdp, policies, losses)
    payload = (mdp, cover, policies, adversary, losses, values)
    seeds = parse_seeds(cfg["seeds"])
    tasks = [(cfg, payload, seed) for seed in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_seed_task, tasks))
    else:
        rows = [_seed_task(task) for task in tasks]
    rows.sort(key=lambda r: r["seed"])
    write_summary(rows, cfg, os.path.join(cfg["out"], "summary.csv"))
    return rows


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class SublinearityReport:
    """Growth-exponent estimates between two horizons, per seed."""

    alphas: dict  # seed -> alpha_hat
    median_alpha: float
    excluded: int
    threshold: float

    @property
    def passed(self):
        return bool(self.alphas) and self.median_alpha <= self.threshold


def sublinearity_report(regrets_k, regrets_2k, threshold=0.95):
    """Estimate alpha in Reg ~ K^alpha from paired runs at K and 2K.

    ``regrets_k`` and ``regrets_2k`` map seed -> final regret; seeds with a
    nonpositive regret at either horizon are excluded (and counted).
    """
    alphas = {}
    excluded = 0
    for seed in sorted(regrets_k):
        if seed not in regrets_2k:
            continue
        r1, r2 = regrets_k[seed], regrets_2k[seed]
        if r1 <= 0 or r2 <= 0:
            excluded += 1
            continue
        alphas[seed] = float(np.log(r2 / r1) / np.log(2.0))
    median = float(np.median(list(alphas.values()))) if alphas else float("nan")
    return SublinearityReport(alphas, median, excluded, threshold)


@dataclass
class QueryComplexityReport:
    oracle_episodes: int
    K: int

    @property
    def ratio_to_k_squared(self):
        return self.oracle_episodes / float(self.K) ** 2


def read_summary(path):
    """Parse a summary.csv back into per-seed dict rows (config rows skipped)."""
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            if line.startswith("#config") or not line.strip():
                continue
            parts = line.rstrip("\n").split(",")
            rows.append(dict(zip(header, parts)))
    return [r for r in rows if r["status"] == "ok"]


def regrets_by_seed(summary_rows):
    return {int(r["seed"]): float(r["final_regret"]) for r in summary_rows
            if r["seed"] not in ("mean", "median")}
