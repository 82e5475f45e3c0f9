"""Command-line interface: gen-mdp, gen-losses, build-cover, estimate-features, run, report."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import bench, core, featureest, policycover


def _cmd_gen_mdp(args):
    initial = 0 if args.initial == "fixed" else np.full(args.S, 1.0 / args.S)
    if args.kind == "tabular":
        mdp = core.make_random_tabular_mdp(args.S, args.A, args.H, args.seed, initial)
    else:
        mdp = core.make_random_mdp(args.S, args.A, args.H, args.d, args.seed, initial)
    report = core.validate_mdp(mdp)
    if not report.ok:
        print(report, file=sys.stderr)
        return 1
    core.save_mdp(mdp, args.out)
    print(f"wrote {args.out}: S={mdp.num_states} A={mdp.num_actions} "
          f"H={mdp.horizon} d={mdp.feature_dim}")
    return 0


def _cmd_gen_losses(args):
    mdp = core.load_mdp(args.mdp)
    adv = bench.build_adversary(mdp, args.kind, args.seed, omega=args.omega,
                                period=args.period, pieces=args.pieces,
                                magnitude=args.magnitude)
    losses = adv.sequence(args.K, mdp)
    core.save_losses(losses, args.out)
    print(f"wrote {args.out}: K={args.K} kind={args.kind} scale={losses.scale!r}")
    return 0


def _cmd_build_cover(args):
    cover = policycover.build_cover(
        args.d, args.H, args.eps_prime, args.budget, mode=args.mode,
        seed=args.seed, temperature=args.temperature,
        num_episodes=args.num_episodes,
    )
    policycover.save_cover(cover, args.out)
    print(f"wrote {args.out}: {len(cover)} policies (mode={args.mode}, "
          f"complete={cover.complete})")
    return 0


def _cmd_estimate_features(args):
    mdp = core.load_mdp(args.mdp)
    cover = policycover.load_cover(args.cover)
    sim = core.Simulator(mdp)
    rng = np.random.default_rng(args.seed)
    scale = args.eps_exp_scale
    if scale not in ("paper", "desk"):
        scale = float(scale)
    table = featureest.estimate_feature_visitations(
        sim, cover, args.eps, args.delta, args.budget, rng,
        eps_exp_scale=scale, lambda_floor=args.lambda_floor,
        warmup=args.warmup, redesign_every=args.redesign_every,
    )
    table.meta["seed"] = args.seed
    featureest.save_table(table, args.out)
    print(f"wrote {args.out}: episodes={table.total_episodes} "
          f"per-step={table.episodes_per_step}")
    return 0


def _cmd_run(args):
    cfg = bench.load_config(args.config, args.overrides)
    rows = bench.run_experiment(cfg, jobs=args.jobs)
    for row in rows:
        print(f"seed {row['seed']}: {row['status']} "
              f"final_regret={row['final_regret']!r} "
              f"oracle_episodes={row['oracle_episodes']}"
              + (f" error={row['error']}" if row["error"] else ""))
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def _cmd_report(args):
    if args.kind == "sublinearity":
        rows_k = bench.read_summary(args.summary_k)
        rows_2k = bench.read_summary(args.summary_2k)
        rep = bench.sublinearity_report(
            bench.regrets_by_seed(rows_k), bench.regrets_by_seed(rows_2k),
            threshold=args.threshold,
        )
        out = {
            "alphas": rep.alphas,
            "median_alpha": rep.median_alpha,
            "excluded": rep.excluded,
            "threshold": rep.threshold,
            "passed": rep.passed,
        }
    else:  # query-complexity
        rows = bench.read_summary(args.summary_k)
        episodes = [int(float(r["oracle_episodes"])) for r in rows
                    if r["seed"] not in ("mean", "median")]
        K = int(rows[0]["K"]) if rows else 0
        total = int(np.median(episodes)) if episodes else 0
        rep = bench.QueryComplexityReport(total, K)
        out = {
            "oracle_episodes_median": rep.oracle_episodes,
            "K": rep.K,
            "ratio_to_k_squared": rep.ratio_to_k_squared,
        }
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="glapmdp")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-mdp", help="generate and save a random instance")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["lowrank", "tabular"], default="lowrank")
    p.add_argument("--S", type=int, default=4)
    p.add_argument("--A", type=int, default=2)
    p.add_argument("--H", type=int, default=3)
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--initial", choices=["fixed", "uniform"], default="fixed")
    p.set_defaults(func=_cmd_gen_mdp)

    p = sub.add_parser("gen-losses", help="generate an adversary's loss sequence")
    p.add_argument("--mdp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["fixed", "drift", "switching", "randomized"],
                   default="drift")
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--omega", type=float, default=0.0005)
    p.add_argument("--period", type=int, default=250)
    p.add_argument("--pieces", type=int, default=8)
    p.add_argument("--magnitude", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=_cmd_gen_losses)

    p = sub.add_parser("build-cover", help="build a softmax policy cover")
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--H", type=int, required=True)
    p.add_argument("--eps-prime", type=float, default=0.5)
    p.add_argument("--budget", type=int, default=30)
    p.add_argument("--mode", choices=["grid", "random"], default="random")
    p.add_argument("--seed", type=int, default=2)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--num-episodes", type=int, default=None)
    p.set_defaults(func=_cmd_build_cover)

    p = sub.add_parser("estimate-features", help="run the visitation estimation oracle")
    p.add_argument("--mdp", required=True)
    p.add_argument("--cover", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--budget", type=int, default=2_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps-exp-scale", default="desk",
                   help="'paper', 'desk', or an explicit leverage target")
    p.add_argument("--lambda-floor", type=float, default=None)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--redesign-every", type=int, default=500)
    p.set_defaults(func=_cmd_estimate_features)

    p = sub.add_parser("run", help="run a full experiment from a config")
    p.add_argument("--config", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("overrides", nargs="*", metavar="key=value",
                   help="config overrides applied after the file")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="post-run growth / query-complexity reports")
    p.add_argument("kind", choices=["sublinearity", "query-complexity"])
    p.add_argument("--summary-k", required=True, help="summary.csv of the K run")
    p.add_argument("--summary-2k", default=None, help="summary.csv of the 2K run")
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "report" and args.kind == "sublinearity" and not args.summary_2k:
        print("sublinearity report needs --summary-2k", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (core.MdpError, bench.ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
