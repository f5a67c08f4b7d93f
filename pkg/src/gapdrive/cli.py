"""Command line interface: collect, train, eval, run, plan-debug.

Every command is deterministic given its seed flags; artifact files are
byte-identical across repeated invocations with the same arguments.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .world import Scenario, World, generate_random_scenario, write_trace_csv
from .trajectory import SafetyParams, eval_poly, sample_trajectories
from .gaps import SENSOR_RANGE, enumerate_gaps, reachable_gaps
from .learn import Hyperparams, load_model, train
from . import harness
from .harness import (
    DESK_RUNS,
    DESK_STEPS,
    DESK_TAU,
    DESK_TRANSITIONS,
    EPISODE_SECONDS,
    EVAL_DENSITIES,
    SCENARIOS_PER_DENSITY,
    collect_dataset,
    critical_scenario_a,
    critical_scenario_b,
    evaluate,
    run_agent_episode,
    write_critical_csv,
    write_records_jsonl,
    write_report_csv,
    write_report_json,
)

DATASET_SCHEMA = """\
dataset (JSONL, one transition per line):
  {"format_version": 1,
   "state": {"dynamic": [[d_rel, v_rel, lane_rel], ...], "static": [v_norm, ll, rl]},
   "chosen_gap": {"d_rel":, "v_rel":, "lane_rel":, "len":, "af":},
   "chosen_identity": [follower_id|null, leader_id|null, lane],
   "reward": float, "next_state": {...}, "next_gap_candidates": [{...}, ...],
   "terminal": bool, "duration": float, "action": int (high-level only)}"""

MODEL_SCHEMA = """\
model (JSON): {"format_version": 1, "hyperparams": {...}, "seed": int,
   "online": {layer arrays}, "target1": {...}, "target2": {...}}"""

REPORT_SCHEMA = """\
eval_report.json: {"format_version": 1, "agents": {name: {"per_density":
   {"<density>": {"mean_speed", "std_speed", "unit_means"}},
   "unit_overall_means", "overall_mean_speed", "collisions"}}, ...}
eval_report.csv: agent,density,mean_speed,std_speed"""

TRAIN_LOG_SCHEMA = "training log (CSV): step,loss,mean_abs_q"

PLAN_DEBUG_SCHEMA = """\
plan-debug output (JSONL, one candidate per line):
  {"gap": [follower_id|null, leader_id|null, lane], "reachable": bool,
   "duration": T, "v_end": float, "s_end": float, "feasible": bool,
   "reason": str, "cost": {"jerk_long", "jerk_lat", "lane_center_dev",
   "speed_dev", "gap_fit", "total"}, "mean_speed": float}"""


def _csv_ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _add_scenario_flags(p: argparse.ArgumentParser):
    p.add_argument("--critical", choices=("a", "b"),
                   help="use a built-in critical scenario")
    p.add_argument("--density", type=int,
                   help="random scenario with this many vehicles")
    p.add_argument("--scenario-seed", type=int, default=0,
                   help="seed for --density scenarios (default 0)")
    p.add_argument("--scenario", metavar="FILE",
                   help="scenario JSON file (Scenario.to_json format)")


def _scenario_from_args(args):
    picked = [x for x in (args.critical, args.density, args.scenario)
              if x is not None]
    if len(picked) != 1:
        raise SystemExit("exactly one of --critical/--density/--scenario required")
    if args.critical:
        return critical_scenario_a() if args.critical == "a" else critical_scenario_b()
    if args.scenario:
        with open(args.scenario) as fh:
            return Scenario.from_json(fh.read())
    return generate_random_scenario(args.density, seed=args.scenario_seed)


def cmd_collect(args) -> int:
    collect_dataset(args.kind, args.transitions, args.seed, path=args.out,
                    max_seconds=args.episode_seconds)
    print(f"wrote {args.transitions} transitions to {args.out}")
    return 0


def cmd_train(args) -> int:
    hp = Hyperparams(training_steps=args.steps, batch_size=args.batch_size,
                     gamma=args.gamma, tau=args.tau, learning_rate=args.lr,
                     discount_by_duration=args.discount_by_duration)
    train(args.dataset, hp, args.seed, model_path=args.out, log_path=args.log,
          high_level=args.high_level, checkpoint_every=args.checkpoint_every)
    print(f"trained {args.steps} steps -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    agents = [a.strip() for a in args.agents.split(",") if a.strip()]
    models = {}
    if args.models:
        models["options"] = [load_model(p)[0] for p in args.models.split(",")]
    if args.hl_models:
        models["high-level"] = [load_model(p)[0] for p in args.hl_models.split(",")]
    report = evaluate(agents, base_seed=args.base_seed, runs=args.runs,
                      models=models, densities=tuple(_csv_ints(args.densities)),
                      episodes_per_density=args.episodes_per_density,
                      max_seconds=args.episode_seconds,
                      include_critical=args.critical)
    import os
    os.makedirs(args.out_dir, exist_ok=True)
    write_report_json(report, os.path.join(args.out_dir, "eval_report.json"))
    write_report_csv(report, os.path.join(args.out_dir, "eval_report.csv"))
    if args.critical:
        write_critical_csv(report["critical"],
                           os.path.join(args.out_dir, "critical.csv"))
    for name, block in report["agents"].items():
        print(f"{name}: overall mean speed {block['overall_mean_speed']:.3f} "
              f"({block['collisions']} collisions)")
    return 0


def cmd_run(args) -> int:
    sc = _scenario_from_args(args)
    model = None
    if args.agent in ("options", "high-level"):
        if not args.model:
            raise SystemExit(f"--model is required for the {args.agent} agent")
        model = load_model(args.model)[0]
    world = World(sc)
    kwargs = dict(model=model, policy_seed=args.policy_seed,
                  max_seconds=args.seconds)
    res = _run_on_world(args.agent, world, sc, **kwargs)
    if args.trace:
        write_trace_csv(world.trace, args.trace)
    if args.records:
        write_records_jsonl(res.records, args.records)
    print(json.dumps({
        "agent": args.agent,
        "mean_speed": res.mean_speed,
        "duration": res.duration,
        "collided": res.collided,
        "episode_return": res.episode_return,
        "lanes_visited": sorted(set(res.lane_history)),
    }, sort_keys=True))
    return 0


def _run_on_world(kind, world, sc, model=None, policy_seed=None, max_seconds=60.0):
    # mirrors harness.run_agent_episode but reuses the caller's World so the
    # trace can be written afterwards
    from .agents import options_policy, greedy_policy, random_policy, select_high_level
    from .harness import (RewardParams, run_gap_episode, run_idm_episode,
                          run_high_level_episode)
    rp = RewardParams(sc.ego_desired_speed)
    if kind == "options":
        return run_gap_episode(world, options_policy(model), model=model,
                               reward_params=rp, max_seconds=max_seconds)
    if kind == "greedy":
        return run_gap_episode(world, greedy_policy(), reward_params=rp,
                               max_seconds=max_seconds)
    if kind == "random":
        rng = np.random.default_rng(policy_seed)
        return run_gap_episode(world, random_policy(rng), reward_params=rp,
                               max_seconds=max_seconds)
    if kind == "idm":
        return run_idm_episode(world, reward_params=rp, max_seconds=max_seconds)
    policy = lambda st, mask: select_high_level(model, st, mask)
    return run_high_level_episode(world, policy, reward_params=rp,
                                  max_seconds=max_seconds)


def cmd_plan_debug(args) -> int:
    sc = _scenario_from_args(args)
    world = World(sc)
    view = world.sensor_view(SENSOR_RANGE)
    ego = world.ego
    safety = SafetyParams()
    gaps = enumerate_gaps(view, ego, world.lane_count, SENSOR_RANGE)
    gapset = reachable_gaps(gaps, ego, safety, view=view,
                            desired_speed=sc.ego_desired_speed)
    reachable = {g.identity for g in gapset.gaps}
    with open(args.out, "w") as fh:
        for gap in gaps:
            cands = sample_trajectories(ego, gap.lane_index, sc.ego_desired_speed,
                                        safety, view, gap=gap)
            for tr in cands:
                s_end, v_end, _, _ = eval_poly(tr.longitudinal, tr.duration)
                s0 = eval_poly(tr.longitudinal, 0.0)[0]
                fh.write(json.dumps({
                    "gap": list(gap.identity),
                    "reachable": gap.identity in reachable,
                    "duration": tr.duration,
                    "v_end": v_end,
                    "s_end": s_end,
                    "feasible": tr.feasible,
                    "reason": tr.reason,
                    "cost": {
                        "jerk_long": tr.cost.jerk_long,
                        "jerk_lat": tr.cost.jerk_lat,
                        "lane_center_dev": tr.cost.lane_center_dev,
                        "speed_dev": tr.cost.speed_dev,
                        "gap_fit": tr.cost.gap_fit,
                        "total": tr.cost.total,
                    },
                    "mean_speed": (s_end - s0) / tr.duration,
                }, sort_keys=True) + "\n")
    print(f"{len(gaps)} gaps enumerated, {len(reachable)} reachable; "
          f"candidates written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gapdrive",
        description="Gap-based highway driving: data collection, offline "
                    "Q-learning, and evaluation.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="\n".join([DATASET_SCHEMA, "", MODEL_SCHEMA, "", REPORT_SCHEMA]),
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="run a behaviour policy and record transitions",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog=DATASET_SCHEMA)
    p.add_argument("--kind", choices=("options", "high-level"), default="options")
    p.add_argument("--transitions", type=int, default=DESK_TRANSITIONS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episode-seconds", type=float, default=EPISODE_SECONDS)
    p.add_argument("--out", required=True, metavar="FILE.jsonl")
    p.set_defaults(fn=cmd_collect)

    p = sub.add_parser("train", help="offline Q-learning on a collected dataset",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="\n".join([MODEL_SCHEMA, "", TRAIN_LOG_SCHEMA]))
    p.add_argument("--dataset", required=True, metavar="FILE.jsonl")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=DESK_STEPS)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--tau", type=float, default=DESK_TAU)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--high-level", action="store_true",
                   help="3-action keep/left/right head instead of gap input")
    p.add_argument("--discount-by-duration", action="store_true",
                   help="discount multi-second options by gamma**duration")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--out", required=True, metavar="MODEL.json")
    p.add_argument("--log", default=None, metavar="LOG.csv")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate agents over the random suite",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog=REPORT_SCHEMA)
    p.add_argument("--agents", default="options,greedy,random",
                   help="comma list of options,greedy,random,idm,high-level")
    p.add_argument("--models", default=None,
                   help="comma list of model files for the options agent")
    p.add_argument("--hl-models", default=None,
                   help="comma list of model files for the high-level agent")
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=DESK_RUNS,
                   help="independent runs for stochastic agents")
    p.add_argument("--densities", default=",".join(str(d) for d in EVAL_DENSITIES))
    p.add_argument("--episodes-per-density", type=int, default=SCENARIOS_PER_DENSITY)
    p.add_argument("--episode-seconds", type=float, default=EPISODE_SECONDS)
    p.add_argument("--critical", action="store_true",
                   help="also run the two built-in critical scenarios")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("run", help="run one agent on one scenario")
    p.add_argument("--agent", required=True,
                   choices=("options", "greedy", "random", "idm", "high-level"))
    _add_scenario_flags(p)
    p.add_argument("--model", default=None, metavar="MODEL.json")
    p.add_argument("--policy-seed", type=int, default=0)
    p.add_argument("--seconds", type=float, default=EPISODE_SECONDS)
    p.add_argument("--trace", default=None, metavar="TRACE.csv")
    p.add_argument("--records", default=None, metavar="RECORDS.jsonl")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("plan-debug",
                       help="dump every candidate trajectory at t=0",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog=PLAN_DEBUG_SCHEMA)
    _add_scenario_flags(p)
    p.add_argument("--out", required=True, metavar="CANDIDATES.jsonl")
    p.set_defaults(fn=cmd_plan_debug)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
