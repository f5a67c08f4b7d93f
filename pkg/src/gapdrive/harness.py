"""Episode execution, dataset collection, scenario suites, and evaluation.

Everything here is deterministic given seeds: the same collect/eval call
produces byte-identical artifact files on repeated invocations.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .world import (
    DriverParams,
    Scenario,
    VehicleState,
    World,
    generate_random_scenario,
)
from .gaps import SENSOR_RANGE
from .learn import RlState, Transition, write_dataset
from .neural import SetQNet
from .agents import (
    ACTION_KEEP,
    ACTION_LEFT,
    ACTION_RIGHT,
    DecisionRecord,
    GapPolicyRunner,
    HighLevelRunner,
    IdmAgentRunner,
    PSEUDO_GAP,
    greedy_policy,
    make_rl_state,
    options_policy,
    random_policy,
    select_high_level,
)

EVAL_DENSITIES = (10, 20, 30, 40, 50, 60, 70, 80)
SCENARIOS_PER_DENSITY = 10
EPISODE_SECONDS = 60
COLLECT_MAX_VEHICLES = 70
COLLECT_GAMMA = 0.99            # within-option discount for multi-second actions
P_REPEAT = 0.8

# paper-scale knobs are 10x these; see the CLI flags
DESK_TRANSITIONS = 50_000
DESK_STEPS = 10_000
DESK_TAU = 7.5e-4               # keeps steps*tau at the full-scale value
DESK_RUNS = 3
DESK_MODELS = 3


@dataclass
class RewardParams:
    v_des: float = 30.0
    p_ac: float = -0.01


def reward(v: float, params: RewardParams, action_changed: bool) -> float:
    """Speed-tracking reward with a small penalty for switching actions.

    Below the desired speed the reward falls linearly with the normalized
    deviation; at or above it the speed term saturates at 1.
    """
    penalty = params.p_ac if action_changed else 0.0
    if v < params.v_des:
        return 1.0 - abs(v - params.v_des) / params.v_des + penalty
    return 1.0 + penalty


@dataclass
class EpisodeResult:
    mean_speed: float
    duration: float
    collided: bool
    episode_return: float
    rewards: list[float]
    records: list[DecisionRecord]
    lane_history: list[int]
    final_s: float


def _mean_trace_speed(world: World) -> float:
    vs = [row[5] for row in world.trace if row[1] == 0]
    return float(np.mean(vs)) if vs else world.ego_v


def _episode_done(world: World, max_seconds: float) -> bool:
    return (world.ego_collision_flag or world.ego_s >= world.road_length
            or world.time >= max_seconds - 1e-9)


def run_gap_episode(world: World, policy, model: SetQNet | None = None,
                    reward_params: RewardParams | None = None,
                    max_seconds: float = EPISODE_SECONDS,
                    transitions: list[Transition] | None = None) -> EpisodeResult:
    """Drive one gap-selecting agent for an episode; optionally record the
    per-second transitions (including next-step reachable candidates)."""
    rp = reward_params or RewardParams(world.scenario.ego_desired_speed)
    world.record_trace = True
    runner = GapPolicyRunner(world, policy, model=model)
    prev_chosen = None
    pending = None            # transition awaiting its next state
    rewards: list[float] = []
    records: list[DecisionRecord] = []
    lanes: list[int] = [world.ego_lane]
    while world.time < max_seconds - 1e-9:
        traj, rec, state, gapset = runner.decide()
        cands = [g.features for g in gapset.gaps] or [PSEUDO_GAP]
        if transitions is not None and pending is not None:
            st0, gf0, id0, r0 = pending
            transitions.append(Transition(st0, gf0, id0, r0, state, cands, False))
            pending = None
        chosen = rec.chosen_identity
        if chosen is None:
            gf, ident = PSEUDO_GAP, (None, None, world.ego_lane)
        else:
            gap = next(g for g in gapset.gaps if g.identity == chosen)
            gf, ident = gap.features, chosen
        changed = chosen is not None and chosen != prev_chosen
        runner._execute(traj)
        if chosen is not None:
            runner.prev_identity = chosen
            prev_chosen = chosen
        r = reward(world.ego_v, rp, changed)
        rec.reward = r
        rewards.append(r)
        records.append(rec)
        lanes.append(world.ego_lane)
        if transitions is not None:
            if world.ego_collision_flag:
                exit_state = make_rl_state(world.sensor_view(SENSOR_RANGE),
                                           world.ego, rp.v_des, world.lane_count)
                transitions.append(Transition(state, gf, ident, r, exit_state, [], True))
            elif _episode_done(world, max_seconds):
                exit_state, exit_gapset = runner.current_gapset()
                exit_cands = [g.features for g in exit_gapset.gaps] or [PSEUDO_GAP]
                transitions.append(Transition(state, gf, ident, r,
                                              exit_state, exit_cands, False))
            else:
                pending = (state, gf, ident, r)
        if world.ego_collision_flag or world.ego_s >= world.road_length:
            break
    return EpisodeResult(_mean_trace_speed(world), world.time,
                         world.ego_collision_flag, float(sum(rewards)),
                         rewards, records, lanes, world.ego_s)


def run_idm_episode(world: World, reward_params: RewardParams | None = None,
                    max_seconds: float = EPISODE_SECONDS) -> EpisodeResult:
    rp = reward_params or RewardParams(world.scenario.ego_desired_speed)
    world.record_trace = True
    runner = IdmAgentRunner(world, DriverParams(v0=rp.v_des))
    rewards: list[float] = []
    lanes: list[int] = [world.ego_lane]
    while world.time < max_seconds - 1e-9:
        runner.step_one_second()
        rewards.append(reward(world.ego_v, rp, False))
        lanes.append(world.ego_lane)
        if world.ego_collision_flag or world.ego_s >= world.road_length:
            break
    return EpisodeResult(_mean_trace_speed(world), world.time,
                         world.ego_collision_flag, float(sum(rewards)),
                         rewards, [], lanes, world.ego_s)


def run_high_level_episode(world: World, policy,
                           reward_params: RewardParams | None = None,
                           max_seconds: float = EPISODE_SECONDS,
                           transitions: list[Transition] | None = None) -> EpisodeResult:
    """High-level keep/left/right episode; lane changes commit for 3 s and
    are recorded as one multi-second transition with discounted reward."""
    rp = reward_params or RewardParams(world.scenario.ego_desired_speed)
    world.record_trace = True
    captured: dict = {}
    n_decisions = [0]

    def instrumented(state, mask):
        action = policy(state, mask)
        captured.update(state=state, action=action)
        n_decisions[0] += 1
        return action

    runner = HighLevelRunner(world, instrumented)
    rewards: list[float] = []
    lanes: list[int] = [world.ego_lane]
    pending = None            # (state, action, [per-second rewards])
    prev_action = None
    seen = 0
    while world.time < max_seconds - 1e-9:
        runner.step_one_second()
        decided = n_decisions[0] > seen
        seen = n_decisions[0]
        if decided and transitions is not None and pending is not None:
            _flush_high_level(pending, captured["state"], transitions, False)
            pending = None
        if decided:
            changed = captured["action"] != prev_action
            prev_action = captured["action"]
            if transitions is not None:
                pending = (captured["state"], captured["action"], [])
        else:
            changed = False
        r = reward(world.ego_v, rp, changed if decided else False)
        rewards.append(r)
        lanes.append(world.ego_lane)
        if pending is not None:
            pending[2].append(r)
        terminal = world.ego_collision_flag
        if transitions is not None and pending is not None and (
                terminal or _episode_done(world, max_seconds)):
            exit_state = make_rl_state(world.sensor_view(SENSOR_RANGE), world.ego,
                                       rp.v_des, world.lane_count)
            _flush_high_level(pending, exit_state, transitions, terminal)
            pending = None
        if terminal or world.ego_s >= world.road_length:
            break
    return EpisodeResult(_mean_trace_speed(world), world.time,
                         world.ego_collision_flag, float(sum(rewards)),
                         rewards, [], lanes, world.ego_s)


def _flush_high_level(pending, next_state: RlState, out: list[Transition],
                      terminal: bool):
    state, action, rs = pending
    total = 0.0
    for k, r in enumerate(rs):
        total += (COLLECT_GAMMA ** k) * r
    out.append(Transition(state, PSEUDO_GAP, (None, None, -1), total, next_state,
                          [PSEUDO_GAP], terminal, duration=float(len(rs)),
                          action=action))


def pseudo_random_high_level(rng: np.random.Generator, p_repeat: float = P_REPEAT):
    """Repeats the previous valid action with probability p_repeat, otherwise
    picks uniformly among the currently valid actions."""
    prev = [ACTION_KEEP]

    def pick(state, mask) -> int:
        valid = [a for a in (ACTION_KEEP, ACTION_LEFT, ACTION_RIGHT) if mask[a]]
        if not valid:
            return ACTION_KEEP
        if prev[0] in valid and rng.random() < p_repeat:
            return prev[0]
        prev[0] = valid[int(rng.integers(len(valid)))]
        return prev[0]

    return pick


def collect_dataset(kind: str, n_transitions: int, seed: int,
                    path: str | None = None,
                    max_seconds: float = EPISODE_SECONDS) -> list[Transition]:
    """Random-policy experience over random scenarios of 0..70 vehicles."""
    if kind not in ("options", "high-level"):
        raise ValueError(f"unknown dataset kind: {kind}")
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    rng = np.random.default_rng(seed)
    out: list[Transition] = []
    while len(out) < n_transitions:
        n_veh = int(rng.integers(0, COLLECT_MAX_VEHICLES + 1))
        sc_seed = int(rng.integers(2 ** 31))
        world = World(generate_random_scenario(n_veh, seed=sc_seed))
        if kind == "options":
            run_gap_episode(world, random_policy(rng), transitions=out,
                            max_seconds=max_seconds)
        else:
            run_high_level_episode(world, pseudo_random_high_level(rng),
                                   transitions=out, max_seconds=max_seconds)
    out = out[:n_transitions]
    if path:
        write_dataset(path, out)
    return out


# --------------------------------------------------------------- scenarios

CRITICAL_CONVOY_SPEED = 24.0    # matches a terminal-speed lattice point
CRITICAL_EGO_SPEED = 25.0
CRITICAL_ROAD_LENGTH = 2000.0   # no road-end truncation within 60 s at 30


def _slow_driver(v: float) -> DriverParams:
    # no intent to accelerate: target speed equals current speed
    return DriverParams(v0=v, lane_change_prob_per_s=0.0)


def _station_keeper(v: float) -> DriverParams:
    # near-zero headway demand: cruises at v regardless of its leader, so
    # the rear bound of the ego's gap stays put instead of opening up
    return DriverParams(v0=v, T=0.1, s0=0.5, lane_change_prob_per_s=0.0)


def critical_scenario_a() -> Scenario:
    """Boxed-in start: ego in a short slow gap on the right lane.

    The middle-lane vehicle sits just ahead, so the fixed 3 s lane change
    fails the headway gate, but a longer drop-back merge into the open
    middle-lane gap is feasible. The empty left lane only becomes usable
    after moving to the middle lane.
    """
    v = CRITICAL_CONVOY_SPEED
    ego = VehicleState(0, 0, 150.0, 0.0, CRITICAL_EGO_SPEED, 0.0, 5.0)
    vehicles = [
        (VehicleState(1, 0, 110.0, 0.0, v, 0.0, 5.0), _station_keeper(v)),
        (VehicleState(2, 0, 178.0, 0.0, v, 0.0, 5.0), _slow_driver(v)),
        (VehicleState(3, 1, 168.0, 0.0, v, 0.0, 5.0), _slow_driver(v)),
    ]
    return Scenario(lane_count=3, road_length=CRITICAL_ROAD_LENGTH,
                    vehicles=vehicles, ego_start=ego, ego_desired_speed=30.0,
                    seed=101, max_duration=EPISODE_SECONDS)


def critical_scenario_b() -> Scenario:
    """Slow convoy: the only way past is a braking merge into the gap behind
    the adjacent leader; staying keeps the ego at the shared slow speed."""
    v = CRITICAL_CONVOY_SPEED
    ego = VehicleState(0, 0, 150.0, 0.0, CRITICAL_EGO_SPEED, 0.0, 5.0)
    vehicles = [
        (VehicleState(1, 0, 178.0, 0.0, v, 0.0, 5.0), _slow_driver(v)),
        (VehicleState(2, 1, 168.0, 0.0, v, 0.0, 5.0), _slow_driver(v)),
        (VehicleState(3, 1, 112.0, 0.0, v, 0.0, 5.0), _slow_driver(v)),
    ]
    return Scenario(lane_count=3, road_length=CRITICAL_ROAD_LENGTH,
                    vehicles=vehicles, ego_start=ego, ego_desired_speed=30.0,
                    seed=102, max_duration=EPISODE_SECONDS)


# --------------------------------------------------------------- evaluation

STOCHASTIC_AGENTS = ("random",)
LEARNED_AGENTS = ("options", "high-level")


def episode_seed(base_seed: int, density: int, k: int) -> int:
    return base_seed + 1000 * density + k


def run_agent_episode(kind: str, scenario: Scenario, *,
                      model: SetQNet | None = None,
                      policy_seed=None,
                      reward_params: RewardParams | None = None,
                      max_seconds: float = EPISODE_SECONDS,
                      transitions: list[Transition] | None = None) -> EpisodeResult:
    world = World(scenario)
    rp = reward_params or RewardParams(scenario.ego_desired_speed)
    if kind == "options":
        if model is None:
            raise ValueError("options agent requires a model")
        return run_gap_episode(world, options_policy(model), model=model,
                               reward_params=rp, max_seconds=max_seconds,
                               transitions=transitions)
    if kind == "greedy":
        return run_gap_episode(world, greedy_policy(), reward_params=rp,
                               max_seconds=max_seconds, transitions=transitions)
    if kind == "random":
        rng = np.random.default_rng(policy_seed)
        return run_gap_episode(world, random_policy(rng), reward_params=rp,
                               max_seconds=max_seconds, transitions=transitions)
    if kind == "idm":
        return run_idm_episode(world, reward_params=rp, max_seconds=max_seconds)
    if kind == "high-level":
        if model is None:
            raise ValueError("high-level agent requires a model")
        policy = lambda st, mask: select_high_level(model, st, mask)
        return run_high_level_episode(world, policy, reward_params=rp,
                                      max_seconds=max_seconds)
    raise ValueError(f"unknown agent kind: {kind}")


def _agent_units(kind: str, runs: int, models: dict[str, list[SetQNet]]):
    """The independent repetitions an agent is averaged over: one per model
    for learned agents, one per seeded run for stochastic ones, else one."""
    if kind in LEARNED_AGENTS:
        nets = models.get(kind, [])
        if not nets:
            raise ValueError(f"{kind} agent requires trained models")
        return [("model", i, net) for i, net in enumerate(nets)]
    if kind in STOCHASTIC_AGENTS:
        return [("run", i, None) for i in range(runs)]
    return [("run", 0, None)]


def evaluate(agent_kinds: list[str], base_seed: int = 0, runs: int = DESK_RUNS,
             models: dict[str, list[SetQNet]] | None = None,
             densities=EVAL_DENSITIES,
             episodes_per_density: int = SCENARIOS_PER_DENSITY,
             max_seconds: float = EPISODE_SECONDS,
             include_critical: bool = False) -> dict:
    """Identical scenario seeds for every agent; per-density mean/std of the
    per-unit (run or model) average episode speeds."""
    models = models or {}
    report: dict = {
        "format_version": 1,
        "base_seed": base_seed,
        "runs": runs,
        "episode_seconds": max_seconds,
        "densities": list(densities),
        "episodes_per_density": episodes_per_density,
        "agents": {},
    }
    for kind in agent_kinds:
        units = _agent_units(kind, runs, models)
        per_density = {}
        unit_overall = [[] for _ in units]
        collisions = 0
        for density in densities:
            unit_means = []
            for u, (utype, uidx, net) in enumerate(units):
                speeds = []
                for k in range(episodes_per_density):
                    sc_seed = episode_seed(base_seed, density, k)
                    sc = generate_random_scenario(density, seed=sc_seed)
                    pseed = (base_seed, density, k, uidx)
                    res = run_agent_episode(kind, sc, model=net,
                                            policy_seed=pseed,
                                            max_seconds=max_seconds)
                    speeds.append(res.mean_speed)
                    collisions += int(res.collided)
                unit_means.append(float(np.mean(speeds)))
                unit_overall[u].extend(speeds)
            per_density[str(density)] = {
                "mean_speed": float(np.mean(unit_means)),
                "std_speed": float(np.std(unit_means)),
                "unit_means": unit_means,
            }
        overall_units = [float(np.mean(xs)) for xs in unit_overall]
        report["agents"][kind] = {
            "units": [{"type": t, "index": i} for t, i, _ in units],
            "per_density": per_density,
            "unit_overall_means": overall_units,
            "overall_mean_speed": float(np.mean(overall_units)),
            "collisions": collisions,
        }
    if include_critical:
        report["critical"] = evaluate_critical(agent_kinds, runs=runs,
                                               models=models,
                                               max_seconds=max_seconds,
                                               base_seed=base_seed)
    return report


def evaluate_critical(agent_kinds: list[str], runs: int = DESK_RUNS,
                      models: dict[str, list[SetQNet]] | None = None,
                      max_seconds: float = EPISODE_SECONDS,
                      base_seed: int = 0) -> dict:
    models = models or {}
    out: dict = {}
    for name, sc_fn in (("a", critical_scenario_a), ("b", critical_scenario_b)):
        sc = sc_fn()
        per_agent = {}
        for kind in agent_kinds:
            units = _agent_units(kind, runs, models)
            rows = []
            for utype, uidx, net in units:
                res = run_agent_episode(kind, sc, model=net,
                                        policy_seed=(base_seed, 900 + ord(name), uidx),
                                        max_seconds=max_seconds)
                rows.append({
                    "mean_speed": res.mean_speed,
                    "duration": res.duration,
                    "collided": res.collided,
                    "left_initial_lane": any(l != sc.ego_start.lane_index
                                             for l in res.lane_history),
                    "chosen_identities": sorted({str(r.chosen_identity)
                                                 for r in res.records}),
                })
            per_agent[kind] = {
                "units": rows,
                "mean_speed": float(np.mean([r["mean_speed"] for r in rows])),
                "mean_duration": float(np.mean([r["duration"] for r in rows])),
            }
        out[name] = per_agent
    return out


# ------------------------------------------------------------------ output

def write_report_json(report: dict, path: str):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_report_csv(report: dict, path: str):
    """Plot-ready rows: one line per (agent, density)."""
    with open(path, "w") as fh:
        fh.write("agent,density,mean_speed,std_speed\n")
        for kind, block in report["agents"].items():
            for density in report["densities"]:
                cell = block["per_density"][str(density)]
                fh.write(f"{kind},{density},{cell['mean_speed']!r},"
                         f"{cell['std_speed']!r}\n")


def write_critical_csv(critical: dict, path: str):
    with open(path, "w") as fh:
        fh.write("scenario,agent,mean_speed,mean_duration\n")
        for name in sorted(critical):
            for kind, block in critical[name].items():
                fh.write(f"{name},{kind},{block['mean_speed']!r},"
                         f"{block['mean_duration']!r}\n")


def write_records_jsonl(records: list[DecisionRecord], path: str):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "time": rec.time,
                "candidates": [list(c) for c in rec.candidate_identities],
                "q_values": rec.q_values,
                "chosen": list(rec.chosen_identity) if rec.chosen_identity else None,
                "reward": rec.reward,
                "fallback": rec.fallback,
            }) + "\n")
