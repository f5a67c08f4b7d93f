"""Decision policies over planner-proposed gaps, and option execution.

Five agents share the same gap/planner machinery and differ only in how
they pick the next gap (or discrete action): the learned option picker,
uniform random, greedy-by-speed, reactive IDM, and a high-level
keep/left/right picker with fixed 3 s lane changes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .world import (
    B_EMERGENCY,
    DriverParams,
    EgoControl,
    LANE_WIDTH,
    VehicleState,
    World,
    SIM_DT,
    bumper_gap,
    idm_acceleration,
    lane_center,
)
from .trajectory import (
    SafetyParams,
    Trajectory,
    check_feasible,
    controls_from_trajectory,
    eval_poly,
    fit_quintic,
    integral_squared_jerk,
    TrajectoryCost,
)
from .gaps import (
    SENSOR_RANGE,
    Gap,
    GapFeatures,
    GapSet,
    Identity,
    enumerate_gaps,
    gap_feature_vector,
    reachable_gaps,
)
from .neural import SetQNet, encode_sets, forward_values, head_values
from .learn import RlState

REACHED_LATERAL_TOL = 0.2
ACTION_KEEP, ACTION_LEFT, ACTION_RIGHT = 0, 1, 2


def make_rl_state(view: list[VehicleState], ego: VehicleState, desired_speed: float,
                  lane_count: int, sensor_range: float = SENSOR_RANGE) -> RlState:
    """Normalized per-vehicle triples plus (speed, ll_valid, rl_valid) statics."""
    dynamic = [
        ((v.s - ego.s) / sensor_range,
         (v.v - ego.v) / desired_speed,
         float(v.lane_index - ego.lane_index))
        for v in view
    ]
    ll_valid = 1.0 if ego.lane_index < lane_count - 1 else 0.0
    rl_valid = 1.0 if ego.lane_index > 0 else 0.0
    return RlState(dynamic, (ego.v / desired_speed, ll_valid, rl_valid))


@dataclass
class OptionExecution:
    identity: Identity
    trajectory: Trajectory
    start_time: float
    status: str = "running"       # running | reached | interrupted


@dataclass
class DecisionRecord:
    time: float
    candidate_identities: list[Identity]
    q_values: list[float] | None
    chosen_identity: Identity | None
    reward: float | None = None
    fallback: bool = False


def gap_reached(gap: Gap, ego: VehicleState) -> bool:
    """Ego settled inside the gap: on its lane, centered, inside the interval."""
    if gap.lane_index != ego.lane_index or abs(ego.d) >= REACHED_LATERAL_TOL:
        return False
    lo, hi = gap.predicted_interval(0.0)
    return lo <= ego.s <= hi


def q_values_for(model: SetQNet, state: RlState, gapset: GapSet) -> np.ndarray:
    """Q for every candidate with the dynamic representation computed once."""
    m = len(gapset.gaps)
    decoded = encode_sets(model, [state.dynamic])
    static = np.asarray(state.static, dtype=float)[None, :]
    rows = np.vstack([gap_feature_vector(g.features) for g in gapset.gaps])
    vals = head_values(model, np.repeat(decoded, m, axis=0),
                       np.repeat(static, m, axis=0), rows)
    return vals[:, 0]


def select_option_aqlmap(model: SetQNet, state: RlState, gapset: GapSet) -> Gap:
    """Argmax-Q gap; ties prefer the currently associated gap (af = 0),
    then the gap closest to the ego."""
    if not gapset.gaps:
        raise ValueError("empty gap set; caller must apply the fallback")
    q = q_values_for(model, state, gapset)
    best = q.max()
    tied = [g for g, v in zip(gapset.gaps, q) if v == best]
    tied.sort(key=lambda g: (g.features.af, abs(g.features.d_rel)))
    return tied[0]


def select_random(gapset: GapSet, rng: np.random.Generator) -> Gap:
    if not gapset.gaps:
        raise ValueError("empty gap set; caller must apply the fallback")
    return gapset.gaps[int(rng.integers(len(gapset.gaps)))]


def trajectory_mean_speed(tr: Trajectory) -> float:
    s0 = eval_poly(tr.longitudinal, 0.0)[0]
    s1 = eval_poly(tr.longitudinal, tr.duration)[0]
    return (s1 - s0) / tr.duration


def select_greedy(gapset: GapSet, current_identity: Identity | None = None,
                  metric: str = "mean_speed") -> Gap:
    """Gap whose best trajectory is fastest; ties keep the current gap."""
    if not gapset.gaps:
        raise ValueError("empty gap set; caller must apply the fallback")
    if metric == "mean_speed":
        score = trajectory_mean_speed
    elif metric == "terminal_speed":
        score = lambda tr: eval_poly(tr.longitudinal, tr.duration)[1]
    else:
        raise ValueError(f"unknown greedy metric: {metric}")
    scores = [score(g.trajectory) for g in gapset.gaps]
    best = max(scores)
    tied = [g for g, v in zip(gapset.gaps, scores) if v == best]
    for g in tied:
        if g.identity == current_identity:
            return g
    return tied[0]


@dataclass
class IdmDecision:
    accel: float
    change_to: int | None


def _lane_neighbors(view: list[VehicleState], ego: VehicleState, lane: int):
    leader, follower = None, None
    for v in view:
        if v.lane_index != lane:
            continue
        if v.s > ego.s and (leader is None or v.s < leader.s):
            leader = v
        if v.s <= ego.s and (follower is None or v.s > follower.s):
            follower = v
    return follower, leader


def select_idm(view: list[VehicleState], ego: VehicleState, params: DriverParams,
               lane_count: int, consider_change: bool = True) -> IdmDecision:
    """Reactive policy: IDM acceleration, plus an eager advantageous lane
    change whenever the adjacent lane offers higher IDM acceleration and the
    insertion is IDM-safe for both the ego and the new follower."""
    _, leader = _lane_neighbors(view, ego, ego.lane_index)
    a_here = idm_acceleration(ego, leader, params)
    if not consider_change:
        return IdmDecision(a_here, None)
    best_lane, best_a = None, a_here
    for target in (ego.lane_index - 1, ego.lane_index + 1):
        if not (0 <= target < lane_count):
            continue
        follower, lead_t = _lane_neighbors(view, ego, target)
        if lead_t is not None and bumper_gap(ego.s, ego.length, lead_t.s, lead_t.length) <= params.s0:
            continue
        if follower is not None:
            rear_gap = bumper_gap(follower.s, follower.length, ego.s, ego.length)
            if rear_gap <= params.s0:
                continue
            rear_params = DriverParams(v0=max(follower.v, 1.0))
            if idm_acceleration(follower, ego, rear_params) < -rear_params.b_comf:
                continue
        a_t = idm_acceleration(ego, lead_t, params)
        if a_t > best_a + 1e-9:
            best_lane, best_a = target, a_t
    return IdmDecision(best_a if best_lane is not None else a_here, best_lane)


def select_high_level(model: SetQNet, state: RlState,
                      feasible: tuple[bool, bool, bool] = (True, True, True)) -> int:
    """Argmax over {keep, left, right}; left/right masked by the validity
    flags and by the caller's 3 s maneuver feasibility. Ties keep lane."""
    q = forward_values(model, state.dynamic, state.static)
    mask = np.array([feasible[0],
                     state.static[1] > 0 and feasible[1],
                     state.static[2] > 0 and feasible[2]])
    q = np.where(mask, q, -np.inf)
    if not mask[0] and not mask[1] and not mask[2]:
        return ACTION_KEEP
    best = q.max()
    for action in (ACTION_KEEP, ACTION_LEFT, ACTION_RIGHT):
        if q[action] == best:
            return action
    return ACTION_KEEP


def step_option(exec_: OptionExecution | None, gapset: GapSet, reselect,
                ego: VehicleState) -> OptionExecution:
    """1 Hz option bookkeeping: continue while the chosen identity stays
    reachable and unreached (with a refreshed trajectory); otherwise mark
    reached/interrupted and ask the policy for a new gap."""
    by_id = {g.identity: g for g in gapset.gaps}
    if exec_ is not None and exec_.status == "running":
        gap = by_id.get(exec_.identity)
        if gap is None:
            exec_.status = "interrupted"
        elif gap_reached(gap, ego):
            exec_.status = "reached"
        else:
            return OptionExecution(exec_.identity, gap.trajectory, exec_.start_time)
    gap = reselect(gapset)
    return OptionExecution(gap.identity, gap.trajectory, gapset.decision_time)


def fallback_brake_rate(ego: VehicleState, view, y_ego: float,
                        b_comf: float = 2.0) -> float:
    """Deceleration for the empty-set fallback: comfortable unless a slower
    vehicle ahead is closing faster than b_comf can absorb before the bumper
    margin is gone, then the kinematic requirement capped at hard braking."""
    brake = b_comf
    for other in view:
        y_other = lane_center(other.lane_index) + other.d
        # anything within one lane width can become a conflict while the
        # ego settles back to its lane center
        if abs(y_other - y_ego) >= LANE_WIDTH:
            continue
        gap = bumper_gap(ego.s, ego.length, other.s, other.length)
        closing = ego.v - other.v
        if gap < 0.0 or closing <= 0.0:
            continue
        required = 0.5 * closing * closing / max(gap - 2.0, 0.5)
        brake = max(brake, min(B_EMERGENCY, 1.25 * required))
    return brake


def fallback_trajectory(ego: VehicleState, lat_state=None, view=(),
                        b_comf: float = 2.0, duration: float = 2.0) -> Trajectory:
    """Keep-lane deceleration trajectory for the empty gap set."""
    if lat_state is None:
        lat_state = (lane_center(ego.lane_index) + ego.d, 0.0, 0.0)
    brake = fallback_brake_rate(ego, view, lat_state[0], b_comf)
    v_end = max(0.0, ego.v - brake * duration)
    s_end = ego.s + 0.5 * (ego.v + v_end) * duration
    lon = fit_quintic((ego.s, ego.v, ego.a), (s_end, v_end, 0.0), duration)
    lat = fit_quintic(lat_state, (lane_center(ego.lane_index), 0.0, 0.0), duration)
    cost = TrajectoryCost(integral_squared_jerk(lon), integral_squared_jerk(lat),
                          0.0, 0.0, 0.0, 0.0)
    return Trajectory(lon, lat, duration, ego.lane_index, cost, False, "fallback")


PSEUDO_GAP = GapFeatures(0.0, 0.0, 0, 0.0, 0)


class GapPolicyRunner:
    """Executes any gap-selecting policy at 1 Hz with option semantics.

    The policy callback receives (state, gapset) and returns a Gap; it is
    only consulted when no option is running or the running one terminated.
    """

    def __init__(self, world: World, policy, desired_speed: float | None = None,
                 safety: SafetyParams | None = None, model: SetQNet | None = None,
                 sensor_range: float = SENSOR_RANGE):
        self.world = world
        self.policy = policy
        self.desired_speed = (world.scenario.ego_desired_speed
                              if desired_speed is None else desired_speed)
        self.safety = safety or SafetyParams()
        self.model = model
        self.sensor_range = sensor_range
        self.exec: OptionExecution | None = None
        self.prev_identity: Identity | None = None
        self.lat_state: tuple[float, float, float] | None = None
        self.records: list[DecisionRecord] = []

    def current_gapset(self) -> tuple[RlState, GapSet]:
        view = self.world.sensor_view(self.sensor_range)
        ego = self.world.ego
        state = make_rl_state(view, ego, self.desired_speed, self.world.lane_count,
                              self.sensor_range)
        gaps = enumerate_gaps(view, ego, self.world.lane_count, self.sensor_range)
        gapset = reachable_gaps(gaps, ego, self.safety, view=view,
                                desired_speed=self.desired_speed,
                                previously_selected=self.prev_identity,
                                lat_state=self.lat_state,
                                decision_time=self.world.time,
                                sensor_range=self.sensor_range)
        return state, gapset

    def decide(self) -> tuple[Trajectory, DecisionRecord, RlState, GapSet]:
        state, gapset = self.current_gapset()
        ego = self.world.ego
        if not gapset.gaps:
            view = self.world.sensor_view(self.sensor_range)
            traj = fallback_trajectory(ego, self.lat_state, view=view)
            self.exec = None
            rec = DecisionRecord(self.world.time, [], None, None, fallback=True)
            return traj, rec, state, gapset
        q_vals = None
        if self.model is not None:
            q_vals = [float(v) for v in q_values_for(self.model, state, gapset)]
        self.exec = step_option(self.exec, gapset,
                                lambda gs: self.policy(state, gs), ego)
        rec = DecisionRecord(self.world.time, [g.identity for g in gapset.gaps],
                             q_vals, self.exec.identity)
        return self.exec.trajectory, rec, state, gapset

    def step_one_second(self) -> DecisionRecord:
        traj, rec, _, _ = self.decide()
        self._execute(traj)
        rec.reward = None   # filled by the harness with the post-step reward
        if rec.chosen_identity is not None:
            self.prev_identity = rec.chosen_identity
        self.records.append(rec)
        return rec

    def _execute(self, traj: Trajectory):
        controls = controls_from_trajectory(traj, int(round(1.0 / SIM_DT)),
                                            lane_count=self.world.lane_count)
        self.world.step(controls, 1.0)
        t = min(1.0, traj.duration)
        y, vy, ay, _ = eval_poly(traj.lateral, t)
        self.lat_state = (y, vy, ay)


def options_policy(model: SetQNet):
    return lambda state, gapset: select_option_aqlmap(model, state, gapset)


def random_policy(rng: np.random.Generator):
    return lambda state, gapset: select_random(gapset, rng)


def greedy_policy(current_identity_ref: dict | None = None, metric: str = "mean_speed"):
    """current_identity_ref, when given, is a one-key dict {"id": Identity}."""
    ref = current_identity_ref if current_identity_ref is not None else {"id": None}

    def pick(state, gapset):
        gap = select_greedy(gapset, ref.get("id"), metric)
        ref["id"] = gap.identity
        return gap

    return pick


class IdmAgentRunner:
    """Reactive baseline: per-substep IDM with instantaneous lane changes.

    This agent does not plan trajectories; it is the one policy exempt from
    the feasibility-gated trajectory contract.
    """

    def __init__(self, world: World, params: DriverParams | None = None):
        self.world = world
        self.params = params or DriverParams(v0=world.scenario.ego_desired_speed)

    def step_one_second(self):
        for k in range(int(round(1.0 / SIM_DT))):
            view = self.world.sensor_view(SENSOR_RANGE)
            ego = self.world.ego
            consider = k == 0   # lane-change decisions at the 1 Hz cadence
            dec = select_idm(view, ego, self.params, self.world.lane_count,
                             consider_change=consider)
            lane = ego.lane_index
            if dec.change_to is not None:
                lane = dec.change_to
            v_new = max(0.0, ego.v + dec.accel * SIM_DT)
            s_new = ego.s + 0.5 * (ego.v + v_new) * SIM_DT
            self.world.step([EgoControl(s_new, 0.0, v_new, dec.accel, lane)], SIM_DT)


class HighLevelRunner:
    """Keep/left/right agent committing to fixed 3 s lane changes."""

    LC_DURATION = 3.0

    def __init__(self, world: World, policy, desired_speed: float | None = None,
                 safety: SafetyParams | None = None):
        self.world = world
        self.policy = policy      # callback (state, feasible mask) -> action
        self.desired_speed = (world.scenario.ego_desired_speed
                              if desired_speed is None else desired_speed)
        self.safety = safety or SafetyParams()
        self.committed: list[EgoControl] | None = None
        self.last_action = ACTION_KEEP

    def lane_change_trajectory(self, ego: VehicleState, direction: int) -> Trajectory:
        """Constant-speed longitudinal + 3 s lateral move to the adjacent lane."""
        T = self.LC_DURATION
        lon = fit_quintic((ego.s, ego.v, ego.a), (ego.s + ego.v * T, ego.v, 0.0), T)
        y0 = lane_center(ego.lane_index) + ego.d
        lat = fit_quintic((y0, 0.0, 0.0), (lane_center(ego.lane_index + direction), 0.0, 0.0), T)
        cost = TrajectoryCost(integral_squared_jerk(lon), integral_squared_jerk(lat),
                              0.0, 0.0, 0.0, 0.0)
        return Trajectory(lon, lat, T, ego.lane_index + direction, cost, False, "")

    def feasible_mask(self, view, ego) -> tuple[bool, bool, bool]:
        out = [True, False, False]
        for action, direction in ((ACTION_LEFT, 1), (ACTION_RIGHT, -1)):
            target = ego.lane_index + direction
            if not (0 <= target < self.world.lane_count):
                continue
            tr = self.lane_change_trajectory(ego, direction)
            relevant = [v for v in view if v.lane_index in (ego.lane_index, target)]
            out[action] = check_feasible(tr, ego.length, relevant, self.safety).ok
        return tuple(out)

    def step_one_second(self) -> int:
        if self.committed:
            chunk, self.committed = self.committed[:10], self.committed[10:]
            self.world.step(chunk, 1.0)
            return self.last_action
        view = self.world.sensor_view(SENSOR_RANGE)
        ego = self.world.ego
        state = make_rl_state(view, ego, self.desired_speed, self.world.lane_count)
        mask = self.feasible_mask(view, ego)
        action = self.policy(state, mask)
        self.last_action = action
        if action in (ACTION_LEFT, ACTION_RIGHT):
            direction = 1 if action == ACTION_LEFT else -1
            tr = self.lane_change_trajectory(ego, direction)
            controls = controls_from_trajectory(tr, 30, lane_count=self.world.lane_count)
            self.committed = controls[10:]
            self.world.step(controls[:10], 1.0)
            return action
        self._keep_lane(view, ego, state)
        return action

    def _keep_lane(self, view, ego, state):
        gaps = enumerate_gaps(view, ego, self.world.lane_count)
        own = [g for g in gaps if g.lane_index == ego.lane_index
               and g.predicted_interval(0.0)[0] <= ego.s <= g.predicted_interval(0.0)[1]]
        gapset = reachable_gaps(own, ego, self.safety, view=view,
                                desired_speed=self.desired_speed)
        if gapset.gaps:
            traj = gapset.gaps[0].trajectory
        else:
            traj = fallback_trajectory(ego, view=view)
        controls = controls_from_trajectory(traj, 10, lane_count=self.world.lane_count)
        self.world.step(controls, 1.0)
