"""Deterministic multi-lane highway microsimulator.

Surrounding vehicles follow the Intelligent Driver Model (IDM) with an
opportunistic lane-change rule; the ego vehicle follows externally planned
setpoints exactly. All positions are body centers: a vehicle spans
[s - length/2, s + length/2] longitudinally.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

SIM_DT = 0.1                 # world integration step, s
DECISION_PERIOD = 1.0        # agent decision cadence, s
LANE_WIDTH = 3.5             # m
VEHICLE_WIDTH = 2.0          # m, collision rectangles
DEFAULT_LENGTH = 5.0         # m
B_EMERGENCY = 8.0            # m/s^2, hard braking floor
EGO_ID = 0


def lane_center(lane_index: int | np.ndarray) -> float | np.ndarray:
    """Absolute lateral coordinate of a lane center (lane 0 at y=0)."""
    return lane_index * LANE_WIDTH


def nearest_lane(y: float, lane_count: int) -> int:
    return int(np.clip(round(y / LANE_WIDTH), 0, lane_count - 1))


@dataclass
class VehicleState:
    """Kinematic state of one vehicle; s/d in meters, v in m/s, a in m/s^2."""
    id: int
    lane_index: int
    s: float
    d: float
    v: float
    a: float
    length: float = DEFAULT_LENGTH

    @property
    def y(self) -> float:
        return lane_center(self.lane_index) + self.d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "VehicleState":
        return cls(**data)


@dataclass
class DriverParams:
    """IDM parameters plus the per-second lane-change attempt probability."""
    v0: float = 25.0
    T: float = 1.5
    a_max: float = 1.5
    b_comf: float = 2.0
    s0: float = 2.0
    delta: float = 4.0
    lane_change_prob_per_s: float = 0.03

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DriverParams":
        return cls(**data)


@dataclass
class Scenario:
    lane_count: int
    road_length: float
    vehicles: list[tuple[VehicleState, DriverParams]]
    ego_start: VehicleState
    ego_desired_speed: float
    seed: int
    max_duration: float = 60.0

    def to_json(self) -> str:
        payload = {
            "format_version": 1,
            "lane_count": self.lane_count,
            "road_length": self.road_length,
            "ego_start": self.ego_start.to_dict(),
            "ego_desired_speed": self.ego_desired_speed,
            "seed": self.seed,
            "max_duration": self.max_duration,
            "vehicles": [
                {"state": st.to_dict(), "driver": dp.to_dict()}
                for st, dp in self.vehicles
            ],
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        payload = json.loads(text)
        version = payload.get("format_version")
        if version != 1:
            raise ValueError(f"unsupported scenario format_version: {version!r}")
        return cls(
            lane_count=payload["lane_count"],
            road_length=payload["road_length"],
            vehicles=[
                (VehicleState.from_dict(v["state"]), DriverParams.from_dict(v["driver"]))
                for v in payload["vehicles"]
            ],
            ego_start=VehicleState.from_dict(payload["ego_start"]),
            ego_desired_speed=payload["ego_desired_speed"],
            seed=payload["seed"],
            max_duration=payload["max_duration"],
        )


@dataclass
class WorldState:
    time: float
    vehicles: list[VehicleState]
    ego: VehicleState
    collision_flag: bool


@dataclass
class EgoControl:
    """One ego setpoint per simulation substep; d is relative to lane_index."""
    s: float
    d: float
    v: float
    a: float
    lane_index: int


def bumper_gap(follower_s: float, follower_len: float, leader_s: float, leader_len: float) -> float:
    """Bumper-to-bumper distance between a follower and its leader (centers in)."""
    return leader_s - follower_s - 0.5 * (leader_len + follower_len)


def idm_acceleration(follower: VehicleState, leader: VehicleState | None,
                     params: DriverParams) -> float:
    """IDM car-following acceleration, clamped to [-B_EMERGENCY, a_max].

    a = a_max * [1 - (v/v0)^delta - (s*/s)^2] with the desired gap
    s* = s0 + max(0, v*T + v*dv / (2*sqrt(a_max*b_comf))); without a leader
    only the free-road term remains. A non-positive bumper gap returns the
    emergency value -B_EMERGENCY.
    """
    free = params.a_max * (1.0 - (follower.v / params.v0) ** params.delta)
    if leader is None:
        return float(np.clip(free, -B_EMERGENCY, params.a_max))
    gap = bumper_gap(follower.s, follower.length, leader.s, leader.length)
    if gap <= 0.0:
        return -B_EMERGENCY
    dv = follower.v - leader.v
    s_star = params.s0 + max(
        0.0, follower.v * params.T + follower.v * dv / (2.0 * np.sqrt(params.a_max * params.b_comf))
    )
    acc = free - params.a_max * (s_star / gap) ** 2
    return float(np.clip(acc, -B_EMERGENCY, params.a_max))


def sensor_view(state: WorldState, range_m: float) -> list[VehicleState]:
    """Vehicles within +-range_m of the ego longitudinally, any lane (closed bound)."""
    return [v for v in state.vehicles if abs(v.s - state.ego.s) <= range_m]


class World:
    """Simulation state holder; deterministic given (scenario, ego controls).

    Surrounding vehicle state lives in flat arrays; VehicleState objects are
    snapshots. Set constant_velocity=True to freeze surrounding vehicles at
    their initial speeds (no IDM, no lane changes).
    """

    def __init__(self, scenario: Scenario, constant_velocity: bool = False):
        self.scenario = scenario
        self.lane_count = scenario.lane_count
        self.road_length = scenario.road_length
        self.constant_velocity = constant_velocity
        self.time = 0.0
        self.collision_flag = False
        self.ego_collision_flag = False
        self._rng = np.random.default_rng(np.uint64(scenario.seed) ^ np.uint64(0x9E3779B97F4A7C15))

        n = len(scenario.vehicles)
        self.ids = np.array([st.id for st, _ in scenario.vehicles], dtype=np.int64)
        self.lane = np.array([st.lane_index for st, _ in scenario.vehicles], dtype=np.int64)
        self.s = np.array([st.s for st, _ in scenario.vehicles], dtype=float)
        self.d = np.array([st.d for st, _ in scenario.vehicles], dtype=float)
        self.v = np.array([st.v for st, _ in scenario.vehicles], dtype=float)
        self.a = np.array([st.a for st, _ in scenario.vehicles], dtype=float)
        self.length = np.array([st.length for st, _ in scenario.vehicles], dtype=float)
        self.p_v0 = np.array([dp.v0 for _, dp in scenario.vehicles], dtype=float)
        self.p_T = np.array([dp.T for _, dp in scenario.vehicles], dtype=float)
        self.p_amax = np.array([dp.a_max for _, dp in scenario.vehicles], dtype=float)
        self.p_bcomf = np.array([dp.b_comf for _, dp in scenario.vehicles], dtype=float)
        self.p_s0 = np.array([dp.s0 for _, dp in scenario.vehicles], dtype=float)
        self.p_delta = np.array([dp.delta for _, dp in scenario.vehicles], dtype=float)
        self.p_lc = np.array([dp.lane_change_prob_per_s for _, dp in scenario.vehicles], dtype=float)
        assert n == 0 or len(np.unique(self.ids)) == n, "vehicle ids must be unique"

        e = scenario.ego_start
        self.ego_lane = e.lane_index
        self.ego_s = e.s
        self.ego_d = e.d
        self.ego_v = e.v
        self.ego_a = e.a
        self.ego_length = e.length
        self.trace: list[tuple] = []
        self.record_trace = False

    # ------------------------------------------------------------------ views

    @property
    def ego(self) -> VehicleState:
        return VehicleState(EGO_ID, self.ego_lane, self.ego_s, self.ego_d,
                            self.ego_v, self.ego_a, self.ego_length)

    def vehicle_states(self) -> list[VehicleState]:
        return [
            VehicleState(int(self.ids[i]), int(self.lane[i]), float(self.s[i]),
                         float(self.d[i]), float(self.v[i]), float(self.a[i]),
                         float(self.length[i]))
            for i in range(len(self.ids))
        ]

    def state(self) -> WorldState:
        return WorldState(self.time, self.vehicle_states(), self.ego, self.collision_flag)

    def sensor_view(self, range_m: float = 80.0) -> list[VehicleState]:
        mask = np.abs(self.s - self.ego_s) <= range_m
        idx = np.nonzero(mask)[0]
        return [
            VehicleState(int(self.ids[i]), int(self.lane[i]), float(self.s[i]),
                         float(self.d[i]), float(self.v[i]), float(self.a[i]),
                         float(self.length[i]))
            for i in idx
        ]

    # ------------------------------------------------------------------ dynamics

    def _leaders(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per surrounding vehicle: leader gap, leader speed, has_leader (ego included)."""
        n = len(self.s)
        s_all = np.append(self.s, self.ego_s)
        lane_all = np.append(self.lane, self.ego_lane)
        v_all = np.append(self.v, self.ego_v)
        len_all = np.append(self.length, self.ego_length)
        order = np.lexsort((s_all, lane_all))
        gap = np.full(n + 1, np.inf)
        lead_v = np.zeros(n + 1)
        has = np.zeros(n + 1, dtype=bool)
        for k in range(len(order) - 1):
            i, j = order[k], order[k + 1]
            if lane_all[i] == lane_all[j]:
                gap[i] = s_all[j] - s_all[i] - 0.5 * (len_all[i] + len_all[j])
                lead_v[i] = v_all[j]
                has[i] = True
        return gap[:n], lead_v[:n], has[:n]

    def _idm_step(self, dt: float):
        if len(self.s) == 0:
            return
        if self.constant_velocity:
            self.a[:] = 0.0
            self.s += self.v * dt
            return
        gap, lead_v, has = self._leaders()
        free = self.p_amax * (1.0 - (self.v / self.p_v0) ** self.p_delta)
        dv = self.v - lead_v
        s_star = self.p_s0 + np.maximum(
            0.0, self.v * self.p_T + self.v * dv / (2.0 * np.sqrt(self.p_amax * self.p_bcomf))
        )
        with np.errstate(divide="ignore", invalid="ignore"):
            interaction = np.where(has, (s_star / gap) ** 2, 0.0)
        acc = np.clip(free - self.p_amax * interaction, -B_EMERGENCY, self.p_amax)
        acc = np.where(has & (gap <= 0.0), -B_EMERGENCY, acc)
        v_new = np.maximum(0.0, self.v + acc * dt)
        self.s += 0.5 * (self.v + v_new) * dt
        self.a = acc
        self.v = v_new

    def _attempt_lane_changes(self):
        """Once per second: each vehicle may teleport to an adjacent lane center."""
        if self.constant_velocity or len(self.s) == 0:
            return
        for i in np.argsort(self.ids):
            if self._rng.random() >= self.p_lc[i]:
                continue
            best = self._lane_change_target(int(i))
            if best is not None:
                self.lane[i] = best
                self.d[i] = 0.0

    def _lane_change_target(self, i: int) -> int | None:
        s_all = np.append(self.s, self.ego_s)
        lane_all = np.append(self.lane, self.ego_lane)
        v_all = np.append(self.v, self.ego_v)
        len_all = np.append(self.length, self.ego_length)

        def front_gap(lane: int) -> tuple[float, float]:
            mask = (lane_all == lane) & (s_all > self.s[i])
            if not mask.any():
                return np.inf, np.inf
            j = np.nonzero(mask)[0][np.argmin(s_all[mask])]
            return (s_all[j] - self.s[i] - 0.5 * (len_all[j] + self.length[i]), v_all[j])

        def rear_gap(lane: int) -> tuple[float, float, float]:
            mask = (lane_all == lane) & (s_all <= self.s[i])
            mask[i] = False
            if not mask.any():
                return np.inf, 0.0, 0.0
            j = np.nonzero(mask)[0][np.argmax(s_all[mask])]
            return (self.s[i] - s_all[j] - 0.5 * (len_all[j] + self.length[i]), v_all[j], len_all[j])

        me = VehicleState(int(self.ids[i]), int(self.lane[i]), float(self.s[i]), 0.0,
                          float(self.v[i]), float(self.a[i]), float(self.length[i]))
        params = DriverParams(self.p_v0[i], self.p_T[i], self.p_amax[i], self.p_bcomf[i],
                              self.p_s0[i], self.p_delta[i], self.p_lc[i])
        g_cur, _ = front_gap(int(self.lane[i]))
        best_lane, best_gap = None, g_cur
        for target in (int(self.lane[i]) - 1, int(self.lane[i]) + 1):
            if not (0 <= target < self.lane_count):
                continue
            g_front, v_front = front_gap(target)
            g_rear, v_rear, len_rear = rear_gap(target)
            if g_front <= self.p_s0[i] or g_rear <= self.p_s0[i]:
                continue
            # would the planned insertion force hard braking on either side?
            if np.isfinite(g_front):
                lead_s = self.s[i] + g_front + 0.5 * (self.length[i] + DEFAULT_LENGTH)
                lead = VehicleState(-1, target, lead_s, 0.0, v_front, 0.0, DEFAULT_LENGTH)
                if idm_acceleration(me, lead, params) < -params.b_comf:
                    continue
            if np.isfinite(g_rear):
                rear = VehicleState(-2, target, self.s[i] - g_rear - 0.5 * (self.length[i] + len_rear),
                                    0.0, v_rear, 0.0, len_rear)
                rear_params = DriverParams(v0=max(v_rear, 1.0))
                if idm_acceleration(rear, me, rear_params) < -rear_params.b_comf:
                    continue
            if g_front > best_gap:
                best_lane, best_gap = target, g_front
        return best_lane

    def _check_collisions(self):
        s_all = np.append(self.s, self.ego_s)
        len_all = np.append(self.length, self.ego_length)
        y_all = np.append(lane_center(self.lane) + self.d,
                          lane_center(self.ego_lane) + self.ego_d)
        n = len(s_all)
        if n < 2:
            return
        ds = np.abs(s_all[:, None] - s_all[None, :])
        lim = 0.5 * (len_all[:, None] + len_all[None, :])
        dy = np.abs(y_all[:, None] - y_all[None, :])
        hit = (ds < lim) & (dy < VEHICLE_WIDTH)
        np.fill_diagonal(hit, False)
        if hit.any():
            self.collision_flag = True
        if hit[-1].any():
            self.ego_collision_flag = True

    def _remove_departed(self):
        keep = self.s - 0.5 * self.length <= self.road_length
        if not keep.all():
            for name in ("ids", "lane", "s", "d", "v", "a", "length", "p_v0", "p_T",
                         "p_amax", "p_bcomf", "p_s0", "p_delta", "p_lc"):
                setattr(self, name, getattr(self, name)[keep])

    def step(self, ego_controls: list[EgoControl], dt: float) -> WorldState:
        """Advance the world by dt (a positive multiple of SIM_DT).

        ego_controls must provide one setpoint per substep; the ego follows
        them exactly. Collisions are flagged, never raised.
        """
        if dt <= 0:
            raise ValueError("dt must be positive")
        n_sub = int(round(dt / SIM_DT))
        if abs(n_sub * SIM_DT - dt) > 1e-9 or n_sub < 1:
            raise ValueError(f"dt must be a multiple of SIM_DT={SIM_DT}")
        if len(ego_controls) < n_sub:
            raise ValueError("ego_controls must cover at least dt")
        for k in range(n_sub):
            self._idm_step(SIM_DT)
            c = ego_controls[k]
            self.ego_s, self.ego_d, self.ego_v, self.ego_a = c.s, c.d, c.v, c.a
            self.ego_lane = c.lane_index
            self.time = round(self.time + SIM_DT, 9)
            # lane-change attempts on whole-second boundaries
            if abs(self.time - round(self.time)) < 1e-9:
                self._attempt_lane_changes()
            self._remove_departed()
            self._check_collisions()
            if self.record_trace:
                self._record()
        return self.state()

    def hold_ego_controls(self, duration: float) -> list[EgoControl]:
        """Constant-velocity ego setpoints (keep lane, keep speed) covering duration."""
        n = int(round(duration / SIM_DT))
        return [
            EgoControl(self.ego_s + self.ego_v * SIM_DT * (k + 1), self.ego_d,
                       self.ego_v, 0.0, self.ego_lane)
            for k in range(n)
        ]

    def _record(self):
        self.trace.append((self.time, EGO_ID, self.ego_lane, self.ego_s, self.ego_d,
                           self.ego_v, self.ego_a))
        for i in range(len(self.ids)):
            self.trace.append((self.time, int(self.ids[i]), int(self.lane[i]),
                               float(self.s[i]), float(self.d[i]), float(self.v[i]),
                               float(self.a[i])))


def step_world(world: "World", ego_controls: list[EgoControl], dt: float) -> WorldState:
    """Advance a World by dt; see World.step."""
    return world.step(ego_controls, dt)


def write_trace_csv(trace: list[tuple], path: str):
    with open(path, "w") as fh:
        fh.write("time,id,lane,s,d,v,a\n")
        for row in trace:
            fh.write(",".join(repr(x) if isinstance(x, float) else str(x) for x in row) + "\n")


DEFAULT_ROAD_LENGTH = 2500.0
DEFAULT_PLACEMENT_SPAN = (0.0, 1500.0)
MIN_SPAWN_GAP = 8.0
EGO_CLEARANCE = 15.0
SPEED_RANGE = (12.0, 30.0)


def generate_random_scenario(n_vehicles: int, seed: int,
                             lane_count: int = 3,
                             road_length: float = DEFAULT_ROAD_LENGTH,
                             ego_desired_speed: float = 30.0,
                             max_duration: float = 60.0,
                             lane_change_prob_per_s: float = 0.03) -> Scenario:
    """Random highway scenario: n IDM vehicles placed without same-lane overlap.

    Identical (n_vehicles, seed) inputs yield an identical Scenario. Desired
    speeds are uniform in SPEED_RANGE; the remaining driver parameters are
    standard values jittered +-10% per vehicle.
    """
    if not (0 <= n_vehicles <= 80):
        raise ValueError("n_vehicles must be in [0, 80]")
    rng = np.random.default_rng(seed)
    ego = VehicleState(EGO_ID, lane_index=1, s=100.0, d=0.0, v=25.0, a=0.0,
                       length=DEFAULT_LENGTH)
    placed: list[tuple[int, float]] = []
    vehicles: list[tuple[VehicleState, DriverParams]] = []
    lo, hi = DEFAULT_PLACEMENT_SPAN
    for vid in range(1, n_vehicles + 1):
        ok = False
        for _ in range(200):
            lane = int(rng.integers(0, lane_count))
            s = float(rng.uniform(lo, hi))
            if lane == ego.lane_index and abs(s - ego.s) < DEFAULT_LENGTH + EGO_CLEARANCE:
                continue
            if any(pl == lane and abs(ps - s) < DEFAULT_LENGTH + MIN_SPAWN_GAP
                   for pl, ps in placed):
                continue
            ok = True
            break
        if not ok:
            raise ValueError(f"could not place vehicle {vid} without overlap")
        v0 = float(rng.uniform(*SPEED_RANGE))
        jitter = rng.uniform(0.9, 1.1, size=4)
        params = DriverParams(
            v0=v0,
            T=1.5 * float(jitter[0]),
            a_max=1.5 * float(jitter[1]),
            b_comf=2.0 * float(jitter[2]),
            s0=2.0 * float(jitter[3]),
            delta=4.0,
            lane_change_prob_per_s=lane_change_prob_per_s,
        )
        vehicles.append((VehicleState(vid, lane, s, 0.0, v0, 0.0, DEFAULT_LENGTH), params))
        placed.append((lane, s))
    return Scenario(
        lane_count=lane_count,
        road_length=road_length,
        vehicles=vehicles,
        ego_start=ego,
        ego_desired_speed=ego_desired_speed,
        seed=seed,
        max_duration=max_duration,
    )
