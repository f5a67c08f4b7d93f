"""Gap enumeration, gap action features, and planner-based reachability.

A gap is the space between two same-lane vehicles (or a virtual boundary at
sensor range). Gaps on the ego lane and both adjacent lanes are proposed;
a gap is reachable when the trajectory sampler finds at least one feasible
candidate ending inside it within the horizon.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .world import VehicleState
from .trajectory import (
    SafetyParams,
    CostWeights,
    Trajectory,
    best_trajectory_to_gap,
    sample_trajectories,
)

SENSOR_RANGE = 80.0

Identity = tuple[int | None, int | None, int]


@dataclass
class GapFeatures:
    """Continuous action features; len is the raw bound-to-bound distance."""
    d_rel: float
    v_rel: float
    lane_rel: int
    len: float
    af: int


@dataclass
class Gap:
    lane_index: int
    follower_id: int | None
    leader_id: int | None
    follower_pos: float        # bound positions; virtual bounds sit at +-sensor range
    leader_pos: float
    follower_bumper: float     # front bumper of the follower (equals pos if virtual)
    leader_bumper: float       # rear bumper of the leader
    follower_speed: float
    leader_speed: float
    ego_length: float
    features: GapFeatures | None = None
    trajectory: Trajectory | None = None

    @property
    def identity(self) -> Identity:
        return (self.follower_id, self.leader_id, self.lane_index)

    @property
    def reference_speed(self) -> float:
        return 0.5 * (self.follower_speed + self.leader_speed)

    @property
    def reference_position(self) -> float:
        return 0.5 * (self.follower_bumper + self.leader_bumper)

    def predicted_interval(self, t: float) -> tuple[float, float]:
        """Admissible interval for the ego center at time t (bounds move at
        their constant speeds)."""
        lo = self.follower_bumper + 0.5 * self.ego_length + self.follower_speed * t
        hi = self.leader_bumper - 0.5 * self.ego_length + self.leader_speed * t
        return lo, hi


@dataclass
class GapSet:
    decision_time: float
    gaps: list[Gap]


def enumerate_gaps(view: list[VehicleState], ego: VehicleState, lane_count: int,
                   sensor_range: float = SENSOR_RANGE) -> list[Gap]:
    """All gaps on the ego lane and adjacent lanes, sorted rear to front.

    A lane with k vehicles yields k+1 gaps; missing bounds become virtual
    boundaries at ego.s +- sensor_range moving at the gap's reference speed.
    """
    out: list[Gap] = []
    for lane in (ego.lane_index - 1, ego.lane_index, ego.lane_index + 1):
        if not (0 <= lane < lane_count):
            continue
        vehs = sorted((v for v in view if v.lane_index == lane),
                      key=lambda v: (v.s, v.id))
        bounds: list[VehicleState | None] = [None] + list(vehs) + [None]
        for i in range(len(vehs) + 1):
            f, l = bounds[i], bounds[i + 1]
            if f is not None:
                v_f = f.v
            elif l is not None:
                v_f = l.v
            else:
                v_f = ego.v
            if l is not None:
                v_l = l.v
            elif f is not None:
                v_l = f.v
            else:
                v_l = ego.v
            out.append(Gap(
                lane_index=lane,
                follower_id=f.id if f else None,
                leader_id=l.id if l else None,
                follower_pos=f.s if f else ego.s - sensor_range,
                leader_pos=l.s if l else ego.s + sensor_range,
                follower_bumper=(f.s + 0.5 * f.length) if f else ego.s - sensor_range,
                leader_bumper=(l.s - 0.5 * l.length) if l else ego.s + sensor_range,
                follower_speed=v_f,
                leader_speed=v_l,
                ego_length=ego.length,
            ))
    return out


def gap_features(gap: Gap, ego: VehicleState, desired_speed: float,
                 previously_selected: Identity | None = None,
                 sensor_range: float = SENSOR_RANGE) -> GapFeatures:
    """Action features: relative midpoint position, relative mean speed,
    relative lane, raw length, and the association flag."""
    d_rel = (gap.reference_position - ego.s) / sensor_range
    v_rel = (gap.reference_speed - ego.v) / desired_speed
    lane_rel = gap.lane_index - ego.lane_index
    length = gap.leader_pos - gap.follower_pos
    af = 0 if gap.identity == previously_selected else 1
    return GapFeatures(d_rel, v_rel, lane_rel, length, af)


def gap_feature_vector(gf: GapFeatures, sensor_range: float = SENSOR_RANGE) -> np.ndarray:
    """Network input: len normalized by sensor range, the rest as stored."""
    return np.array([gf.d_rel, gf.v_rel, float(gf.lane_rel),
                     gf.len / sensor_range, float(gf.af)])


def reachable_gaps(gaps: list[Gap], ego: VehicleState, safety: SafetyParams,
                   view: list[VehicleState] = (), desired_speed: float = 30.0,
                   previously_selected: Identity | None = None,
                   weights: CostWeights | None = None,
                   lat_state: tuple[float, float, float] | None = None,
                   decision_time: float = 0.0,
                   sensor_range: float = SENSOR_RANGE) -> GapSet:
    """Subset of gaps with a feasible best trajectory, features attached."""
    reachable: list[Gap] = []
    for gap in gaps:
        relevant = [v for v in view
                    if v.lane_index in (ego.lane_index, gap.lane_index)]
        cands = sample_trajectories(ego, gap.lane_index, desired_speed, safety,
                                    relevant, gap=gap, weights=weights,
                                    lat_state=lat_state)
        best = best_trajectory_to_gap(cands, gap)
        if best is None:
            continue
        gap.trajectory = best
        gap.features = gap_features(gap, ego, desired_speed, previously_selected,
                                    sensor_range)
        reachable.append(gap)
    return GapSet(decision_time, reachable)
