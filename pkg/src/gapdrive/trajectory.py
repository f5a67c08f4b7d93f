"""Quintic trajectory sampling with safety gating.

Candidates are two-point boundary quintics (longitudinal s(t), lateral y(t))
over a 6 s horizon. Other vehicles are predicted at constant velocity on
their current lane. A candidate is feasible when every 0.1 s sample passes
speed, acceleration, time-to-collision, time-headway and overlap checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .world import LANE_WIDTH, VEHICLE_WIDTH, DEFAULT_LENGTH, SIM_DT, EgoControl, VehicleState, lane_center, nearest_lane

HORIZON = 6.0
CHECK_DT = 0.1
DURATIONS = (2.0, 3.0, 4.0, 5.0, 6.0)
SPEED_FACTORS = (0.6, 0.8, 1.0, 1.1)
N_OFFSETS = 5
OFFSET_MARGIN = 0.5          # extra clearance inside the gap interval, m
FREE_OFFSETS = (-20.0, -10.0, 0.0, 10.0, 20.0)

REASON_OK = "ok"
_REASONS = {0: REASON_OK, 1: "speed", 2: "acceleration", 3: "ttc", 4: "thw", 5: "overlap"}


@dataclass
class QuinticPoly:
    """p(t) = sum c[k] t^k for t in [0, duration]."""
    c: tuple[float, float, float, float, float, float]
    duration: float


@dataclass
class SafetyParams:
    ttc_min: float = 2.0
    thw_min: float = 1.0
    a_min: float = -4.0
    a_max: float = 3.0
    v_max: float = 36.0
    horizon: float = HORIZON


@dataclass
class CostWeights:
    w_j: float = 1.0
    w_d: float = 1.0
    w_v: float = 10.0
    w_g: float = 1.0


@dataclass
class TrajectoryCost:
    jerk_long: float
    jerk_lat: float
    lane_center_dev: float
    speed_dev: float
    gap_fit: float
    total: float


@dataclass
class Feasibility:
    ok: bool
    reason: str


@dataclass
class Trajectory:
    longitudinal: QuinticPoly
    lateral: QuinticPoly
    duration: float
    target_lane: int
    cost: TrajectoryCost
    feasible: bool
    reason: str


def fit_quintic(start: tuple[float, float, float], end: tuple[float, float, float],
                duration: float) -> QuinticPoly:
    """Quintic through (p,v,a) boundary tuples at t=0 and t=duration."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    p0, v0, a0 = start
    p1, v1, a1 = end
    T = float(duration)
    c0, c1, c2 = p0, v0, 0.5 * a0
    # remaining coefficients from the t=T boundary conditions, closed form
    # (a 3x3 solve per candidate dominates planning time otherwise)
    dp = p1 - (c0 + c1 * T + c2 * T * T)
    dv = v1 - (c1 + 2 * c2 * T)
    da = a1 - 2 * c2
    T2, T3 = T * T, T * T * T
    c3 = (10 * dp - 4 * dv * T + 0.5 * da * T2) / T3
    c4 = (-15 * dp + 7 * dv * T - da * T2) / (T3 * T)
    c5 = (6 * dp - 3 * dv * T + 0.5 * da * T2) / (T3 * T2)
    return QuinticPoly((c0, c1, c2, float(c3), float(c4), float(c5)), T)


def eval_poly(poly: QuinticPoly, t: float) -> tuple[float, float, float, float]:
    """(position, velocity, acceleration, jerk) at t; t must lie in [0, duration]."""
    if not (0.0 <= t <= poly.duration + 1e-12):
        raise ValueError(f"t={t} outside [0, {poly.duration}]")
    c = poly.c
    p = c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))))
    v = c[1] + t * (2 * c[2] + t * (3 * c[3] + t * (4 * c[4] + t * 5 * c[5])))
    a = 2 * c[2] + t * (6 * c[3] + t * (12 * c[4] + t * 20 * c[5]))
    j = 6 * c[3] + t * (24 * c[4] + t * 60 * c[5])
    return p, v, a, j


def integral_squared_jerk(poly: QuinticPoly) -> float:
    """Closed-form integral of squared jerk over [0, duration]."""
    _, _, _, c3, c4, c5 = poly.c
    T = poly.duration
    return (36 * c3 * c3 * T
            + 144 * c3 * c4 * T ** 2
            + (192 * c4 * c4 + 240 * c3 * c5) * T ** 3
            + 720 * c4 * c5 * T ** 4
            + 720 * c5 * c5 * T ** 5)


def predict_constant_velocity(vehicle: VehicleState, t: float) -> float:
    """Predicted longitudinal position at time t; lane is assumed unchanged."""
    return vehicle.s + vehicle.v * t


def ttc(host: tuple[float, float], reference: tuple[float, float]) -> float:
    """Time to collision between two point states (s, v) on one lane.

    The follower is whichever state is behind; returns the raw position
    difference over the closing speed, +inf when not closing.
    """
    (s_h, v_h), (s_r, v_r) = host, reference
    if s_h <= s_r:
        v_f, v_l = v_h, v_r
    else:
        v_f, v_l = v_r, v_h
    closing = v_f - v_l
    if closing <= 0.0:
        return np.inf
    return abs(s_r - s_h) / closing


def thw(host: tuple[float, float], reference: tuple[float, float]) -> float:
    """Time headway: raw position difference over follower speed; +inf at rest."""
    (s_h, v_h), (s_r, v_r) = host, reference
    v_f = v_h if s_h <= s_r else v_r
    if v_f <= 0.0:
        return np.inf
    return abs(s_r - s_h) / v_f


def _poly_rows(trajs: list[Trajectory]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lon = np.array([t.longitudinal.c for t in trajs])
    lat = np.array([t.lateral.c for t in trajs])
    dur = np.array([t.duration for t in trajs])
    return lon, lat, dur


def _eval_coeff_grid(C: np.ndarray, ts: np.ndarray, order: int) -> np.ndarray:
    """Evaluate the order-th derivative of each coefficient row on a time grid."""
    n = C.shape[1]
    ks = np.arange(n)
    D = C.copy()
    for _ in range(order):
        D = D[:, 1:] * ks[1:len(D[0]) + 1]
        ks = np.arange(D.shape[1])
    P = ts[None, :] ** np.arange(D.shape[1])[:, None]
    return D @ P


def _batch_check(lon: np.ndarray, lat: np.ndarray, duration: float,
                 relevant: list[VehicleState], safety: SafetyParams,
                 ego_length: float) -> tuple[np.ndarray, np.ndarray]:
    """Feasibility for N candidates sharing one duration.

    Returns (ok mask, reason codes); the code is the first violation in time,
    ties within a sample broken in the order speed, acceleration, ttc, thw,
    overlap.
    """
    n = lon.shape[0]
    ts = np.arange(0.0, duration + CHECK_DT / 2, CHECK_DT)
    se = _eval_coeff_grid(lon, ts, 0)      # (n, k)
    ve = _eval_coeff_grid(lon, ts, 1)
    ae = _eval_coeff_grid(lon, ts, 2)
    ye = _eval_coeff_grid(lat, ts, 0)

    code = np.zeros_like(se, dtype=np.int8)
    if relevant:
        s_j = np.array([v.s for v in relevant])
        v_j = np.array([v.v for v in relevant])
        len_j = np.array([v.length for v in relevant])
        y_j = np.array([lane_center(v.lane_index) + v.d for v in relevant])
        lane_y = np.array([lane_center(v.lane_index) for v in relevant])
        pj = s_j[None, :] + v_j[None, :] * ts[:, None]          # (k, m)
        ds = pj[None, :, :] - se[:, :, None]                    # (n, k, m)
        ego_ahead = ds < 0.0
        v_f = np.where(ego_ahead, v_j[None, None, :], ve[:, :, None])
        v_l = np.where(ego_ahead, ve[:, :, None], v_j[None, None, :])
        closing = v_f - v_l
        dist = np.abs(ds)
        with np.errstate(divide="ignore", invalid="ignore"):
            ttc_v = np.where(closing > 0.0, dist / closing, np.inf)
            thw_v = np.where(v_f > 0.0, dist / np.maximum(v_f, 1e-12), np.inf)
        in_band = np.abs(ye[:, :, None] - lane_y[None, None, :]) < 0.5 * LANE_WIDTH
        v_ttc = (in_band & (ttc_v < safety.ttc_min)).any(axis=2)
        v_thw = (in_band & (thw_v < safety.thw_min)).any(axis=2)
        lim = 0.5 * (len_j[None, None, :] + ego_length)
        v_overlap = ((dist < lim)
                     & (np.abs(ye[:, :, None] - y_j[None, None, :]) < VEHICLE_WIDTH)).any(axis=2)
        code[v_overlap] = 5
        code[v_thw] = 4
        code[v_ttc] = 3
    code[(ae < safety.a_min) | (ae > safety.a_max)] = 2
    code[(ve < 0.0) | (ve > safety.v_max)] = 1

    any_bad = (code > 0).any(axis=1)
    first = np.argmax(code > 0, axis=1)
    reasons = np.where(any_bad, code[np.arange(n), first], 0)
    return ~any_bad, reasons


def check_feasible(traj: Trajectory, ego_length: float, relevant: list[VehicleState],
                   safety: SafetyParams) -> Feasibility:
    """Safety verdict for one trajectory against constant-velocity predictions."""
    lon = np.array([traj.longitudinal.c])
    lat = np.array([traj.lateral.c])
    ok, codes = _batch_check(lon, lat, traj.duration, list(relevant), safety, ego_length)
    return Feasibility(bool(ok[0]), _REASONS[int(codes[0])])


def _lane_dev_integral(lat: np.ndarray, duration: float, y_target: float) -> np.ndarray:
    ts = np.arange(0.0, duration + CHECK_DT / 2, CHECK_DT)
    ye = _eval_coeff_grid(lat, ts, 0)
    return np.trapezoid(np.abs(ye - y_target), ts, axis=1)


def sample_trajectories(ego: VehicleState, target_lane: int, desired_speed: float,
                        safety: SafetyParams, relevant: list[VehicleState] = (),
                        gap=None, weights: CostWeights | None = None,
                        lat_state: tuple[float, float, float] | None = None) -> list[Trajectory]:
    """Candidate lattice toward target_lane: durations x terminal speeds x offsets.

    Terminal longitudinal positions come from the gap's predicted interval
    when a gap is supplied, otherwise from fixed offsets around constant
    speed extrapolation. Every candidate carries cost and feasibility.
    """
    if abs(target_lane - ego.lane_index) > 1:
        raise ValueError("only adjacent-lane targets are supported")
    weights = weights or CostWeights()
    if lat_state is None:
        lat_state = (lane_center(ego.lane_index) + ego.d, 0.0, 0.0)
    y_target = lane_center(target_lane)
    v_cap = min(desired_speed, safety.v_max)
    terminal_speeds = [max(0.0, f * v_cap) for f in SPEED_FACTORS]
    durations = [T for T in DURATIONS if T <= safety.horizon]
    # an unled gap gives no meaningful anchor ahead; fall back to offsets
    # around constant-speed extrapolation so speeding up stays expressible
    unled = gap is None or getattr(gap, "leader_id", 0) is None
    # center-fit only makes sense between two real vehicles; a virtual
    # bound would drag the center toward an arbitrary sensor-edge point
    anchored = (gap is not None and getattr(gap, "leader_id", 0) is not None
                and getattr(gap, "follower_id", 0) is not None)
    out: list[Trajectory] = []
    for T in durations:
        lat_poly = fit_quintic(lat_state, (y_target, 0.0, 0.0), T)
        jerk_lat = integral_squared_jerk(lat_poly)
        group: list[Trajectory] = []
        for v_end in terminal_speeds:
            if gap is not None and not unled:
                lo, hi = gap.predicted_interval(T)
                ends = np.linspace(lo + OFFSET_MARGIN, hi - OFFSET_MARGIN, N_OFFSETS)
            else:
                base = ego.s + ego.v * T
                ends = np.array([base + o for o in FREE_OFFSETS])
            for s_end in ends:
                lon_poly = fit_quintic((ego.s, ego.v, ego.a), (float(s_end), v_end, 0.0), T)
                jerk_lon = integral_squared_jerk(lon_poly)
                if anchored:
                    glo, ghi = gap.predicted_interval(T)
                    gap_fit = abs(float(s_end) - 0.5 * (glo + ghi))
                else:
                    gap_fit = 0.0
                speed_dev = abs(v_end - desired_speed)
                cost = TrajectoryCost(jerk_lon, jerk_lat, 0.0, speed_dev, gap_fit, 0.0)
                group.append(Trajectory(lon_poly, lat_poly, T, target_lane, cost, False, ""))
        lon_c, lat_c, _ = _poly_rows(group)
        devs = _lane_dev_integral(lat_c, T, y_target)
        ok, codes = _batch_check(lon_c, lat_c, T, list(relevant), safety, ego.length)
        for i, tr in enumerate(group):
            tr.cost.lane_center_dev = float(devs[i])
            tr.cost.total = (weights.w_j * (tr.cost.jerk_long + tr.cost.jerk_lat)
                             + weights.w_d * tr.cost.lane_center_dev
                             + weights.w_v * tr.cost.speed_dev
                             + weights.w_g * tr.cost.gap_fit)
            tr.feasible = bool(ok[i])
            tr.reason = _REASONS[int(codes[i])]
        out.extend(group)
    return out


def best_trajectory_to_gap(candidates: list[Trajectory], gap) -> Trajectory | None:
    """Lowest-cost feasible candidate ending inside the gap's interval.

    Ties break toward shorter duration, then lower longitudinal jerk.
    """
    best = None
    best_key = None
    for tr in candidates:
        if not tr.feasible:
            continue
        s_end, _, _, _ = eval_poly(tr.longitudinal, tr.duration)
        lo, hi = gap.predicted_interval(tr.duration)
        if not (lo <= s_end <= hi):
            continue
        key = (tr.cost.total, tr.duration, tr.cost.jerk_long)
        if best_key is None or key < best_key:
            best, best_key = tr, key
    return best


def controls_from_trajectory(traj: Trajectory, n_steps: int, t0: float = 0.0,
                             lane_count: int = 3) -> list[EgoControl]:
    """Ego setpoints for n_steps world substeps starting at offset t0.

    Beyond the trajectory's end the terminal speed is held and the lateral
    position frozen.
    """
    controls = []
    for k in range(n_steps):
        t = t0 + (k + 1) * SIM_DT
        if t <= traj.duration:
            s, v, a, _ = eval_poly(traj.longitudinal, t)
            y, _, _, _ = eval_poly(traj.lateral, t)
        else:
            s_T, v_T, _, _ = eval_poly(traj.longitudinal, traj.duration)
            s = s_T + v_T * (t - traj.duration)
            v, a = v_T, 0.0
            y, _, _, _ = eval_poly(traj.lateral, traj.duration)
        lane = nearest_lane(y, lane_count)
        controls.append(EgoControl(s, y - lane_center(lane), v, a, lane))
    return controls
