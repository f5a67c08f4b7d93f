"""Offline fixed-batch Q-learning over gap options.

Trains on a pre-collected JSONL dataset of transitions. Targets use two
independently initialized target networks, combined pointwise by min, and
maximize only over the gap candidates recorded as reachable at the next
step. Both targets are soft-updated toward the online network every step.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from .gaps import GapFeatures, Identity, gap_feature_vector
from .neural import (
    AdamState,
    SetQNet,
    backward,
    encode_sets,
    forward_batch,
    head_values,
    make_qnet,
    net_from_dict,
    net_to_dict,
    optimizer_step,
    parameters,
    soft_update,
)


@dataclass
class RlState:
    """Variable-size set of (d_rel, v_rel, lane_rel) triples + ego statics."""
    dynamic: list[tuple[float, float, float]]
    static: tuple[float, float, float]        # (v/v_des, ll_valid, rl_valid)


@dataclass
class Transition:
    state: RlState
    chosen_gap: GapFeatures
    chosen_identity: Identity
    reward: float
    next_state: RlState
    next_gap_candidates: list[GapFeatures]
    terminal: bool
    duration: float = 1.0
    action: int | None = None                 # high-level datasets only


@dataclass
class Hyperparams:
    training_steps: int = 75_000
    batch_size: int = 64
    gamma: float = 0.99
    tau: float = 1e-4
    learning_rate: float = 1e-4
    update: str = "soft"
    discount_by_duration: bool = False


class DatasetError(ValueError):
    pass


def _gf_to_dict(gf: GapFeatures) -> dict:
    return {"d_rel": gf.d_rel, "v_rel": gf.v_rel, "lane_rel": gf.lane_rel,
            "len": gf.len, "af": gf.af}


def _gf_from_dict(d: dict) -> GapFeatures:
    return GapFeatures(float(d["d_rel"]), float(d["v_rel"]), int(d["lane_rel"]),
                       float(d["len"]), int(d["af"]))


def transition_to_dict(tr: Transition) -> dict:
    out = {
        "format_version": 1,
        "state": {"dynamic": [list(x) for x in tr.state.dynamic],
                  "static": list(tr.state.static)},
        "chosen_gap": _gf_to_dict(tr.chosen_gap),
        "chosen_identity": list(tr.chosen_identity),
        "reward": tr.reward,
        "next_state": {"dynamic": [list(x) for x in tr.next_state.dynamic],
                       "static": list(tr.next_state.static)},
        "next_gap_candidates": [_gf_to_dict(g) for g in tr.next_gap_candidates],
        "terminal": tr.terminal,
        "duration": tr.duration,
    }
    if tr.action is not None:
        out["action"] = tr.action
    return out


def _state_from_dict(d: dict, where: str) -> RlState:
    dynamic = [tuple(float(v) for v in row) for row in d["dynamic"]]
    for row in dynamic:
        if len(row) != 3:
            raise DatasetError(f"{where}: dynamic rows must have 3 features")
        if abs(row[0]) > 1.0 + 1e-9:
            raise DatasetError(f"{where}: |d_rel| > 1 in dynamic set")
    static = tuple(float(v) for v in d["static"])
    if len(static) != 3 or static[1] not in (0.0, 1.0) or static[2] not in (0.0, 1.0):
        raise DatasetError(f"{where}: bad static features")
    return RlState(dynamic, static)


def transition_from_dict(obj: dict, line_no: int) -> Transition:
    where = f"line {line_no}"
    try:
        if obj.get("format_version") != 1:
            raise DatasetError(f"{where}: unsupported format_version")
        reward = float(obj["reward"])
        if not np.isfinite(reward):
            raise DatasetError(f"{where}: reward not finite")
        terminal = bool(obj["terminal"])
        cands = [_gf_from_dict(g) for g in obj["next_gap_candidates"]]
        if not cands and not terminal:
            raise DatasetError(f"{where}: empty next_gap_candidates on non-terminal")
        ident = obj["chosen_identity"]
        return Transition(
            state=_state_from_dict(obj["state"], where),
            chosen_gap=_gf_from_dict(obj["chosen_gap"]),
            chosen_identity=(ident[0], ident[1], ident[2]),
            reward=reward,
            next_state=_state_from_dict(obj["next_state"], where),
            next_gap_candidates=cands,
            terminal=terminal,
            duration=float(obj.get("duration", 1.0)),
            action=obj.get("action"),
        )
    except DatasetError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise DatasetError(f"{where}: malformed transition ({exc})") from exc


def write_dataset(path: str, transitions: list[Transition]):
    with open(path, "w") as fh:
        for tr in transitions:
            fh.write(json.dumps(transition_to_dict(tr)) + "\n")


def load_dataset(path: str) -> list[Transition]:
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {i}: invalid JSON ({exc})") from exc
            out.append(transition_from_dict(obj, i))
    return out


def _discount(hp: Hyperparams, duration: float) -> float:
    return hp.gamma ** duration if hp.discount_by_duration else hp.gamma


def compute_targets(minibatch: list[Transition], online: SetQNet,
                    targets: tuple[SetQNet, SetQNet], hp: Hyperparams) -> np.ndarray:
    """Regression targets y: r for terminals, else r + gamma * max over the
    recorded candidates of min(target1, target2). The online net is part of
    the signature for variants that decouple the argmax; the min composition
    does not use it."""
    t1, t2 = targets
    y = np.array([tr.reward for tr in minibatch], dtype=float)
    live = [i for i, tr in enumerate(minibatch) if not tr.terminal]
    if not live:
        return y
    if t1.gap_dim == 0:
        return _targets_high_level(minibatch, live, y, t1, t2, hp)
    sets = [minibatch[i].next_state.dynamic for i in live]
    dec1, dec2 = encode_sets(t1, sets), encode_sets(t2, sets)
    static_rows = np.array([minibatch[i].next_state.static for i in live])
    owners, rows = [], []
    for j, i in enumerate(live):
        for gf in minibatch[i].next_gap_candidates:
            owners.append(j)
            rows.append(gap_feature_vector(gf))
    owners = np.array(owners)
    G = np.vstack(rows)
    q1 = head_values(t1, dec1[owners], static_rows[owners], G)[:, 0]
    q2 = head_values(t2, dec2[owners], static_rows[owners], G)[:, 0]
    qmin = np.minimum(q1, q2)
    best = np.full(len(live), -np.inf)
    np.maximum.at(best, owners, qmin)
    for j, i in enumerate(live):
        y[i] = minibatch[i].reward + _discount(hp, minibatch[i].duration) * best[j]
    return y


def _targets_high_level(minibatch, live, y, t1, t2, hp) -> np.ndarray:
    """3-action variant: max over actions valid per the next static flags."""
    sets = [minibatch[i].next_state.dynamic for i in live]
    static_rows = np.array([minibatch[i].next_state.static for i in live])
    v1 = head_values(t1, encode_sets(t1, sets), static_rows, None)
    v2 = head_values(t2, encode_sets(t2, sets), static_rows, None)
    vmin = np.minimum(v1, v2)                     # columns: keep, left, right
    vmin[:, 1] = np.where(static_rows[:, 1] > 0, vmin[:, 1], -np.inf)
    vmin[:, 2] = np.where(static_rows[:, 2] > 0, vmin[:, 2], -np.inf)
    best = vmin.max(axis=1)
    for j, i in enumerate(live):
        y[i] = minibatch[i].reward + _discount(hp, minibatch[i].duration) * best[j]
    return y


def _predict_chosen(online: SetQNet, minibatch: list[Transition], want_cache: bool):
    sets = [tr.state.dynamic for tr in minibatch]
    static = np.array([tr.state.static for tr in minibatch])
    if online.gap_dim:
        gaps = np.vstack([gap_feature_vector(tr.chosen_gap) for tr in minibatch])
        out, cache = forward_batch(online, sets, static, gaps, want_cache)
        return out[:, 0], out, cache, None
    out, cache = forward_batch(online, sets, static, None, want_cache)
    actions = np.array([tr.action if tr.action is not None else 0 for tr in minibatch])
    return out[np.arange(len(minibatch)), actions], out, cache, actions


def train_step(buffer: list[Transition], online: SetQNet,
               targets: tuple[SetQNet, SetQNet], opt: AdamState, hp: Hyperparams,
               rng: np.random.Generator) -> float:
    loss, _ = train_step_stats(buffer, online, targets, opt, hp, rng)
    return loss


def train_step_stats(buffer, online, targets, opt, hp, rng) -> tuple[float, float]:
    """One minibatch gradient step; returns (mse loss, mean |Q| of the batch)."""
    if len(buffer) < hp.batch_size:
        raise ValueError(f"buffer has {len(buffer)} < batch_size={hp.batch_size}")
    idx = rng.choice(len(buffer), size=hp.batch_size, replace=False)
    minibatch = [buffer[i] for i in idx]
    y = compute_targets(minibatch, online, targets, hp)
    pred, out, cache, actions = _predict_chosen(online, minibatch, want_cache=True)
    err = pred - y
    loss = float(np.mean(err ** 2))
    dout = np.zeros_like(out)
    if actions is None:
        dout[:, 0] = 2.0 * err / hp.batch_size
    else:
        dout[np.arange(len(minibatch)), actions] = 2.0 * err / hp.batch_size
    grads = backward(online, cache, dout)
    optimizer_step(parameters(online), grads, opt)
    soft_update(targets[0], online, hp.tau)
    soft_update(targets[1], online, hp.tau)
    return loss, float(np.mean(np.abs(pred)))


MINIBATCH_SEED_SALT = 0xA5F3
TARGET_SEED_OFFSETS = (1, 2)


def init_networks(seed: int, high_level: bool = False) -> tuple[SetQNet, SetQNet, SetQNet]:
    """Online net + two independently initialized target nets."""
    kw = {"gap_dim": 0, "n_outputs": 3} if high_level else {}
    online = make_qnet(seed, **kw)
    t1 = make_qnet(seed + TARGET_SEED_OFFSETS[0], **kw)
    t2 = make_qnet(seed + TARGET_SEED_OFFSETS[1], **kw)
    return online, t1, t2


def save_model(path: str, online: SetQNet, t1: SetQNet, t2: SetQNet,
               hp: Hyperparams, seed: int):
    payload = {
        "format_version": 1,
        "hyperparams": asdict(hp),
        "seed": seed,
        "online": net_to_dict(online),
        "target1": net_to_dict(t1),
        "target2": net_to_dict(t2),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_model(path: str):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != 1:
        raise ValueError("unsupported model format_version")
    hp = Hyperparams(**payload["hyperparams"])
    return (net_from_dict(payload["online"]), net_from_dict(payload["target1"]),
            net_from_dict(payload["target2"]), hp, payload["seed"])


def train(dataset_path: str, hp: Hyperparams, seed: int,
          model_path: str | None = None, log_path: str | None = None,
          high_level: bool = False, checkpoint_every: int | None = None,
          log_every: int = 100):
    """Full training run; returns (online, target1, target2, log rows)."""
    buffer = load_dataset(dataset_path)
    online, t1, t2 = init_networks(seed, high_level)
    opt = AdamState.for_params(parameters(online), lr=hp.learning_rate)
    rng = np.random.default_rng(np.uint64(seed) ^ np.uint64(MINIBATCH_SEED_SALT))
    log_rows: list[tuple[int, float, float]] = []
    for step in range(1, hp.training_steps + 1):
        loss, mean_q = train_step_stats(buffer, online, (t1, t2), opt, hp, rng)
        if step % log_every == 0 or step == hp.training_steps:
            log_rows.append((step, loss, mean_q))
        if checkpoint_every and model_path and step % checkpoint_every == 0:
            save_model(model_path + ".ckpt", online, t1, t2, hp, seed)
    if model_path:
        save_model(model_path, online, t1, t2, hp, seed)
    if log_path:
        with open(log_path, "w") as fh:
            fh.write("step,loss,mean_abs_q\n")
            for step, loss, mean_q in log_rows:
                fh.write(f"{step},{loss!r},{mean_q!r}\n")
    return online, t1, t2, log_rows
