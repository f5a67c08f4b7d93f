import json

import numpy as np
import pytest

from gapdrive.world import Scenario, VehicleState, World, generate_random_scenario
from gapdrive.trajectory import SafetyParams, eval_poly, sample_trajectories
from gapdrive.gaps import enumerate_gaps
from gapdrive.learn import init_networks, load_dataset, load_model
from gapdrive.neural import parameters
from gapdrive.agents import (
    ACTION_KEEP,
    ACTION_LEFT,
    ACTION_RIGHT,
    GapPolicyRunner,
    HighLevelRunner,
    PSEUDO_GAP,
    greedy_policy,
)
from gapdrive import cli
from gapdrive.harness import (
    EVAL_DENSITIES,
    RewardParams,
    collect_dataset,
    critical_scenario_a,
    critical_scenario_b,
    episode_seed,
    evaluate,
    pseudo_random_high_level,
    reward,
    run_agent_episode,
    run_gap_episode,
    run_high_level_episode,
    write_report_csv,
    write_report_json,
)


class TestReward:
    def test_at_desired_unchanged(self):
        assert reward(30.0, RewardParams(), False) == 1.0

    def test_at_desired_changed(self):
        assert reward(30.0, RewardParams(), True) == 0.99

    def test_half_speed(self):
        assert reward(15.0, RewardParams(), False) == 0.5

    def test_standstill(self):
        assert reward(0.0, RewardParams(), False) == 0.0

    def test_above_desired_saturates(self):
        assert reward(33.0, RewardParams(), False) == 1.0
        assert reward(36.0, RewardParams(), True) == 0.99

    def test_bounds_and_penalty_offset(self):
        p = RewardParams()
        rng = np.random.default_rng(4)
        for _ in range(500):
            v = float(rng.uniform(0.0, 36.0))
            r0 = reward(v, p, False)
            r1 = reward(v, p, True)
            assert 0.0 <= r0 <= 1.0
            assert r1 == r0 + p.p_ac


@pytest.fixture(scope="module")
def episode():
    world = World(generate_random_scenario(25, seed=7))
    transitions = []
    res = run_gap_episode(world, greedy_policy(), max_seconds=20,
                          transitions=transitions)
    return res, transitions


class TestGapEpisode:
    def test_return_is_sum_of_rewards(self, episode):
        res, _ = episode
        assert res.episode_return == float(sum(res.rewards))

    def test_one_record_per_second(self, episode):
        res, _ = episode
        assert len(res.records) == len(res.rewards) == int(res.duration)
        assert len(res.lane_history) == len(res.rewards) + 1

    def test_one_transition_per_second(self, episode):
        res, transitions = episode
        assert len(transitions) == int(res.duration)

    def test_nonterminal_transitions_keep_candidates(self, episode):
        _, transitions = episode
        for tr in transitions:
            assert tr.duration == 1.0 and tr.action is None
            if not tr.terminal:
                assert tr.next_gap_candidates

    def test_association_flag_tracks_identity_changes(self, episode):
        _, transitions = episode
        prev = None
        for tr in transitions:
            ident = tr.chosen_identity
            if ident[0] is None and ident[1] is None and tr.chosen_gap == PSEUDO_GAP:
                prev = prev      # fallback second: no selection
                continue
            assert tr.chosen_gap.af == (0 if ident == prev else 1)
            prev = ident

    def test_reward_recomputable_from_transition(self, episode):
        _, transitions = episode
        p = RewardParams()
        for tr in transitions:
            v_next = tr.next_state.static[0] * p.v_des
            changed = tr.chosen_gap.af == 1
            assert tr.reward == pytest.approx(reward(v_next, p, changed), abs=1e-9)


class TestHighLevelEpisode:
    def test_transition_shapes(self):
        world = World(generate_random_scenario(20, seed=11))
        rng = np.random.default_rng(2)
        transitions = []
        run_high_level_episode(world, pseudo_random_high_level(rng),
                               max_seconds=30, transitions=transitions)
        assert transitions
        for tr in transitions:
            assert tr.action in (ACTION_KEEP, ACTION_LEFT, ACTION_RIGHT)
            assert tr.chosen_identity == (None, None, -1)
            assert tr.chosen_gap == PSEUDO_GAP
            assert tr.next_gap_candidates == [PSEUDO_GAP]
            assert 1.0 <= tr.duration <= 3.0
            # discounted sum of at most `duration` per-second rewards
            cap = sum(0.99 ** k for k in range(int(tr.duration)))
            assert tr.reward <= cap + 1e-12
        if any(tr.action != ACTION_KEEP for tr in transitions):
            assert any(tr.duration == 3.0 for tr in transitions)


class TestCollect:
    def test_exact_count_and_roundtrip(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        out = collect_dataset("options", 40, seed=5, path=str(path),
                              max_seconds=20)
        assert len(out) == 40
        loaded = load_dataset(str(path))
        assert len(loaded) == 40
        assert loaded[0].chosen_identity == out[0].chosen_identity
        assert loaded[0].reward == out[0].reward

    def test_byte_identical_repeat(self, tmp_path):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        collect_dataset("options", 30, seed=9, path=str(p1), max_seconds=15)
        collect_dataset("options", 30, seed=9, path=str(p2), max_seconds=15)
        assert p1.read_bytes() == p2.read_bytes()

    def test_high_level_kind(self, tmp_path):
        path = tmp_path / "hl.jsonl"
        out = collect_dataset("high-level", 25, seed=3, path=str(path),
                              max_seconds=30)
        assert len(out) == 25
        assert all(tr.action is not None for tr in out)
        assert {tr.duration for tr in out} <= {1.0, 2.0, 3.0}

    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            collect_dataset("nonsense", 1, seed=0)


class TestCriticalScenarioA:
    def test_reachable_set_at_start(self):
        w = World(critical_scenario_a())
        runner = GapPolicyRunner(w, greedy_policy())
        _, gapset = runner.current_gapset()
        assert {g.identity for g in gapset.gaps} == {(1, 2, 0), (None, 3, 1)}

    def test_fixed_lane_change_infeasible_at_start(self):
        w = World(critical_scenario_a())
        runner = HighLevelRunner(w, lambda st, mask: ACTION_KEEP)
        mask = runner.feasible_mask(w.sensor_view(), w.ego)
        assert mask[ACTION_KEEP] and not mask[ACTION_LEFT] and not mask[ACTION_RIGHT]

    def test_greedy_stays_in_initial_gap(self):
        res = run_agent_episode("greedy", critical_scenario_a())
        assert {r.chosen_identity for r in res.records} == {(1, 2, 0)}
        assert not res.collided and res.duration == 60.0
        assert res.mean_speed == pytest.approx(23.852539564032202, rel=1e-9)

    def test_idm_never_leaves_lane(self):
        res = run_agent_episode("idm", critical_scenario_a())
        assert set(res.lane_history) == {0}
        assert res.mean_speed == pytest.approx(23.560381217431054, rel=1e-9)


class TestCriticalScenarioB:
    def test_reachable_set_at_start(self):
        w = World(critical_scenario_b())
        runner = GapPolicyRunner(w, greedy_policy())
        _, gapset = runner.current_gapset()
        assert {g.identity for g in gapset.gaps} == {(None, 1, 0), (3, 2, 1)}

    def test_adjacent_gap_requires_braking(self):
        w = World(critical_scenario_b())
        runner = GapPolicyRunner(w, greedy_policy())
        _, gapset = runner.current_gapset()
        g1 = next(g for g in gapset.gaps if g.identity == (3, 2, 1))
        v_end = eval_poly(g1.trajectory.longitudinal, g1.trajectory.duration)[1]
        assert v_end < w.ego.v
        # and every feasible lattice candidate into that gap decelerates
        view = w.sensor_view()
        cands = sample_trajectories(w.ego, 1, 30.0, SafetyParams(), view, gap=g1)
        feasible = [t for t in cands if t.feasible]
        assert feasible
        for t in feasible:
            assert eval_poly(t.longitudinal, t.duration)[1] < w.ego.v

    def test_greedy_and_idm_stay_slow(self):
        res_g = run_agent_episode("greedy", critical_scenario_b())
        assert {r.chosen_identity for r in res_g.records} == {(None, 1, 0)}
        assert res_g.mean_speed == pytest.approx(23.946388890148683, rel=1e-9)
        res_i = run_agent_episode("idm", critical_scenario_b())
        assert set(res_i.lane_history) == {0}
        assert res_i.mean_speed == pytest.approx(23.560381217431054, rel=1e-9)


class TestEvaluate:
    def test_deterministic_and_structured(self):
        kwargs = dict(densities=(10,), episodes_per_density=2, max_seconds=15,
                      runs=2)
        r1 = evaluate(["greedy", "random"], base_seed=0, **kwargs)
        r2 = evaluate(["greedy", "random"], base_seed=0, **kwargs)
        assert json.dumps(r1, sort_keys=True) == json.dumps(r2, sort_keys=True)
        assert len(r1["agents"]["random"]["units"]) == 2
        assert len(r1["agents"]["greedy"]["units"]) == 1
        cell = r1["agents"]["random"]["per_density"]["10"]
        assert len(cell["unit_means"]) == 2
        assert cell["mean_speed"] == pytest.approx(np.mean(cell["unit_means"]))

    def test_report_writers(self, tmp_path):
        report = evaluate(["greedy"], densities=(10, 20), episodes_per_density=1,
                          max_seconds=10)
        jpath, cpath = tmp_path / "r.json", tmp_path / "r.csv"
        write_report_json(report, str(jpath))
        write_report_csv(report, str(cpath))
        assert json.loads(jpath.read_text()) == json.loads(json.dumps(report))
        lines = cpath.read_text().splitlines()
        assert lines[0] == "agent,density,mean_speed,std_speed"
        assert len(lines) == 1 + 1 * 2

    def test_episode_seed_layout(self):
        seen = {episode_seed(0, d, k) for d in EVAL_DENSITIES for k in range(10)}
        assert len(seen) == len(EVAL_DENSITIES) * 10


class TestCli:
    def test_collect_roundtrip_and_determinism(self, tmp_path):
        p1, p2 = tmp_path / "d1.jsonl", tmp_path / "d2.jsonl"
        args = ["collect", "--transitions", "25", "--seed", "3",
                "--episode-seconds", "15"]
        assert cli.main(args + ["--out", str(p1)]) == 0
        assert cli.main(args + ["--out", str(p2)]) == 0
        assert p1.read_bytes() == p2.read_bytes()
        assert len(load_dataset(str(p1))) == 25

    def test_train_zero_steps_saves_initial_networks(self, tmp_path):
        ds = tmp_path / "ds.jsonl"
        cli.main(["collect", "--transitions", "20", "--seed", "1",
                  "--episode-seconds", "15", "--out", str(ds)])
        model = tmp_path / "m.json"
        rc = cli.main(["train", "--dataset", str(ds), "--steps", "0",
                       "--seed", "11", "--out", str(model)])
        assert rc == 0
        online, t1, t2, hp, seed = load_model(str(model))
        ref_online, ref_t1, ref_t2 = init_networks(11)
        for got, ref in ((online, ref_online), (t1, ref_t1), (t2, ref_t2)):
            for a, b in zip(parameters(got), parameters(ref)):
                assert np.array_equal(a, b)
        assert seed == 11 and hp.training_steps == 0

    def test_eval_writes_deterministic_reports(self, tmp_path):
        d1, d2 = tmp_path / "e1", tmp_path / "e2"
        args = ["eval", "--agents", "greedy", "--densities", "10",
                "--episodes-per-density", "1", "--episode-seconds", "10"]
        assert cli.main(args + ["--out-dir", str(d1)]) == 0
        assert cli.main(args + ["--out-dir", str(d2)]) == 0
        assert (d1 / "eval_report.json").read_bytes() == \
            (d2 / "eval_report.json").read_bytes()
        report = json.loads((d1 / "eval_report.json").read_text())
        assert report["agents"]["greedy"]["per_density"]["10"]["mean_speed"] > 0
        assert (d1 / "eval_report.csv").read_text().startswith("agent,density")

    def test_run_critical_scenario(self, tmp_path, capsys):
        rc = cli.main(["run", "--agent", "greedy", "--critical", "a",
                       "--seconds", "20"])
        assert rc == 0
        out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert out["agent"] == "greedy" and not out["collided"]
        assert out["lanes_visited"] == [0]

    def test_run_scenario_file_with_artifacts(self, tmp_path, capsys):
        sc_path = tmp_path / "sc.json"
        sc_path.write_text(critical_scenario_b().to_json())
        trace, records = tmp_path / "t.csv", tmp_path / "r.jsonl"
        rc = cli.main(["run", "--agent", "greedy", "--scenario", str(sc_path),
                       "--seconds", "10", "--trace", str(trace),
                       "--records", str(records)])
        assert rc == 0
        assert trace.read_text().splitlines()[0].startswith("time")
        rows = [json.loads(l) for l in records.read_text().splitlines()]
        assert len(rows) == 10 and all("chosen" in r for r in rows)

    def test_plan_debug_lists_candidates(self, tmp_path):
        out = tmp_path / "cands.jsonl"
        rc = cli.main(["plan-debug", "--critical", "b", "--out", str(out)])
        assert rc == 0
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert rows and all(len(r["gap"]) == 3 for r in rows)
        assert any(r["reachable"] for r in rows)
        assert any(r["feasible"] for r in rows)

    def test_run_requires_exactly_one_scenario_source(self):
        with pytest.raises(SystemExit):
            cli.main(["run", "--agent", "greedy"])
        with pytest.raises(SystemExit):
            cli.main(["run", "--agent", "greedy", "--critical", "a",
                      "--density", "10"])

    def test_options_agent_requires_model(self):
        with pytest.raises(SystemExit):
            cli.main(["run", "--agent", "options", "--critical", "a"])

    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["bogus"])
        assert exc.value.code == 2
        capsys.readouterr()

    def test_missing_dataset_reports_error(self, tmp_path, capsys):
        rc = cli.main(["train", "--dataset", str(tmp_path / "absent.jsonl"),
                       "--steps", "1", "--out", str(tmp_path / "m.json")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err
