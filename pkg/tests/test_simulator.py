"""Planner, closed-loop driver, scoring, and benchmark glue."""

import json
import os

import numpy as np
import pytest

from poplab.errors import ConfigurationError, ContractViolation, ParameterError
from poplab.lanes import straight
from poplab.predictor import PredictionSet
from poplab.simulator import (AV_VID, CANDIDATE_ACCELS, ModelSim, OracleSim,
                              Scenario, ScenarioTrace, SimConfig, SimMetrics,
                              Vehicle, World, aggregate, collision_check,
                              contact_events, footprint_discs, occlusion_suite,
                              plan, platoon_min_gap, platoon_world,
                              read_benchmark_csv, read_trace, run_benchmark,
                              run_scenario, score_scenario, scenario_lanes,
                              standard_suite, write_benchmark_csv,
                              write_trace)
from poplab.simulator.planner import (PROTECTION_DTHETA, PROTECTION_DV,
                                      protection_time, protection_time_dtheta,
                                      protection_time_dv, resample_prediction,
                                      roll_profile)
from poplab.simulator.benchmark import BENCHMARK_COLUMNS
from poplab.simulator.scoring import poses_overlap


def _horner_ref(coeffs, x):
    # plain power-expansion evaluation, deliberately not Horner
    n = len(coeffs)
    return sum(c * x ** (n - 1 - i) for i, c in enumerate(coeffs))


class TestProtectionTime:
    def test_dv_at_zero(self):
        assert protection_time_dv(0.0) == -1.165

    def test_dtheta_at_zero(self):
        assert protection_time_dtheta(0.0) == -1.2735

    def test_dv_hand_value(self):
        # 3.73e-5*1e4 + 6e-6*1e3 + 1.2365e-2*1e2 + 3.338e-2*10 - 1.165
        assert abs(protection_time_dv(10.0) - 0.7843) < 1e-12

    def test_grid_matches_power_expansion(self):
        for x in np.linspace(-20.0, 20.0, 81):
            assert abs(protection_time_dv(x)
                       - _horner_ref(PROTECTION_DV, x)) < 1e-12
        for x in np.linspace(-np.pi, np.pi, 81):
            assert abs(protection_time_dtheta(x)
                       - _horner_ref(PROTECTION_DTHETA, x)) < 1e-12

    def test_combined_floors_at_zero(self):
        # both polynomials negative near the origin -> no extra margin
        assert protection_time(0.0, 0.0) == 0.0
        # large closing speed lifts the buffer through the dv branch
        assert protection_time(10.0, 0.0) == pytest.approx(0.7843)
        # the heading polynomial is negative everywhere on [-pi, pi],
        # so it never lifts the combined value by itself
        ths = np.linspace(-np.pi, np.pi, 181)
        assert max(protection_time_dtheta(t) for t in ths) < 0.0


class TestFootprint:
    def test_disc_radius(self):
        r, offs = footprint_discs(4.0, 1.8)
        assert r == pytest.approx(np.hypot(1.0, 0.9))
        assert offs == (-1.0, 1.0)

    def test_parallel_lanes_never_touch(self):
        t = np.linspace(0, 10, 21)
        a = np.stack([t * 5, np.zeros_like(t), np.zeros_like(t)], axis=1)
        b = a.copy()
        b[:, 1] = 3.5
        assert collision_check(a, (4.0, 1.8), b, (4.0, 1.8), 0.5) is None

    def test_head_on_reports_first_contact_time(self):
        t = np.arange(41) * 0.1
        a = np.stack([t * 5, np.zeros_like(t), np.zeros_like(t)], axis=1)
        b = np.stack([40 - t * 5, np.zeros_like(t),
                      np.full_like(t, np.pi)], axis=1)
        hit = collision_check(a, (4.0, 1.8), b, (4.0, 1.8), 0.1)
        # nearest discs start 38 m apart closing at 10 m/s and touch at
        # 2*hypot(1, .9) ~ 2.69 m -> t = 3.531, first grid tick 3.6
        assert hit == pytest.approx(3.6)

    def test_boundary_contact_counts(self):
        r, _ = footprint_discs(4.0, 1.8)
        a = np.array([[0.0, 0.0, 0.0]])
        # rear disc of b at exactly 2r from a's front disc
        b = np.array([[2.0 + 2.0 * r, 0.0, 0.0]])
        assert collision_check(a, (4.0, 1.8), b, (4.0, 1.8), 0.1) == 0.0
        b[0, 0] += 1e-6
        assert collision_check(a, (4.0, 1.8), b, (4.0, 1.8), 0.1) is None

    def test_single_pose_overlap_helper(self):
        assert poses_overlap([0, 0, 0, 5.0], (4.0, 1.8),
                             [3.0, 0, 0, 5.0], (4.0, 1.8))
        assert not poses_overlap([0, 0, 0, 5.0], (4.0, 1.8),
                                 [10.0, 0, 0, 5.0], (4.0, 1.8))


class TestResample:
    def test_anchored_interpolation(self):
        pts = np.array([[1.0, 0.0], [2.0, 0.0]])
        out = resample_prediction(pts, 0.5, 0.1, start_xy=(0.0, 0.0))
        assert out.shape == (11, 3)
        assert np.allclose(out[:, 0], np.r_[np.linspace(0, 1, 6),
                                            np.linspace(1.2, 2.0, 5)])
        assert np.allclose(out[:, 2], 0.0)

    def test_stationary_keeps_last_heading(self):
        pts = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
        out = resample_prediction(pts, 0.5, 0.25, start_xy=(0.0, 0.0))
        moving = out[1, 2]
        assert np.allclose(out[-1, 2], moving)


class TestPlanner:
    def _world(self, extra=()):
        lane = straight((0.0, 0.0), (200.0, 0.0), n=4, speed_limit=10.0)
        av = Vehicle(vid=AV_VID, path_id="lane", s=0.0, v=8.0, kind="av")
        return World({"lane": lane}, [av, *extra], dt=0.1)

    def test_goal_outside_route_rejected(self):
        from poplab.simulator import RouteTask
        lane = straight((0.0, 0.0), (50.0, 0.0))
        with pytest.raises(ParameterError):
            RouteTask(lane, 0.0)
        with pytest.raises(ParameterError):
            RouteTask(lane, 51.0)

    def test_no_neighbors_picks_max_progress(self):
        world = self._world()
        cfg = SimConfig()
        res = plan(world, world.paths["lane"], 0.0, {}, cfg)
        assert not res.stopped
        assert res.accel == max(CANDIDATE_ACCELS)

    def test_blocking_prediction_forces_stop(self):
        world = self._world()
        cfg = SimConfig()
        # a wall of predicted presence dead ahead for the full horizon
        traj = np.tile([12.0, 0.0], (cfg.horizon_ticks // 5, 1))[None]
        pred = PredictionSet(proposals=traj, refined=traj,
                             scales=np.ones_like(traj),
                             probs=np.array([1.0]))
        res = plan(world, world.paths["lane"], 0.0,
                   {1: (pred, np.array([12.0, 0.0, 0.0, 0.0]))}, cfg)
        assert res.stopped and res.accel == -cfg.stop_decel
        assert res.rejected  # every profile was screened out

    def test_rear_agents_are_ignored(self):
        world = self._world()
        cfg = SimConfig()
        traj = np.tile([-8.0, 0.0], (cfg.horizon_ticks // 5, 1))[None]
        pred = PredictionSet(proposals=traj, refined=traj,
                             scales=np.ones_like(traj),
                             probs=np.array([1.0]))
        res = plan(world, world.paths["lane"], 0.0,
                   {1: (pred, np.array([-8.0, 0.0, 0.0, 0.0]))}, cfg)
        assert res.checked == 0
        assert res.accel == max(CANDIDATE_ACCELS)

    def test_k_plan_controls_modes_screened(self):
        world = self._world()
        traj = np.tile([[60.0, 30.0]], (12, 1))  # far off-route
        refined = np.stack([traj, traj + 5.0, traj - 5.0])
        pred = PredictionSet(proposals=refined, refined=refined,
                             scales=np.ones_like(refined),
                             probs=np.array([0.5, 0.3, 0.2]))
        state = np.array([60.0, 30.0, 0.0, 5.0])
        for k, want in ((1, 1), (2, 2), (3, 3)):
            cfg = SimConfig(k_plan=k)
            res = plan(world, world.paths["lane"], 0.0,
                       {1: (pred, state)}, cfg)
            assert res.checked == want

    def test_speed_limit_caps_rollout(self):
        lane = straight((0.0, 0.0), (300.0, 0.0), n=4, speed_limit=9.0)
        _, _, speeds = roll_profile(lane, 0.0, 8.0, 2.0, SimConfig())
        assert speeds.max() == pytest.approx(9.0)

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            SimConfig(plan_interval=0.23)
        with pytest.raises(ParameterError):
            SimConfig(k_plan=0)


class TestClosedLoop:
    def test_oracle_run_is_contact_free_and_completes(self):
        sc = standard_suite()[0]
        cfg = SimConfig()
        tr = run_scenario(sc, OracleSim(), cfg, seed=0)
        m = score_scenario(tr, cfg)
        assert tr.completed
        assert m.ct == 0 and m.rct == 0
        assert m.dist == pytest.approx(sc.goal_s - sc.av_start)

    def test_replay_is_bit_identical(self):
        sc = standard_suite()[4]  # cross-single
        cfg = SimConfig()
        a = run_scenario(sc, OracleSim(), cfg, seed=3)
        b = run_scenario(sc, OracleSim(), cfg, seed=3)
        assert json.dumps(a.rows, sort_keys=True) == \
            json.dumps(b.rows, sort_keys=True)

    def test_seed_changes_background(self):
        sc = standard_suite()[0]
        cfg = SimConfig()
        a = run_scenario(sc, OracleSim(), cfg, seed=0)
        b = run_scenario(sc, OracleSim(), cfg, seed=1)
        assert json.dumps(a.rows) != json.dumps(b.rows)

    def test_av_vid_reserved(self):
        lane = straight((0.0, 0.0), (50.0, 0.0))
        sc = Scenario(name="bad", paths={"lane": lane}, route_id="lane",
                      vehicles=lambda seed: [Vehicle(vid=AV_VID,
                                                     path_id="lane",
                                                     s=10.0, v=5.0)])
        with pytest.raises(ContractViolation):
            sc.build(0, SimConfig())

    def test_unknown_route_rejected(self):
        lane = straight((0.0, 0.0), (50.0, 0.0))
        sc = Scenario(name="bad", paths={"lane": lane}, route_id="nope",
                      vehicles=lambda seed: [])
        with pytest.raises(ParameterError):
            sc.build(0, SimConfig())

    def test_trace_round_trip(self, tmp_path):
        sc = standard_suite()[0]
        cfg = SimConfig()
        tr = run_scenario(sc, OracleSim(), cfg, seed=0)
        p = os.path.join(tmp_path, "trace.jsonl")
        write_trace(tr, p)
        back = read_trace(p)
        assert back.rows == tr.rows
        assert back.scenario == tr.scenario and back.seed == tr.seed
        assert back.completed == tr.completed
        # rewriting produces identical bytes
        blob = open(p, "rb").read()
        write_trace(back, p)
        assert open(p, "rb").read() == blob

    def test_suite_shapes(self):
        suite = standard_suite()
        assert len(suite) == 20
        assert len({s.name for s in suite}) == 20
        fams = {t for s in suite for t in s.tags}
        assert {"follow", "cross", "left", "merge"} <= fams
        occ = occlusion_suite()
        assert len(occ) >= 5
        for sc in occ:
            world, _ = sc.build(0, SimConfig())
            assert any(v.spawn_t > 0 for v in world.vehicles
                       if v.kind == "idm")

    def test_reveal_vehicle_absent_until_spawn(self):
        sc = occlusion_suite()[0]
        cfg = SimConfig()
        tr = run_scenario(sc, OracleSim(), cfg, seed=0)
        t_seen = [r["t"] for r in tr.rows if "1" in r["agents"]]
        assert t_seen and t_seen[0] > 1.0


class TestModelSimScenes:
    def test_masks_respect_entry_tick(self):
        from poplab.predictor import ModelConfig, Predictor
        cfg = SimConfig()
        model = Predictor(ModelConfig(d=16, k_modes=3, n_layers=1,
                                      n_heads=2, n_freqs=4, t_h=8, t_f=12),
                          seed=0)
        sc = occlusion_suite()[0]
        sim = ModelSim(model, scenario_lanes(sc))
        captured = []

        orig = model.predict

        def spy(scene):
            captured.append(scene)
            return orig(scene)

        model.predict = spy
        run_scenario(sc, sim, cfg, seed=0)
        reveal_scenes = [s for s in captured if s.scene_id == "sim-1"]
        assert reveal_scenes
        first = reveal_scenes[0]
        # right after the reveal only a prefix of steps can be valid
        assert 0 < first.agents[0].mask.sum() < model.config.t_h
        # masked rows are zeroed placeholders
        hidden = ~first.agents[0].mask
        assert np.all(first.agents[0].states[hidden] == 0.0)


class TestScoring:
    def _mk_trace(self, rows):
        return ScenarioTrace(scenario="t", seed=0, av_id=AV_VID,
                             av_start_s=0.0, goal_s=100.0, rows=rows)

    def _row(self, t, av, agents=None, accels=None, a_av=0.0):
        return {"t": t, "av_state": list(av), "av_s": av[0],
                "plan_id": 0, "plan_accel": a_av, "stopped": False,
                "agents": agents or {}, "accels": accels or {},
                "predictions_digest": ""}

    def test_distance_is_route_progress(self):
        rows = [self._row(i * 0.1, [i * 1.0, 0, 0, 10.0])
                for i in range(11)]
        m = score_scenario(self._mk_trace(rows), SimConfig())
        assert m.dist == pytest.approx(10.0)

    def test_constant_accel_has_zero_jerk(self):
        rows = [self._row(i * 0.1, [i * 1.0, 0, 0, 10.0], a_av=1.0)
                for i in range(11)]
        m = score_scenario(self._mk_trace(rows), SimConfig())
        assert m.jerk == 0.0

    def test_jerk_counts_command_changes(self):
        rows = [self._row(0.0, [0, 0, 0, 5], a_av=0.0),
                self._row(0.1, [0.5, 0, 0, 5], a_av=2.0),
                self._row(0.2, [1.0, 0, 0, 5], a_av=2.0)]
        m = score_scenario(self._mk_trace(rows), SimConfig())
        # |2-0| + |2-2| over 2 gaps, per 0.1 s
        assert m.jerk == pytest.approx((2.0 + 0.0) / 2 / 0.1)

    def test_rc_averages_nearby_braking(self):
        agents = {"1": [10.0, 0.0, 0.0, 5.0], "2": [200.0, 0.0, 0.0, 5.0]}
        rows = [self._row(0.0, [0, 0, 0, 5], agents=agents,
                          accels={"1": -2.0, "2": -9.0}),
                self._row(0.1, [0.5, 0, 0, 5], agents=agents,
                          accels={"1": 1.0, "2": -9.0})]
        m = score_scenario(self._mk_trace(rows), SimConfig())
        # agent 2 sits outside the 40 m radius; accel>0 clamps to 0
        assert m.rc == pytest.approx((2.0 + 0.0) / 2)

    def test_contact_classification_partition(self):
        cfg = SimConfig()
        # frontal contact while moving -> ct
        rows = [self._row(0.0, [0, 0, 0, 5.0],
                          agents={"1": [3.0, 0.0, 0.0, 0.0]})]
        m = score_scenario(self._mk_trace(rows), cfg)
        assert (m.ct, m.rct) == (1, 0)
        # same geometry but the agent sits astern -> rct
        rows = [self._row(0.0, [0, 0, 0, 5.0],
                          agents={"1": [-3.0, 0.0, 0.0, 0.0]})]
        m = score_scenario(self._mk_trace(rows), cfg)
        assert (m.ct, m.rct) == (0, 1)
        # stationary AV is charged to neither column
        rows = [self._row(0.0, [0, 0, 0, 0.0],
                          agents={"1": [3.0, 0.0, 0.0, 0.0]})]
        m = score_scenario(self._mk_trace(rows), cfg)
        assert (m.ct, m.rct) == (0, 0)

    def test_contiguous_overlap_counts_once(self):
        cfg = SimConfig()
        touch = {"1": [3.0, 0.0, 0.0, 0.0]}
        clear = {"1": [50.0, 0.0, 0.0, 0.0]}
        rows = ([self._row(i * 0.1, [0, 0, 0, 5.0], agents=touch)
                 for i in range(5)]
                + [self._row(0.5, [0, 0, 0, 5.0], agents=clear)]
                + [self._row(0.6 + i * 0.1, [0, 0, 0, 5.0], agents=touch)
                   for i in range(3)])
        ev = contact_events(rows, cfg)
        assert [k for _, _, k in ev] == ["ct", "ct"]

    def test_empty_trace_scores_zero(self):
        m = score_scenario(self._mk_trace([]), SimConfig())
        assert m == SimMetrics(0.0, 0.0, 0.0, 0, 0)


class TestPlatoon:
    def test_long_run_keeps_positive_gaps(self):
        g = platoon_min_gap(platoon_world(6, seed=0), 2_000)
        assert g > 0.0

    def test_platoon_is_av_free(self):
        w = platoon_world(5, seed=1)
        assert w.av is None


class TestBenchmark:
    def test_rows_and_csv(self, tmp_path):
        cfg = SimConfig()
        suite = standard_suite()[:2]
        rows = run_benchmark(suite, {"oracle": OracleSim()}, cfg,
                             seeds=(0, 1))
        assert len(rows) == 4
        table = aggregate(rows)
        assert len(table) == 1 and table[0]["Method"] == "oracle"
        assert table[0]["CT"] == 0
        p = os.path.join(tmp_path, "bench.csv")
        write_benchmark_csv(rows, p)
        back = read_benchmark_csv(p)
        assert back[0]["Method"] == "oracle"
        assert back[0]["P-K"] == cfg.k_plan
        assert list(back[0]) == list(BENCHMARK_COLUMNS)
        with open(p) as f:
            assert f.readline().strip() == ",".join(BENCHMARK_COLUMNS)

    def test_needs_a_predictor(self):
        with pytest.raises(ParameterError):
            run_benchmark(standard_suite()[:1], {}, SimConfig())
