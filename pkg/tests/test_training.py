"""Loss arithmetic (hand-checked values), winner-take-all behavior, the
stage curriculum, and the frozen-teacher guarantee."""

import csv
import math

import numpy as np
import pytest

from poplab import diffcore as dc
from poplab.datagen import GenConfig, generate_dataset
from poplab.diffcore import Tensor
from poplab.diffcore.check import grad_check
from poplab.diffcore.layers import ParamStore
from poplab.errors import (ConfigurationError, ContractViolation,
                           ParameterError)
from poplab.predictor import FeatureTaps, ModelConfig, Predictor
from poplab.scene import MaskSpec
from poplab.training import (
    LOG_COLUMNS,
    LossBreakdown,
    StageBudget,
    StageConfig,
    cv_recon_error,
    eval_distill_gap,
    eval_recon_error,
    focal_future_local,
    loss_cls,
    loss_distill,
    loss_mf,
    loss_recons,
    nll_wta,
    run_ablation,
    scene_loss,
    train_stage,
    train_strategy,
    write_training_log,
)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(GenConfig(n_scenes=14, max_agents=4), seed=17)


def tiny_model(recon=False, seed=3):
    return Predictor(ModelConfig(d=16, k_modes=3, n_layers=1, n_heads=2,
                                 n_freqs=4, recon_head=recon), seed=seed)


# -- winner-take-all NLL -------------------------------------------------------


class TestNllWta:
    def test_perfect_prediction_unit_scale_gives_log_two(self):
        gt = np.cumsum(np.ones((8, 2)), axis=0)
        traj = gt[None].repeat(3, axis=0)
        l, best = nll_wta(traj, None, gt)
        assert best == 0
        assert abs(float(l.data) - math.log(2.0)) < 1e-12

    def test_winner_is_smallest_endpoint_error(self):
        gt = np.zeros((5, 2))
        a = np.zeros((5, 2))
        a[-1] = [3.0, 0.0]
        b = np.zeros((5, 2))
        b[-1] = [1.0, 0.0]
        _, best = nll_wta(np.stack([a, b]), None, gt)
        assert best == 1

    def test_endpoint_tie_goes_to_lower_index(self):
        gt = np.zeros((4, 2))
        a = np.zeros((4, 2))
        a[-1] = [2.0, 0.0]
        b = np.zeros((4, 2))
        b[-1] = [0.0, 2.0]
        _, best = nll_wta(np.stack([a, b]), None, gt)
        assert best == 0

    def test_non_best_mode_is_ignored(self):
        rng = np.random.default_rng(4)
        gt = rng.normal(0, 5, (6, 2))
        good = gt + 0.1
        bad = gt + 50.0
        l1, _ = nll_wta(np.stack([good, bad]), None, gt)
        l2, _ = nll_wta(np.stack([good, bad * 2.0]), None, gt)
        assert float(l1.data) == float(l2.data)

    def test_gradient_reaches_only_the_winner(self):
        gt = np.zeros((4, 2))
        traj = Tensor(np.stack([np.full((4, 2), 0.5),
                                np.full((4, 2), 9.0)]), requires_grad=True)
        l, best = nll_wta(traj, None, gt)
        l.backward()
        assert best == 0
        assert np.any(traj.grad[0] != 0)
        assert np.all(traj.grad[1] == 0)

    def test_scale_validation(self):
        gt = np.zeros((3, 2))
        traj = np.zeros((1, 3, 2))
        with pytest.raises(ContractViolation):
            nll_wta(traj, np.zeros((1, 3, 2)), gt)
        with pytest.raises(ContractViolation):
            nll_wta(traj, None, np.full((3, 2), np.nan))

    def test_explicit_unit_scales_match_default(self):
        rng = np.random.default_rng(8)
        gt = rng.normal(0, 3, (5, 2))
        traj = rng.normal(0, 3, (2, 5, 2))
        l_none, _ = nll_wta(traj, None, gt)
        l_one, _ = nll_wta(traj, np.ones_like(traj), gt)
        assert float(l_none.data) == float(l_one.data)

    def test_hand_value_with_nonunit_scale(self):
        # |1.5|/0.5 + log(2*0.5) = 3.0 at every entry
        gt = np.zeros((2, 2))
        traj = np.full((1, 2, 2), 1.5)
        l, _ = nll_wta(traj, np.full((1, 2, 2), 0.5), gt)
        assert abs(float(l.data) - 3.0) < 1e-12


class TestLossCls:
    def test_certain_winner_costs_nothing(self):
        assert float(loss_cls(np.array([1.0, 0.0, 0.0]), 0).data) == 0.0

    def test_uniform_six_modes(self):
        p = np.full(6, 1.0 / 6.0)
        assert abs(float(loss_cls(p, 2).data) - math.log(6.0)) < 1e-12

    def test_half_probability(self):
        p = np.array([0.5, 0.5])
        assert abs(float(loss_cls(p, 1).data) - math.log(2.0)) < 1e-12


class TestLossRecons:
    def test_single_dropped_step_off_by_three_four(self):
        t_h = 6
        states = np.zeros((t_h, 4))
        recon = np.zeros((t_h, 4))
        recon[2, :2] = [3.0, 4.0]
        orig = np.ones(t_h, dtype=bool)
        applied = orig.copy()
        applied[2] = False
        l = loss_recons(recon, states, orig, applied)
        assert abs(float(l.data) - 12.5) < 1e-12

    def test_exact_reconstruction_is_free(self):
        rng = np.random.default_rng(0)
        states = rng.normal(0, 10, (8, 4))
        recon = states.copy()
        orig = np.ones(8, dtype=bool)
        applied = np.array([0, 0, 0, 1, 1, 1, 1, 1], dtype=bool)
        assert float(loss_recons(recon, states, orig, applied).data) == 0.0

    def test_nothing_dropped_means_zero(self):
        states = np.ones((5, 4))
        m = np.ones(5, dtype=bool)
        l = loss_recons(np.zeros((5, 4)), states, m, m)
        assert float(l.data) == 0.0

    def test_mask_that_unmasks_is_rejected(self):
        states = np.ones((5, 4))
        orig = np.array([0, 1, 1, 1, 1], dtype=bool)
        applied = np.ones(5, dtype=bool)
        with pytest.raises(ContractViolation):
            loss_recons(np.zeros((5, 4)), states, orig, applied)

    def test_only_position_columns_matter(self):
        t_h = 4
        states = np.zeros((t_h, 4))
        recon = np.zeros((t_h, 4))
        recon[1, 2:] = [99.0, -99.0]  # yaw/speed columns ignored
        orig = np.ones(t_h, dtype=bool)
        applied = orig.copy()
        applied[1] = False
        assert float(loss_recons(recon, states, orig, applied).data) == 0.0


class TestLossDistill:
    def test_identical_taps_cost_exactly_zero(self):
        rng = np.random.default_rng(2)
        taps = FeatureTaps(Tensor(rng.normal(0, 1, (4, 8))),
                           Tensor(rng.normal(0, 1, (3, 8))),
                           Tensor(rng.normal(0, 1, (2, 8))))
        assert float(loss_distill(taps, taps.detached()).data) == 0.0

    def test_unit_offset_everywhere_gives_three(self):
        d = 8
        a = FeatureTaps(Tensor(np.zeros((4, d))), Tensor(np.zeros((3, d))),
                        Tensor(np.zeros((2, d))))
        b = FeatureTaps(Tensor(np.ones((4, d))), Tensor(np.ones((3, d))),
                        Tensor(np.ones((2, d))))
        assert abs(float(loss_distill(a, b).data) - 3.0) < 1e-12

    def test_value_is_symmetric(self):
        rng = np.random.default_rng(3)
        a = FeatureTaps(Tensor(rng.normal(0, 1, (4, 8))),
                        Tensor(rng.normal(0, 1, (3, 8))),
                        Tensor(rng.normal(0, 1, (2, 8))))
        b = FeatureTaps(Tensor(rng.normal(0, 1, (4, 8))),
                        Tensor(rng.normal(0, 1, (3, 8))),
                        Tensor(rng.normal(0, 1, (2, 8))))
        assert float(loss_distill(a, b).data) == pytest.approx(
            float(loss_distill(b, a).data), abs=1e-15)

    def test_empty_tap_is_skipped(self):
        a = FeatureTaps(Tensor(np.ones((4, 8))), Tensor(np.zeros((0, 8))),
                        Tensor(np.zeros((2, 8))))
        b = FeatureTaps(Tensor(np.zeros((4, 8))), Tensor(np.zeros((0, 8))),
                        Tensor(np.zeros((2, 8))))
        assert abs(float(loss_distill(a, b).data) - 1.0) < 1e-12

    def test_shape_mismatch_rejected(self):
        a = FeatureTaps(Tensor(np.ones((4, 8))), Tensor(np.ones((3, 8))),
                        Tensor(np.ones((2, 8))))
        b = FeatureTaps(Tensor(np.ones((5, 8))), Tensor(np.ones((3, 8))),
                        Tensor(np.ones((2, 8))))
        with pytest.raises(ContractViolation):
            loss_distill(a, b)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        store = ParamStore()
        s_a = store.add("s_a", rng.normal(0, 1, (3, 6)))
        s_f = store.add("s_f", rng.normal(0, 1, (2, 6)))
        t = FeatureTaps(Tensor(rng.normal(0, 1, (3, 6))),
                        Tensor(np.zeros((0, 6))),
                        Tensor(rng.normal(0, 1, (2, 6))))

        def loss():
            taps = FeatureTaps(store["s_a"], Tensor(np.zeros((0, 6))),
                               store["s_f"])
            return loss_distill(taps, t)

        rep = grad_check(loss, store, samples_per_param=6)
        assert rep["max_rel_err"] < 1e-4


# -- composition ---------------------------------------------------------------


class TestComposition:
    def test_total_rebuilds_exactly_from_parts(self, scenes):
        model = tiny_model(recon=True)
        cfg = StageConfig("ssl", alpha=1.0, beta=0.5, seed=0)
        parts = scene_loss(model, scenes[0], cfg)
        rebuilt = ((float(parts.l_init.data) + float(parts.l_refine.data))
                   + cfg.alpha * float(parts.l_cls.data)) \
            + cfg.beta * float(parts.l_recons.data)
        assert float(parts.total.data) == rebuilt

    def test_distill_total_includes_weighted_gap(self, scenes):
        teacher = tiny_model(seed=9)
        student = tiny_model(seed=10)
        cfg = StageConfig("distill", lam=0.5, seed=0)
        parts = scene_loss(student, scenes[1], cfg, teacher=teacher)
        rebuilt = ((float(parts.l_init.data) + float(parts.l_refine.data))
                   + cfg.alpha * float(parts.l_cls.data)) \
            + cfg.lam * float(parts.l_d.data)
        assert float(parts.total.data) == rebuilt
        assert float(parts.l_d.data) > 0.0

    def test_loss_mf_sum(self, scenes):
        model = tiny_model()
        out = model.forward(scenes[2])
        gt = focal_future_local(scenes[2], out.anchor)
        parts = loss_mf(out, gt, alpha=1.0)
        assert float(parts.total.data) == \
            (float(parts.l_init.data) + float(parts.l_refine.data)) \
            + float(parts.l_cls.data)
        assert float(parts.l_recons.data) == 0.0
        assert float(parts.l_d.data) == 0.0

    def test_breakdown_values_keys(self):
        z = Tensor(0.0)
        bd = LossBreakdown(z, z, z, z, z, z)
        assert list(bd.values()) == ["l_init", "l_refine", "l_cls",
                                     "l_recons", "l_d", "total"]

    def test_student_cloned_from_teacher_has_zero_gap(self, scenes):
        """Self-distillation sanity: identical nets, complete mask."""
        teacher = tiny_model(seed=21)
        student = teacher.copy()
        t_h = scenes[0].t_h
        cfg = StageConfig("distill", seed=0,
                          mask=MaskSpec.truncate_to_length(t_h))
        parts = scene_loss(student, scenes[0], cfg, teacher=teacher)
        assert float(parts.l_d.data) == 0.0


# -- stage configs and stage runs ----------------------------------------------


class TestStageConfig:
    def test_teacher_refuses_mask(self):
        with pytest.raises(ParameterError):
            StageConfig("teacher", mask=MaskSpec.random_length(0))

    def test_unknown_stage(self):
        with pytest.raises(ParameterError):
            StageConfig("finetune")

    def test_negative_weight(self):
        with pytest.raises(ParameterError):
            StageConfig("ssl", beta=-0.1)

    def test_bad_epochs(self):
        with pytest.raises(ParameterError):
            StageConfig("teacher", epochs=0)


class TestTrainStage:
    def test_distill_without_teacher_is_configuration_error(self, scenes):
        model = tiny_model()
        with pytest.raises(ConfigurationError):
            train_stage(model, scenes[:4], StageConfig("distill"))

    def test_ssl_without_recon_branch_is_configuration_error(self, scenes):
        model = tiny_model(recon=False)
        with pytest.raises(ConfigurationError):
            train_stage(model, scenes[:4], StageConfig("ssl"))

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigurationError):
            train_stage(tiny_model(), [], StageConfig("teacher"))

    def test_teacher_loss_decreases(self, scenes):
        for seed in (0, 1, 2):
            model = tiny_model(seed=seed)
            res = train_stage(model, scenes[:10],
                              StageConfig("teacher", epochs=3, seed=seed,
                                          lr=2e-3))
            assert res.epoch_means[-1]["total"] < res.epoch_means[0]["total"]

    def test_ssl_reconstruction_improves(self, scenes):
        for seed in (0, 1, 2):
            model = tiny_model(recon=True, seed=seed)
            res = train_stage(model, scenes[:10],
                              StageConfig("ssl", epochs=3, seed=seed,
                                          lr=2e-3))
            assert res.epoch_means[-1]["l_recons"] \
                < res.epoch_means[0]["l_recons"]

    def test_teacher_params_frozen_through_distillation(self, scenes):
        teacher = tiny_model(seed=6)
        before = {k: v.copy() for k, v in
                  teacher.store.state_arrays().items()}
        student = teacher.copy()
        train_stage(student, scenes[:6],
                    StageConfig("distill", epochs=1, seed=0),
                    teacher=teacher)
        after = teacher.store.state_arrays()
        assert before.keys() == after.keys()
        for k in before:
            assert np.array_equal(before[k], after[k])

    def test_frozen_recon_branch_untouched_in_distill(self, scenes):
        teacher = tiny_model(seed=6)
        student = teacher.add_recon_head(seed=7)
        recon_before = {k: v.copy()
                        for k, v in student.store.state_arrays().items()
                        if k.startswith("recon.")}
        train_stage(student, scenes[:6],
                    StageConfig("distill", epochs=1, seed=0),
                    teacher=teacher)
        for k, v in recon_before.items():
            assert np.array_equal(v, student.store[k].data)

    def test_training_is_deterministic(self, scenes):
        runs = []
        for _ in range(2):
            model = tiny_model(seed=4)
            res = train_stage(model, scenes[:6],
                              StageConfig("teacher", epochs=2, seed=11))
            runs.append(res)
        assert runs[0].checkpoint.content_hash == runs[1].checkpoint.content_hash
        assert runs[0].log == runs[1].log

    def test_checkpoint_records_stage_and_parent(self, scenes):
        model = tiny_model()
        res = train_stage(model, scenes[:4],
                          StageConfig("teacher", epochs=1),
                          parent_hash=None)
        assert res.checkpoint.stage == "teacher"
        assert res.checkpoint.parent_hash is None
        assert res.checkpoint.seed_record["n_scenes"] == 4

    def test_log_matches_declared_columns(self, scenes, tmp_path):
        model = tiny_model()
        res = train_stage(model, scenes[:6],
                          StageConfig("teacher", epochs=1, batch_size=3))
        assert len(res.log) == 2  # ceil(6 / 3)
        for row in res.log:
            assert set(row) == set(LOG_COLUMNS)
        path = tmp_path / "log.csv"
        write_training_log(res.log, str(path))
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == LOG_COLUMNS
        assert len(rows) == 1 + len(res.log)
        assert float(rows[1][LOG_COLUMNS.index("total")]) == \
            pytest.approx(res.log[0]["total"], rel=0, abs=0)


# -- strategy chaining ----------------------------------------------------------


class TestStrategies:
    def test_unknown_strategy(self, scenes):
        with pytest.raises(ParameterError):
            train_strategy("ssl_only", scenes[:4],
                           ModelConfig(d=16, n_heads=2))

    def test_cache_shares_the_base_runs(self, scenes):
        mc = ModelConfig(d=16, k_modes=3, n_layers=1, n_heads=2, n_freqs=4)
        budget = StageBudget(1, 1, 1)
        cache = {}
        _, cache = train_strategy("scratch", scenes[:6], mc,
                                  budget=budget, cache=cache)
        teacher_first = cache["teacher"]
        _, cache = train_strategy("scratch+ssl+distill", scenes[:6], mc,
                                  budget=budget, cache=cache)
        assert cache["teacher"] is teacher_first
        assert set(cache) >= {"scratch", "teacher", "ssl",
                              "scratch+ssl+distill"}

    def test_parent_hashes_chain_through_stages(self, scenes):
        mc = ModelConfig(d=16, k_modes=3, n_layers=1, n_heads=2, n_freqs=4)
        budget = StageBudget(1, 1, 1)
        cache = {}
        res, cache = train_strategy("scratch+ssl+distill", scenes[:6], mc,
                                    budget=budget, cache=cache)
        t = cache["teacher"].checkpoint
        s = cache["ssl"].checkpoint
        assert t.parent_hash is None
        assert s.parent_hash == t.content_hash
        assert res.checkpoint.parent_hash == s.content_hash
        assert res.checkpoint.stage == "distill"

    def test_distill_only_branches_from_teacher(self, scenes):
        mc = ModelConfig(d=16, k_modes=3, n_layers=1, n_heads=2, n_freqs=4)
        cache = {}
        res, cache = train_strategy("scratch+distill", scenes[:6], mc,
                                    budget=StageBudget(1, 1, 1), cache=cache)
        assert res.checkpoint.parent_hash == \
            cache["teacher"].checkpoint.content_hash
        assert "ssl" not in cache


# -- held-out diagnostics --------------------------------------------------------


class TestDiagnostics:
    def test_distill_gap_zero_for_identical_nets_on_full_obs(self, scenes):
        """With no steps dropped the student sees what the teacher sees."""
        model = tiny_model(seed=2)
        full = [s for s in scenes[:3]]
        # gap computed under random masking is > 0 for distinct nets
        other = tiny_model(seed=12)
        assert eval_distill_gap(other, model, full, seed=0) > 0.0

    def test_cv_oracle_is_exact_on_straight_constant_speed(self):
        from poplab.scene import AgentHistory, Scene

        t_h = 10
        t = np.arange(t_h)
        states = np.stack([2.0 * t, np.zeros(t_h), np.zeros(t_h),
                           np.full(t_h, 20.0)], axis=1)
        hist = AgentHistory(states, np.ones(t_h, dtype=bool))
        fut = np.stack([2.0 * (t_h + t[:5]), np.zeros(5)], axis=1)
        scene = Scene("cv", 0.1, [hist], [fut], [], 0, 5)
        err = cv_recon_error([scene], seed=0)
        assert err < 1e-9

    def test_recon_error_runs_on_model_branch(self, scenes):
        model = tiny_model(recon=True)
        err = eval_recon_error(model, scenes[:3], seed=0)
        assert np.isfinite(err) and err >= 0.0


# -- the ablation table -----------------------------------------------------------


def test_ablation_table_layout(scenes, tmp_path):
    mc = ModelConfig(d=16, k_modes=3, n_layers=1, n_heads=2, n_freqs=4)
    rows = run_ablation(scenes[:8], scenes[8:11], mc,
                        strategies=("scratch", "scratch+ssl"),
                        budget=StageBudget(1, 1, 1), k=3,
                        out_csv=str(tmp_path / "ablation.csv"))
    assert [r["strategy"] for r in rows] == ["scratch", "scratch+ssl"]
    for r in rows:
        for name in ("1", "half", "full", "random"):
            assert f"minade_{name}" in r and f"minfde_{name}" in r
    with open(tmp_path / "ablation.csv", newline="") as f:
        got = list(csv.reader(f))
    assert len(got) == 3
    assert got[0][0] == "strategy"
