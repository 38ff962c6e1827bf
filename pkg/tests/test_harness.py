"""Config plumbing, loss composition, run reports, threading, gradcheck,
and the toy trainer."""

import json
import math

import numpy as np
import pytest

from geodistill import (
    BevGrid,
    ConfigError,
    HarnessConfig,
    LossResult,
    LossWeights,
    OptimizerConfig,
    RunReport,
    SceneConfig,
    ShapeError,
    config_from_dict,
    config_to_dict,
    default_config,
    evaluate_scene_losses,
    frobenius_sq_distance,
    generate_scene,
    identity_student_inputs,
    load_config,
    parallel_map,
    random_student_inputs,
    render_gt_views,
    run_gradcheck,
    run_train_toy,
    thread_count,
    total_loss,
    write_report,
)
from geodistill.depth_supervision import DepthBins


def small_harness_config(**optimizer_overrides):
    """Scene and bins small enough for sub-second end-to-end runs."""
    cfg = default_config()
    cfg.scene = SceneConfig(
        seed=5,
        num_boxes=2,
        num_cameras=2,
        points_per_box=80,
        ground_points=300,
        channels=4,
        grid=BevGrid(-24.0, 24.0, -24.0, 24.0, 24, 24),
        image_width=48,
        image_height=32,
        focal=40.0,
    )
    cfg.bins = DepthBins(16)
    cfg.keypoint_g = 3
    if optimizer_overrides:
        cfg.optimizer = OptimizerConfig(**optimizer_overrides)
    return cfg


class TestConfigDicts:
    def test_round_trip_is_identity(self):
        cfg = default_config()
        echo = config_to_dict(config_from_dict(config_to_dict(cfg)))
        assert echo == config_to_dict(cfg)

    def test_overrides_apply(self):
        d = {
            "bins": {"count": 24, "d_min": 2.0, "d_max": 40.0},
            "reference_strategy": "one_to_one",
            "loss_reduction": "sum",
            "weights": {"w_ik": 0.5},
            "optimizer": {"max_steps": 17},
            "scene": {"seed": 9, "num_boxes": 1},
        }
        cfg = config_from_dict(d)
        assert cfg.bins.count == 24 and cfg.bins.d_max == 40.0
        assert cfg.reference.strategy == "one_to_one"
        assert cfg.loss_reduction == "sum"
        assert cfg.weights.w_ik == 0.5 and cfg.weights.w_a == 1.0
        assert cfg.optimizer.max_steps == 17
        assert cfg.scene.seed == 9 and cfg.scene.num_boxes == 1

    def test_unknown_keys_rejected_at_every_level(self):
        for bad in (
            {"mystery": 1},
            {"scene": {"mystery": 1}},
            {"bins": {"mystery": 1}},
            {"weights": {"mystery": 1}},
            {"optimizer": {"mystery": 1}},
            {"gradcheck": {"mystery": 1}},
        ):
            with pytest.raises(ConfigError):
                config_from_dict(bad)

    def test_bad_values_rejected(self):
        for bad in (
            {"weights": {"w_a": -1.0}},
            {"loss_reduction": "max"},
            {"optimizer": {"step_size": 0.0}},
            {"optimizer": {"final_lr_fraction": 0.0}},
            {"keypoint_g": 1},
            {"enlarge": 0.5},
            {"gram_normalization": "nope"},
            {"reference_strategy": "nope"},
            {"gradcheck": {"instances": 0}},
        ):
            with pytest.raises(ConfigError):
                config_from_dict(bad)
        with pytest.raises(ConfigError):
            config_from_dict([1, 2, 3])

    def test_load_config_default_and_file(self, tmp_path):
        assert config_to_dict(load_config("default")) == config_to_dict(default_config())
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"bins": {"count": 10}}))
        assert load_config(str(path)).bins.count == 10

    def test_load_config_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.json"))
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(str(bad))

    def test_defaults_documented(self):
        cfg = default_config()
        assert cfg.bins.count == 112
        assert cfg.scene.num_cameras == 6
        assert cfg.weights == LossWeights(1.0, 1.0, 1.0, 1.0)
        assert cfg.reference.strategy == "all_to_adaptive_smallest_error"


class TestTotalLoss:
    @staticmethod
    def parts():
        absolute = LossResult(1.0, np.ones((2, 2)))
        inner = LossResult(2.0, 2.0 * np.ones((2, 2)))
        channel = LossResult(3.0, np.full(3, 3.0))
        keypoint = LossResult(4.0, np.full(3, 4.0))
        return absolute, inner, channel, keypoint

    def test_unit_weights_hand_value(self):
        """Components 1 + 2 + 3 + 4 plus det 5 add to 15."""
        res = total_loss(*self.parts(), det=5.0)
        assert res.value == 15.0
        assert res.components["external_det"] == 5.0
        assert np.array_equal(res.grad["depth_logits"], 3.0 * np.ones((2, 2)))
        assert np.array_equal(res.grad["bev_features"], np.full(3, 7.0))

    def test_weights_scale_linearly(self):
        w = LossWeights(w_a=2.0, w_r=0.5, w_ic=1.0, w_ik=0.0)
        res = total_loss(*self.parts(), det=5.0, weights=w)
        assert res.value == pytest.approx(5.0 + 2.0 + 1.0 + 3.0 + 0.0, abs=1e-12)
        a, r, c, k = self.parts()
        want_depth = w.w_a * a.grad + w.w_r * r.grad
        want_bev = w.w_ic * c.grad + w.w_ik * k.grad
        assert np.allclose(res.grad["depth_logits"], want_depth, rtol=0, atol=1e-12)
        assert np.allclose(res.grad["bev_features"], want_bev, rtol=0, atol=1e-12)

    def test_per_view_gradient_lists(self):
        absolute = LossResult(1.0, [np.ones(3), np.ones(2)])
        inner = LossResult(2.0, [np.zeros(3), np.full(2, 2.0)])
        channel = LossResult(0.0, np.zeros(4), empty=True)
        keypoint = LossResult(0.0, np.zeros(4), empty=True)
        res = total_loss(absolute, inner, channel, keypoint)
        assert isinstance(res.grad["depth_logits"], list)
        assert np.array_equal(res.grad["depth_logits"][1], np.full(2, 3.0))

    def test_mismatched_gradients_rejected(self):
        absolute = LossResult(1.0, np.ones(3))
        inner = LossResult(2.0, np.ones(4))
        zero = LossResult(0.0, np.zeros(2))
        with pytest.raises(ShapeError):
            total_loss(absolute, inner, zero, zero)
        with pytest.raises(ShapeError):
            total_loss(LossResult(1.0, [np.ones(3)]), LossResult(1.0, np.ones(3)), zero, zero)

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LossWeights(w_a=-0.1)

    def test_empty_only_when_all_terms_empty(self):
        zero = lambda: LossResult(0.0, np.zeros(2), empty=True)  # noqa: E731
        res = total_loss(zero(), zero(), zero(), zero(), det=5.0)
        assert res.empty and res.value == 5.0
        res = total_loss(LossResult(1.0, np.ones(2)), zero(), zero(), zero())
        assert not res.empty


class TestRunReport:
    def test_json_shape(self, tmp_path):
        report = RunReport(
            kind="demo", config={"b": 1, "a": 2}, status="ok", wall_clock_s=0.5,
            data={"x": [1, 2], "score": 3.5},
        )
        text = report.to_json()
        assert text.endswith("\n")
        parsed = json.loads(text)
        assert parsed["format_version"] == 1
        assert parsed["kind"] == "demo" and parsed["status"] == "ok"
        assert parsed["x"] == [1, 2]
        # sorted-key serialization is deterministic
        assert text == json.dumps(parsed, sort_keys=True, indent=2) + "\n"
        path = tmp_path / "r.json"
        write_report(str(path), report)
        assert path.read_text() == text


class TestThreading:
    def test_thread_count_env(self, monkeypatch):
        monkeypatch.delenv("TIG_THREADS", raising=False)
        assert thread_count() == 1
        monkeypatch.setenv("TIG_THREADS", "4")
        assert thread_count() == 4
        monkeypatch.setenv("TIG_THREADS", "0")
        assert thread_count() == 1
        monkeypatch.setenv("TIG_THREADS", "")
        assert thread_count() == 1
        monkeypatch.setenv("TIG_THREADS", "lots")
        with pytest.raises(ConfigError):
            thread_count()

    def test_parallel_map_preserves_order(self, monkeypatch):
        items = list(range(40))
        monkeypatch.setenv("TIG_THREADS", "4")
        assert parallel_map(lambda x: x * x, items) == [x * x for x in items]
        monkeypatch.delenv("TIG_THREADS", raising=False)
        assert parallel_map(lambda x: x * x, items) == [x * x for x in items]


class TestIdentityStudent:
    def test_identity_inputs_sit_at_the_optimum(self):
        """With the identity student every differentiated term except the
        clamped-BCE floor is exactly zero, and every gradient is exactly
        zero everywhere."""
        cfg = small_harness_config()
        scene = generate_scene(cfg.scene)
        views = render_gt_views(scene)
        maps, eff_views, student = identity_student_inputs(cfg, scene, views)
        res = evaluate_scene_losses(cfg, scene, eff_views, maps, student)
        assert res.components["inner_depth"] == 0.0
        assert res.components["inter_channel"] == 0.0
        assert res.components["inter_keypoint"] == 0.0
        assert 0.0 < res.components["absolute_depth"] < 1e-3
        for g in res.grad["depth_logits"]:
            assert np.all(g == 0.0)
        assert np.all(res.grad["bev_features"] == 0.0)

    def test_random_inputs_are_not_at_the_optimum(self):
        cfg = small_harness_config()
        scene = generate_scene(cfg.scene)
        views = render_gt_views(scene)
        maps, eff_views, student = random_student_inputs(cfg, scene, views)
        res = evaluate_scene_losses(cfg, scene, eff_views, maps, student)
        assert res.components["inner_depth"] > 0.0
        assert res.components["inter_keypoint"] > 0.0


class TestRunGradcheck:
    def test_small_run_passes(self):
        cfg = small_harness_config()
        cfg.gradcheck.instances = 6
        report = run_gradcheck(cfg)
        assert report.status == "passed"
        assert report.data["max_rel_error"] <= cfg.gradcheck.fail_threshold
        for name in (
            "absolute_depth",
            "inner_depth",
            "inter_channel",
            "inter_keypoint",
            "bev_distill",
        ):
            entry = report.data["losses"][name]
            assert entry["passed"]
            assert entry["instances"] == 6
            assert "excluded_tie_adjacent" in entry

    def test_zero_weight_losses_are_skipped(self):
        cfg = small_harness_config()
        cfg.gradcheck.instances = 2
        cfg.weights = LossWeights(w_a=0.0, w_r=1.0, w_ic=0.0, w_ik=0.0)
        report = run_gradcheck(cfg)
        losses = report.data["losses"]
        assert losses["absolute_depth"] == {"skipped": True, "reason": "zero weight"}
        assert losses["inter_channel"]["skipped"] is True
        assert losses["inter_keypoint"]["skipped"] is True
        assert losses["bev_distill"]["skipped"] is True
        assert losses["inner_depth"]["passed"]
        assert report.status == "passed"


class TestRunTrainToy:
    def test_identity_init_is_stationary_immediately(self):
        """Starting at the optimum, the very first gradient is exactly
        zero and the loop stops without touching the state."""
        cfg = small_harness_config()
        report = run_train_toy(cfg, identity_init=True)
        assert report.status == "stationary"
        assert report.data["steps_run"] == 1
        assert report.data["final_total"] == report.data["initial_total"]
        series = report.data["loss_series"]
        assert series["inner_depth"] == [0.0]
        assert series["inter_channel"] == [0.0]
        assert series["inter_keypoint"] == [0.0]
        assert report.data["bev_feature_distance"]["frobenius"] == 0.0

    def test_step_zero_matches_one_shot_evaluation(self):
        """The trainer's first recorded total equals evaluate_scene_losses
        on the same freshly built student, bit for bit."""
        cfg = small_harness_config(max_steps=1)
        report = run_train_toy(cfg)
        scene = generate_scene(cfg.scene)
        views = render_gt_views(scene)
        maps, eff_views, student = random_student_inputs(cfg, scene, views)
        res = evaluate_scene_losses(cfg, scene, eff_views, maps, student)
        assert report.data["loss_series"]["total"][0] == res.value

    def test_distillation_weights_zero_leaves_bev_untouched(self):
        """With w_ic = w_ik = 0 the BEV series stays exactly zero and the
        student map never moves from its initialization."""
        cfg = small_harness_config(max_steps=5)
        cfg.weights = LossWeights(w_a=1.0, w_r=1.0, w_ic=0.0, w_ik=0.0)
        report = run_train_toy(cfg)
        series = report.data["loss_series"]
        assert series["inter_channel"] == [0.0] * report.data["steps_run"]
        assert series["inter_keypoint"] == [0.0] * report.data["steps_run"]
        scene = generate_scene(cfg.scene)
        views = render_gt_views(scene)
        _, _, student = random_student_inputs(cfg, scene, views)
        want = math.sqrt(frobenius_sq_distance(student.data, scene.teacher_bev.data))
        assert report.data["bev_feature_distance"]["frobenius"] == want

    def test_loss_decreases_on_small_scene(self):
        cfg = small_harness_config(max_steps=60)
        report = run_train_toy(cfg)
        series = report.data["loss_series"]["total"]
        assert series[-1] < series[0]
        assert report.data["steps_run"] == len(series)
        assert len(report.data["valid_pixels_per_view"]) == cfg.scene.num_cameras

    def test_external_det_loss_rides_along(self):
        cfg = small_harness_config(max_steps=1)
        cfg.external_det_loss = 2.5
        report = run_train_toy(cfg)
        cfg2 = small_harness_config(max_steps=1)
        base = run_train_toy(cfg2)
        diff = report.data["initial_total"] - base.data["initial_total"]
        assert diff == pytest.approx(2.5, abs=1e-12)
