"""Keypoint sampling, bilinear feature extraction, Gram matrices, and the
BEV feature-relation losses with their gradients."""

import numpy as np
import pytest

from geodistill import (
    BevFeatureMap,
    BevGrid,
    Box3D,
    ConfigError,
    ContractError,
    KeypointSet,
    TargetKeypointFeatures,
    bev_distill_loss,
    bev_distill_terms,
    bilinear_sample,
    bilinear_sample_backward,
    enlarge_box_bev,
    finite_difference_gradient,
    gram_pair,
    inter_channel_gram,
    inter_channel_loss,
    inter_keypoint_gram,
    inter_keypoint_loss,
    keypoint_sets_for_boxes,
    points_in_box,
    sample_keypoints,
)
from geodistill.oracles import bilinear_scalar, gram_channel_loops, gram_keypoint_loops
from geodistill.rng import CounterRng

GRID5 = BevGrid(-4.0, 4.0, -4.0, 4.0, 5, 5)


def random_orthogonal(rng, n):
    """Orthogonal matrix from the QR decomposition of a Gaussian draw."""
    q, r = np.linalg.qr(rng.normal((n, n)))
    return q * np.sign(np.diag(r))


def make_targets(rng, count, n, c):
    out = []
    for i in range(count):
        sub = rng.substream(f"tkf-{i}")
        out.append(
            TargetKeypointFeatures(student=sub.normal((n, c)), teacher=sub.normal((n, c)))
        )
    return out


class TestSampleKeypoints:
    def test_symmetric_hand_lattice(self):
        """A centered axis-aligned box with g=2 and no enlargement yields
        the four cell centers around the grid middle: 5x5 cells of size
        1.6 put world (+-0.8, +-0.8) at rows/cols {1.5, 2.5}."""
        box = Box3D(center=[0.0, 0.0, 0.0], size=[3.2, 3.2, 1.0], yaw=0.0)
        kp = sample_keypoints(box, GRID5, g=2, enlarge=1.0)
        got = set(map(tuple, np.round(kp.points, 12)))
        assert got == {(1.5, 1.5), (1.5, 2.5), (2.5, 1.5), (2.5, 2.5)}
        assert not kp.clipped

    def test_lattice_size_is_g_squared(self):
        box = Box3D(center=[1.0, -0.5, 0.2], size=[2.0, 1.0, 1.5], yaw=0.3)
        for g in (2, 3, 6):
            kp = sample_keypoints(box, GRID5, g=g)
            assert len(kp) == g * g
            assert kp.points.shape == (g * g, 2)

    def test_quarter_turn_of_square_footprint_same_set(self):
        """Rotating a square footprint by pi/2 permutes the lattice but
        leaves the point set unchanged."""
        box = Box3D(center=[0.5, -0.3, 0.0], size=[2.0, 2.0, 1.0], yaw=0.0)
        turned = Box3D(center=[0.5, -0.3, 0.0], size=[2.0, 2.0, 1.0], yaw=np.pi / 2)
        a = sample_keypoints(box, GRID5, g=3).points
        b = sample_keypoints(turned, GRID5, g=3).points
        set_a = set(map(tuple, np.round(a, 9)))
        set_b = set(map(tuple, np.round(b, 9)))
        assert set_a == set_b

    def test_points_interior_to_enlarged_footprint(self):
        """Every keypoint lies inside the enlarged box footprint and
        outside none; tested in world space against the half-space oracle."""
        rng = CounterRng(71)
        grid = BevGrid(-10.0, 10.0, -10.0, 10.0, 16, 16)
        for i in range(20):
            sub = rng.substream(f"kp-{i}")
            center = sub.uniform(2, -4.0, 4.0)
            size = sub.uniform(2, 0.8, 3.0)
            yaw = float(sub.uniform(1, -np.pi, np.pi)[0])
            box = Box3D(center=[center[0], center[1], 0.5], size=[size[0], size[1], 1.0], yaw=yaw)
            kp = sample_keypoints(box, grid, g=4, enlarge=1.25)
            # map rows/cols back to world and test against the enlarged box
            from geodistill import bev_to_world

            world = bev_to_world(grid, kp.points)
            pts3 = np.column_stack([world, np.full(len(world), 0.5)])
            big = enlarge_box_bev(box, 1.25)
            assert np.all(points_in_box(big, pts3))

    def test_clipped_flag(self):
        """Footprints reaching beyond the outermost cell centers by more
        than half a cell set ``clipped``."""
        small = Box3D(center=[0.0, 0.0, 0.0], size=[1.0, 1.0, 1.0], yaw=0.0)
        huge = Box3D(center=[3.9, 0.0, 0.0], size=[6.0, 1.0, 1.0], yaw=0.0)
        assert not sample_keypoints(small, GRID5, g=2, enlarge=1.0).clipped
        assert sample_keypoints(huge, GRID5, g=2, enlarge=1.0).clipped

    def test_g_below_two_rejected(self):
        box = Box3D(center=[0.0, 0.0, 0.0], size=[1.0, 1.0, 1.0], yaw=0.0)
        with pytest.raises(ValueError):
            sample_keypoints(box, GRID5, g=1)
        with pytest.raises(ContractError):
            KeypointSet(target_index=0, points=np.zeros((3, 2)), g=2)

    def test_target_indices_follow_input_order(self):
        boxes = [
            Box3D(center=[0.0, 0.0, 0.0], size=[1.0, 1.0, 1.0], yaw=0.0),
            Box3D(center=[1.0, 1.0, 0.0], size=[1.0, 2.0, 1.0], yaw=0.4),
        ]
        sets = keypoint_sets_for_boxes(boxes, GRID5, g=2)
        assert [kp.target_index for kp in sets] == [0, 1]


class TestBilinearSample:
    def test_integer_coordinates_exact(self):
        data = CounterRng(73).normal((3, 4, 5))
        feat = BevFeatureMap(data, BevGrid(0.0, 5.0, 0.0, 4.0, 4, 5))
        pts = np.array([[0.0, 0.0], [2.0, 3.0], [3.0, 4.0]])
        out = bilinear_sample(feat, pts)
        for k, (r, c) in enumerate(pts.astype(int)):
            assert np.array_equal(out[k], data[:, r, c])

    def test_midpoint_is_mean_of_neighbors(self):
        data = np.zeros((1, 2, 2))
        data[0] = [[1.0, 3.0], [5.0, 7.0]]
        out = bilinear_sample(data, [[0.5, 0.5]])
        assert out[0, 0] == pytest.approx(4.0, abs=1e-15)

    def test_out_of_range_clamps_to_border(self):
        data = np.arange(6.0).reshape(1, 2, 3)
        out = bilinear_sample(data, [[-2.0, -2.0], [5.0, 9.0]])
        assert out[0, 0] == data[0, 0, 0]
        assert out[1, 0] == data[0, 1, 2]

    def test_matches_scalar_oracle(self):
        rng = CounterRng(79)
        data = rng.normal((4, 6, 7))
        pts = np.column_stack([rng.uniform(50, -1.0, 6.5), rng.uniform(50, -1.0, 7.5)])
        out = bilinear_sample(data, pts)
        for k in range(50):
            want = bilinear_scalar(data, float(pts[k, 0]), float(pts[k, 1]))
            assert np.allclose(out[k], want, rtol=0, atol=1e-12)

    def test_adjoint_identity(self):
        """<sample(F, P), U> equals <F, scatter(P, U)> for random draws."""
        rng = CounterRng(83)
        for i in range(30):
            sub = rng.substream(f"adj-{i}")
            data = sub.normal((3, 5, 4))
            pts = np.column_stack([sub.uniform(6, -0.8, 4.8), sub.uniform(6, -0.8, 3.8)])
            up = sub.normal((6, 3))
            lhs = float(np.sum(bilinear_sample(data, pts) * up))
            rhs = float(np.sum(data * bilinear_sample_backward(data.shape, pts, up)))
            assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)

    def test_backward_shape_contract(self):
        with pytest.raises(ContractError):
            bilinear_sample_backward((2, 3, 3), np.zeros((4, 2)), np.zeros((4, 3)))


class TestGramMatrices:
    def test_identity_features(self):
        assert np.array_equal(inter_channel_gram(np.eye(2)), np.eye(2))
        assert np.array_equal(inter_keypoint_gram(np.eye(2)), np.eye(2))

    def test_hand_two_by_two(self):
        """F = [[1,2],[3,4]]: FtF = [[10,14],[14,20]], FFt = [[5,11],[11,25]]."""
        f = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(inter_channel_gram(f), [[10.0, 14.0], [14.0, 20.0]])
        assert np.array_equal(inter_keypoint_gram(f), [[5.0, 11.0], [11.0, 25.0]])

    def test_matches_loop_oracles(self):
        rng = CounterRng(89)
        for i in range(100):
            sub = rng.substream(f"gram-{i}")
            n = 2 + int(sub.uniform(1)[0] * 6)
            c = 2 + int(sub.uniform(1)[0] * 6)
            f = 2.0 * sub.normal((n, c))
            assert np.allclose(inter_channel_gram(f), gram_channel_loops(f), rtol=0, atol=1e-12)
            assert np.allclose(inter_keypoint_gram(f), gram_keypoint_loops(f), rtol=0, atol=1e-12)

    def test_symmetric_and_psd(self):
        rng = CounterRng(97)
        for i in range(30):
            f = rng.substream(f"psd-{i}").normal((5, 3))
            for gram in (inter_channel_gram(f), inter_keypoint_gram(f)):
                assert np.array_equal(gram, gram.T)
                eig = np.linalg.eigvalsh(gram)
                assert eig.min() >= -1e-9 * max(np.trace(gram), 1.0)

    def test_traces_agree_with_squared_norm(self):
        f = CounterRng(101).normal((6, 4))
        want = float(np.sum(f * f))
        assert np.trace(inter_channel_gram(f)) == pytest.approx(want, rel=1e-12)
        assert np.trace(inter_keypoint_gram(f)) == pytest.approx(want, rel=1e-12)

    def test_channel_gram_row_permutation_bitwise(self):
        """Reordering keypoint rows leaves the channel Gram bitwise equal."""
        rng = CounterRng(103)
        for i in range(100):
            sub = rng.substream(f"perm-{i}")
            n = 3 + int(sub.uniform(1)[0] * 6)
            f = sub.normal((n, 4))
            perm = np.argsort(sub.uniform(n), kind="stable")
            for norm in ("none", "count", "l2"):
                a = inter_channel_gram(f, norm)
                b = inter_channel_gram(f[perm], norm)
                assert np.array_equal(a, b)

    def test_count_normalization(self):
        f = CounterRng(107).normal((5, 3))
        assert np.allclose(
            inter_channel_gram(f, "count"), inter_channel_gram(f) / 5.0, rtol=0, atol=1e-15
        )
        assert np.allclose(
            inter_keypoint_gram(f, "count"), inter_keypoint_gram(f) / 3.0, rtol=0, atol=1e-15
        )

    def test_l2_normalization_unit_diagonal(self):
        """Row-normalized keypoint Grams are cosine matrices with unit
        diagonal and entries in [-1, 1]."""
        f = CounterRng(109).normal((5, 3)) + 0.5
        gram = inter_keypoint_gram(f, "l2")
        assert np.allclose(np.diag(gram), 1.0, rtol=0, atol=1e-12)
        assert np.all(np.abs(gram) <= 1.0 + 1e-12)

    def test_gram_pair_consistent(self):
        f = CounterRng(113).normal((4, 3))
        pair = gram_pair(f, "count")
        assert np.array_equal(pair.inter_channel, inter_channel_gram(f, "count"))
        assert np.array_equal(pair.inter_keypoint, inter_keypoint_gram(f, "count"))

    def test_unknown_normalization(self):
        with pytest.raises(ConfigError):
            inter_channel_gram(np.eye(2), "nope")


class TestGramLosses:
    def test_identical_features_zero(self):
        """Student equal to teacher gives exactly zero value and gradient."""
        rng = CounterRng(127)
        f = rng.normal((6, 4))
        targets = [TargetKeypointFeatures(student=f.copy(), teacher=f.copy())]
        for fn in (inter_channel_loss, inter_keypoint_loss):
            for norm in ("none", "count", "l2"):
                res = fn(targets, normalization=norm)
                assert res.value == 0.0
                assert np.all(res.grad[0] == 0.0)

    def test_value_matches_direct_composition(self):
        """Loss equals mean (or sum) squared Gram difference computed from
        the loop oracles."""
        rng = CounterRng(131)
        for i in range(50):
            sub = rng.substream(f"comp-{i}")
            n = 2 + int(sub.uniform(1)[0] * 5)
            c = 2 + int(sub.uniform(1)[0] * 5)
            fs = sub.normal((n, c))
            ft = sub.normal((n, c))
            targets = [TargetKeypointFeatures(student=fs, teacher=ft)]
            for reduction in ("mean", "sum"):
                d_ic = gram_channel_loops(fs) - gram_channel_loops(ft)
                d_ik = gram_keypoint_loops(fs) - gram_keypoint_loops(ft)
                want_ic = float(np.sum(d_ic * d_ic))
                want_ik = float(np.sum(d_ik * d_ik))
                if reduction == "mean":
                    want_ic /= d_ic.size
                    want_ik /= d_ik.size
                got_ic = inter_channel_loss(targets, loss_reduction=reduction)
                got_ik = inter_keypoint_loss(targets, loss_reduction=reduction)
                assert got_ic.value == pytest.approx(want_ic, rel=1e-12)
                assert got_ik.value == pytest.approx(want_ik, rel=1e-12)

    def test_channel_loss_keypoint_permutation_exact(self):
        """Permuting a target's keypoint rows (student and teacher alike)
        changes the channel loss bitwise not at all, and permutes the
        gradient rows in lockstep."""
        rng = CounterRng(137)
        for i in range(50):
            sub = rng.substream(f"icperm-{i}")
            n = 3 + int(sub.uniform(1)[0] * 5)
            fs = sub.normal((n, 4))
            ft = sub.normal((n, 4))
            perm = np.argsort(sub.uniform(n), kind="stable")
            base = inter_channel_loss([TargetKeypointFeatures(fs, ft)])
            other = inter_channel_loss([TargetKeypointFeatures(fs[perm], ft[perm])])
            assert other.value == base.value
            assert np.array_equal(other.grad[0], base.grad[0][perm])

    def test_keypoint_loss_orthogonal_mixing_invariant(self):
        """Rotating the channel basis of both maps by the same orthogonal
        matrix moves the keypoint loss by at most 1e-9."""
        rng = CounterRng(139)
        for i in range(100):
            sub = rng.substream(f"ikorth-{i}")
            fs = sub.normal((5, 4))
            ft = sub.normal((5, 4))
            q = random_orthogonal(sub, 4)
            base = inter_keypoint_loss([TargetKeypointFeatures(fs, ft)]).value
            mixed = inter_keypoint_loss([TargetKeypointFeatures(fs @ q, ft @ q)]).value
            assert abs(mixed - base) <= 1e-9 * max(1.0, abs(base))

    def test_orthogonal_mixing_separates_the_two_losses(self):
        """A pure orthogonal channel mix of the teacher leaves the keypoint
        loss at the float floor while the channel loss stays visibly
        positive: the two terms constrain different structure."""
        rng = CounterRng(149)
        ft = rng.normal((6, 4)) + 0.3
        q = random_orthogonal(rng, 4)
        targets = [TargetKeypointFeatures(student=ft @ q, teacher=ft)]
        assert inter_keypoint_loss(targets).value <= 1e-18
        assert inter_channel_loss(targets).value > 1e-2

    def test_sum_over_targets(self):
        rng = CounterRng(151)
        targets = make_targets(rng, 3, 4, 3)
        whole = inter_keypoint_loss(targets)
        parts = [inter_keypoint_loss([t]).value for t in targets]
        assert whole.value == pytest.approx(sum(parts), rel=1e-12)
        assert len(whole.grad) == 3

    def test_empty_target_list(self):
        for fn in (inter_channel_loss, inter_keypoint_loss):
            res = fn([])
            assert res.empty and res.value == 0.0 and res.grad == []

    def test_gradients_match_finite_differences(self):
        """Analytic student gradients agree with central differences for
        every normalization and both Gram kinds."""
        rng = CounterRng(157)
        for norm in ("none", "count", "l2"):
            for fn in (inter_channel_loss, inter_keypoint_loss):
                sub = rng.substream(f"fd-{norm}-{fn.__name__}")
                fs = sub.normal((4, 3)) + 0.4  # keep rows away from zero norm
                ft = sub.normal((4, 3))
                res = fn([TargetKeypointFeatures(fs, ft)], normalization=norm)

                def f(x, fn=fn, ft=ft, norm=norm):
                    return fn([TargetKeypointFeatures(x, ft)], normalization=norm).value

                fd = finite_difference_gradient(f, fs)
                denom = max(float(np.max(np.abs(fd))), 1e-10)
                assert float(np.max(np.abs(res.grad[0] - fd))) / denom <= 1e-6


class TestBevDistillLoss:
    def setup_method(self):
        self.grid = BevGrid(-4.0, 4.0, -4.0, 4.0, 8, 8)
        rng = CounterRng(163)
        self.student = BevFeatureMap(rng.normal((3, 8, 8)), self.grid)
        self.teacher = BevFeatureMap(rng.normal((3, 8, 8)), self.grid)
        self.boxes = [
            Box3D(center=[-1.0, -0.5, 0.0], size=[2.0, 1.2, 1.0], yaw=0.3),
            Box3D(center=[1.5, 1.0, 0.0], size=[1.5, 1.5, 1.0], yaw=-0.8),
        ]

    def test_box_order_invariance(self):
        a = bev_distill_loss(self.student, self.teacher, self.boxes, g=3)
        b = bev_distill_loss(self.student, self.teacher, self.boxes[::-1], g=3)
        assert a.value == pytest.approx(b.value, rel=1e-12)
        assert np.allclose(a.grad, b.grad, rtol=0, atol=1e-12)

    def test_zero_boxes_empty(self):
        res = bev_distill_loss(self.student, self.teacher, [])
        assert res.empty and res.value == 0.0
        assert res.grad.shape == self.student.data.shape
        assert np.all(res.grad == 0.0)

    def test_identical_maps_zero(self):
        res = bev_distill_loss(self.student, self.student, self.boxes, g=3)
        assert res.value == 0.0
        assert np.all(res.grad == 0.0)

    def test_terms_compose(self):
        ic, ik = bev_distill_terms(self.student, self.teacher, self.boxes, g=3)
        combined = bev_distill_loss(self.student, self.teacher, self.boxes, g=3)
        assert combined.value == pytest.approx(ic.value + ik.value, rel=1e-12)
        assert combined.components["inter_channel"] == ic.value
        assert combined.components["inter_keypoint"] == ik.value
        assert np.allclose(combined.grad, ic.grad + ik.grad, rtol=0, atol=1e-15)

    def test_grid_mismatch_rejected(self):
        other = BevFeatureMap(
            self.teacher.data.copy(), BevGrid(-4.0, 4.0, -4.0, 4.0 + 1e-9, 8, 8)
        )
        with pytest.raises(ContractError):
            bev_distill_loss(self.student, other, self.boxes)

    def test_shape_mismatch_rejected(self):
        other = BevFeatureMap(np.zeros((2, 8, 8)), self.grid)
        with pytest.raises(ContractError):
            bev_distill_loss(self.student, other, self.boxes)

    def test_gradient_matches_finite_differences(self):
        grid = BevGrid(-4.0, 4.0, -4.0, 4.0, 5, 5)
        rng = CounterRng(167)
        student = rng.normal((2, 5, 5))
        teacher = BevFeatureMap(rng.normal((2, 5, 5)), grid)
        boxes = [Box3D(center=[0.2, -0.4, 0.0], size=[2.5, 1.5, 1.0], yaw=0.5)]
        res = bev_distill_loss(BevFeatureMap(student, grid), teacher, boxes, g=2)

        def f(x):
            return bev_distill_loss(BevFeatureMap(x, grid), teacher, boxes, g=2).value

        fd = finite_difference_gradient(f, student)
        denom = max(float(np.max(np.abs(fd))), 1e-10)
        assert float(np.max(np.abs(res.grad - fd))) / denom <= 1e-6
