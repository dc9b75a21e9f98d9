"""Temporal pyramid similarity: branch structure, distance vectors, stage and
full forwards against an independent straight-line oracle."""

import numpy as np
import pytest

from gebd.autodiff import Tensor, backward, seq_tensor, sum_all
from gebd.nn import Conv1dKernel
from gebd.tps import (
    TpsParams,
    branch_forward,
    comprehensive_rep,
    init_branch,
    init_stage,
    init_tps,
    neighbor_distances,
    residual_normalize,
    stage_forward,
    tps_forward,
)
from oracles import naive_stage_forward


def make_stage(seed=0, channels=6, n=4, d_out=8, radius=2, **kwargs):
    rng = np.random.default_rng(seed)
    return init_stage(rng, channels, n, d_out, radius, **kwargs)


class TestBranchStructure:
    def test_depthwise_present_iff_dilated(self):
        rng = np.random.default_rng(0)
        dilations = [2 ** i for i in range(4)]
        branches = [init_branch(rng, 6, r) for r in dilations]
        assert branches[0].depthwise is None  # r=1
        for br in branches[1:]:  # r in {2, 4, 8}
            assert br.depthwise is not None
            assert br.depthwise.width == 3 and br.depthwise.dilation == 1
        assert [br.dilation for br in branches] == [1, 2, 4, 8]

    def test_shape_preserved_for_every_branch(self):
        rng = np.random.default_rng(1)
        x = seq_tensor(rng.standard_normal((11, 6)))
        for r in (1, 2, 4, 8):
            out = branch_forward(x, init_branch(rng, 6, r))
            assert out.data.shape == (11, 6)

    def test_zero_input_zero_params_gives_zero(self):
        # with zero biases and beta=0: norm(0)=0, gelu(0)=0
        br = init_branch(np.random.default_rng(2), 4, 2)
        out = branch_forward(seq_tensor(np.zeros((6, 4))), br)
        np.testing.assert_allclose(out.data, np.zeros((6, 4)), atol=1e-15)


class TestResidualNormalize:
    def test_zero_branch_output_gives_normalized_input(self):
        rng = np.random.default_rng(3)
        x = seq_tensor(rng.standard_normal((5, 4)))
        out = residual_normalize(Tensor(np.zeros((5, 4))), x)
        norms = np.linalg.norm(x.data, axis=1, keepdims=True)
        np.testing.assert_allclose(out.data, x.data / norms, atol=1e-9)

    def test_rows_unit_norm(self):
        rng = np.random.default_rng(4)
        f = Tensor(rng.standard_normal((6, 5)))
        x = seq_tensor(rng.standard_normal((6, 5)))
        out = residual_normalize(f, x)
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), np.ones(6), atol=1e-9)

    def test_f_equals_x_keeps_direction(self):
        rng = np.random.default_rng(5)
        x = seq_tensor(rng.standard_normal((4, 3)))
        out = residual_normalize(x, x)
        norms = np.linalg.norm(x.data, axis=1, keepdims=True)
        np.testing.assert_allclose(out.data, x.data / norms, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            residual_normalize(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 3))))


class TestNeighborDistances:
    def test_identical_rows_all_zero(self):
        r = seq_tensor(np.tile([0.5, 0.5], (6, 1)))
        np.testing.assert_array_equal(neighbor_distances(r, 2).data, np.zeros((6, 4)))

    def test_edge_clamping(self):
        rng = np.random.default_rng(6)
        r = seq_tensor(rng.standard_normal((5, 3)))
        out = neighbor_distances(r, 2).data
        # at t=0 both negative-offset slots compare frame 0 with itself
        assert out[0, 0] == 0.0 and out[0, 1] == 0.0
        assert out[-1, 2] == 0.0 and out[-1, 3] == 0.0

    def test_unit_basis_hand_case(self):
        e1 = [1.0, 0.0]
        e2 = [0.0, 1.0]
        r = seq_tensor([e1, e2, e1])
        out = neighbor_distances(r, 1).data
        np.testing.assert_allclose(out, [[0.0, 2.0], [2.0, 2.0], [2.0, 0.0]])

    def test_column_order_negative_then_positive(self):
        # rows 0,1,2,... scaled so distance grows with |q|; check slot layout
        r = seq_tensor(np.arange(6, dtype=float)[:, None] * [1.0])
        out = neighbor_distances(r, 2).data
        # at t=3: slots q=-2,-1,1,2 -> distances 4,1,1,4
        np.testing.assert_allclose(out[3], [4.0, 1.0, 1.0, 4.0])

    def test_entries_bounded_for_unit_rows(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((20, 8))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        out = neighbor_distances(seq_tensor(x), 3).data
        assert np.all(out >= 0)
        assert np.all(out <= 4.0 + 1e-12)

    def test_gradient_vs_finite_differences(self):
        from gradcheck import check_op_gradients
        from gebd.autodiff import mul

        rng = np.random.default_rng(8)
        x = Tensor(rng.uniform(-2, 2, size=(6, 3)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, size=(6, 4)))
        check_op_gradients(
            lambda: sum_all(mul(neighbor_distances(x, 2), w)), [x]
        )


class TestComprehensiveRep:
    def test_output_shape_matches_stage_width(self):
        rng = np.random.default_rng(9)
        stage = make_stage(channels=6)
        fs = [Tensor(rng.standard_normal((7, 6))) for _ in range(4)]
        out = comprehensive_rep(fs, stage.compress)
        assert out.data.shape == (7, 6)

    def test_rows_unit_norm(self):
        rng = np.random.default_rng(10)
        stage = make_stage(channels=6)
        fs = [Tensor(rng.standard_normal((7, 6))) for _ in range(4)]
        out = comprehensive_rep(fs, stage.compress)
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), np.ones(7), atol=1e-9)

    def test_selector_weights_pick_first_branch(self):
        rng = np.random.default_rng(11)
        d, n = 5, 3
        w = np.zeros((d, n * d, 1))
        w[:, :d, 0] = np.eye(d)  # identity sub-block onto branch 1
        compress = Conv1dKernel(Tensor(w), Tensor(np.zeros(d)), 1)
        fs = [Tensor(rng.standard_normal((6, d))) for _ in range(n)]
        out = comprehensive_rep(fs, compress)
        want = fs[0].data / np.linalg.norm(fs[0].data, axis=1, keepdims=True)
        np.testing.assert_allclose(out.data, want, atol=1e-9)


class TestStageForward:
    def test_output_shape(self):
        rng = np.random.default_rng(12)
        stage = make_stage(channels=6, d_out=8, radius=2)
        x = seq_tensor(rng.standard_normal((9, 6)))
        assert stage_forward(x, stage, 2).data.shape == (9, 8)

    def test_alternative_fusion_reading_shape(self):
        rng = np.random.default_rng(13)
        stage = make_stage(channels=6, d_out=8, radius=2, fuse_distances=False)
        x = seq_tensor(rng.standard_normal((9, 6)))
        out = stage_forward(x, stage, 2, fuse_distances=False)
        assert out.data.shape == (9, 8)

    def test_constant_input_constant_interior(self):
        rng = np.random.default_rng(14)
        stage = make_stage(channels=4, n=4, d_out=6, radius=2)
        x = seq_tensor(np.tile(rng.standard_normal(4), (40, 1)))
        out = stage_forward(x, stage, 2).data
        # interior: beyond max branch reach (8+1) plus the distance radius
        interior = out[11:29]
        np.testing.assert_allclose(interior, np.tile(interior[0], (len(interior), 1)), atol=1e-10)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(15)
        stage = make_stage(seed=16, channels=5, n=3, d_out=7, radius=2)
        x = rng.standard_normal((12, 5))
        got = stage_forward(seq_tensor(x), stage, 2).data
        want = naive_stage_forward(x, stage, 2)
        np.testing.assert_allclose(got, want, atol=1e-8)

    def test_oracle_agreement_without_residual(self):
        rng = np.random.default_rng(17)
        stage = make_stage(seed=18, channels=4, n=2, d_out=5, radius=1)
        x = rng.standard_normal((8, 4))
        got = stage_forward(seq_tensor(x), stage, 1, use_residual=False).data
        want = naive_stage_forward(x, stage, 1, use_residual=False)
        np.testing.assert_allclose(got, want, atol=1e-8)


class TestTpsForward:
    def make_params(self, seed=19, dims=(4, 4, 4, 4), d_out=6, radius=2, **kwargs):
        rng = np.random.default_rng(seed)
        return init_tps(rng, dims, 4, d_out, radius, **kwargs)

    def make_inputs(self, seed, dims, t=20):
        rng = np.random.default_rng(seed)
        return [seq_tensor(rng.standard_normal((t, d))) for d in dims]

    def test_output_shape(self):
        params = self.make_params()
        xs = self.make_inputs(20, (4, 4, 4, 4))
        assert tps_forward(xs, params).data.shape == (20, 6)

    def test_stage_order_matters(self):
        params = self.make_params()
        xs = self.make_inputs(21, (4, 4, 4, 4))
        base = tps_forward(xs, params).data
        permuted = tps_forward([xs[1], xs[0], xs[2], xs[3]], params).data
        assert np.abs(base - permuted).max() > 1e-6

    def test_gradient_reaches_every_stage(self):
        params = self.make_params()
        rng = np.random.default_rng(22)
        xs = [Tensor(rng.standard_normal((20, 4)), requires_grad=True) for _ in range(4)]
        backward(sum_all(tps_forward(xs, params)))
        for x in xs:
            assert x.grad is not None
            assert np.abs(x.grad).max() > 0

    def test_time_locality(self):
        # reach: conv r=8 (+1 depthwise) + distance radius + final width-3 conv
        params = self.make_params(radius=2)
        radius_total = (8 + 1) + 2 + 1
        xs = self.make_inputs(23, (4, 4, 4, 4), t=40)
        base = tps_forward(xs, params).data
        t_perturb = 20
        arrays = [np.array(x.data) for x in xs]
        arrays[0][t_perturb] += 1.0
        out = tps_forward([seq_tensor(a) for a in arrays], params).data
        changed = np.flatnonzero(np.abs(out - base).max(axis=1) > 1e-12)
        assert changed.size > 0
        assert np.all(np.abs(changed - t_perturb) <= radius_total)

    def test_stage_count_checked(self):
        params = self.make_params()
        with pytest.raises(ValueError, match="stage inputs"):
            tps_forward(self.make_inputs(24, (4, 4, 4)), params)

    def test_radius_validated(self):
        params = self.make_params()
        with pytest.raises(ValueError, match="neighbor_radius"):
            TpsParams(params.stages, params.merge_conv, params.merge_norm, 0)


class TestSingleBranchStage:
    def test_n1_stage_matches_oracle(self):
        # single-view stage: distances over normalize(branch(I) + I) plus the
        # comprehensive view, checked against the straight-line oracle
        rng = np.random.default_rng(30)
        stage = make_stage(seed=31, channels=4, n=1, d_out=5, radius=2)
        x = rng.standard_normal((10, 4))
        got = stage_forward(seq_tensor(x), stage, 2).data
        want = naive_stage_forward(x, stage, 2)
        np.testing.assert_allclose(got, want, atol=1e-8)
