import itertools

import numpy as np
import pytest

from sparsepool.errors import ConfigurationError, DataError, ShapeError
from sparsepool.model import (
    CropPlan,
    ModelInputs,
    ModelSpec,
    _trunk_backward,
    cross_crop_backward,
    cross_crop_pool,
    cross_crop_pool_fixed,
    init_params,
    make_crop_plan,
    model_backward,
    model_forward,
    model_forward_fixed,
    resized_dims,
)
from sparsepool.pooling import PoolMode, Schedule, pool_forward


def tiny_spec(kind, pool="avg", lam=2.0, classes=3):
    return ModelSpec(
        kind=kind,
        num_classes=classes,
        global_input_size=8,
        local_crop_size=8,
        pool_mode=PoolMode(pool, lam=lam),
        trunk_widths=(2, 3),
    )


def tiny_inputs(rng, spec, n=2, dtype=np.float64):
    gx = rng.normal(size=(n, 3, spec.global_input_size, spec.global_input_size))
    crops = rng.normal(size=(4, n, 3, spec.local_crop_size, spec.local_crop_size))
    return ModelInputs(
        global_view=gx.astype(dtype) if spec.uses_global else None,
        crops=crops.astype(dtype) if spec.uses_local else None,
    )


class TestModelSpec:
    def test_rejects_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(kind="hydra", num_classes=3)

    def test_rejects_wrong_crop_count(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(kind="local", num_classes=3, crops_per_image=3)

    def test_global_kind_ignores_crop_count(self):
        spec = ModelSpec(kind="global", num_classes=3, crops_per_image=7)
        assert not spec.uses_local

    def test_rejects_indivisible_size(self):
        with pytest.raises(ConfigurationError):
            ModelSpec(kind="global", num_classes=3, global_input_size=30,
                      trunk_widths=(2, 2, 2))
        with pytest.raises(ConfigurationError):
            ModelSpec(kind="global", num_classes=3, global_input_size=31,
                      trunk_widths=(2, 2))

    def test_feature_dim_counts_branches(self):
        assert tiny_spec("global").feature_dim == 3
        assert tiny_spec("local").feature_dim == 3
        assert tiny_spec("multires").feature_dim == 6


class TestInitParams:
    def test_keys_per_kind(self):
        g = set(init_params(tiny_spec("global"), 0))
        l = set(init_params(tiny_spec("local"), 0))
        m = set(init_params(tiny_spec("multires"), 0))
        assert g == {"g.conv0.w", "g.conv0.b", "g.conv1.w", "g.conv1.b", "head.w", "head.b"}
        assert l == {"l.conv0.w", "l.conv0.b", "l.conv1.w", "l.conv1.b", "head.w", "head.b"}
        assert m == g | l

    def test_head_shape_matches_feature_dim(self):
        params = init_params(tiny_spec("multires"), 0)
        assert params["head.w"].shape == (3, 6)

    def test_seeded_repeatability(self):
        a = init_params(tiny_spec("multires"), 9)
        b = init_params(tiny_spec("multires"), 9)
        for key in a:
            np.testing.assert_array_equal(a[key], b[key])


class TestCrossCropPool:
    def test_constant_crops_match_single_map(self):
        maps = [np.full((2, 3, 4, 4), 1.5) for _ in range(4)]
        sch = Schedule(5, 20)
        for kind in ("avg", "max", "outlier", "dynamic"):
            mode = PoolMode(kind, lam=2.0)
            feats, _ = cross_crop_pool(maps, mode, sch if kind == "dynamic" else None)
            single, _ = pool_forward(maps[0], mode, sch if kind == "dynamic" else None)
            np.testing.assert_allclose(feats, single, rtol=0, atol=1e-12)

    def test_average_is_mean_of_crop_averages(self):
        rng = np.random.default_rng(50)
        maps = [rng.normal(size=(2, 3, 5, 5)) for _ in range(4)]
        feats, _ = cross_crop_pool(maps, PoolMode("avg"))
        per_crop = [pool_forward(m, PoolMode("avg"))[0] for m in maps]
        np.testing.assert_allclose(feats, np.mean(per_crop, axis=0), atol=1e-12)

    def test_spike_in_one_crop_gets_full_credit(self):
        # Union of 16 values: one 8 and fifteen 0s. Union mean 0.5,
        # variance 3.75, threshold 0.5 + 2*sqrt(3.75) ~ 4.37 < 8, so the
        # spike is selected and the pooled value is exactly 8.
        maps = [np.zeros((1, 1, 2, 2)) for _ in range(4)]
        maps[1][0, 0, 1, 0] = 8.0
        feats, ctx = cross_crop_pool(maps, PoolMode("outlier", lam=2.0))
        assert feats[0, 0] == 8.0
        assert ctx.count[0, 0] == 1.0
        # Pooling each crop separately then averaging dilutes the spike:
        # the spike crop alone has threshold ~ 8.93, falls back to max 8,
        # and the three zero crops pool to 0, giving (8+0+0+0)/4 = 2.
        per_crop = [pool_forward(m, PoolMode("outlier", lam=2.0))[0] for m in maps]
        assert np.mean(per_crop, axis=0)[0, 0] == 2.0

    def test_matches_concatenated_pool_forward(self):
        rng = np.random.default_rng(51)
        sch = Schedule(7, 20)
        for kind in ("avg", "max", "outlier", "dynamic"):
            mode = PoolMode(kind, lam=1.5)
            maps = [rng.normal(size=(2, 3, 4, 5)) for _ in range(4)]
            feats, _ = cross_crop_pool(maps, mode, sch if kind == "dynamic" else None)
            union = np.concatenate(maps, axis=2)
            want, _ = pool_forward(union, mode, sch if kind == "dynamic" else None)
            np.testing.assert_allclose(feats, want, rtol=0, atol=1e-12)

    def test_bitwise_crop_permutation_invariance(self):
        rng = np.random.default_rng(52)
        maps = [rng.normal(size=(2, 3, 4, 4)).astype(np.float32) for _ in range(4)]
        sch = Schedule(13, 20)
        for kind in ("avg", "max", "outlier", "dynamic"):
            mode = PoolMode(kind, lam=2.0)
            base, _ = cross_crop_pool(maps, mode, sch if kind == "dynamic" else None)
            for perm in itertools.permutations(range(4)):
                shuffled = [maps[i] for i in perm]
                feats, _ = cross_crop_pool(
                    shuffled, mode, sch if kind == "dynamic" else None
                )
                np.testing.assert_array_equal(feats, base)

    def test_union_fallback_behaves_like_union_max(self):
        # Every crop constant except one slightly raised location keeps
        # the union z-score below lam, so the union mask goes empty.
        maps = [np.zeros((1, 1, 2, 2)) for _ in range(4)]
        maps[2] += np.array([[0.0, 0.0], [0.0, 1.0]])
        maps[2][0, 0] *= 1.0
        feats, ctx = cross_crop_pool(maps, PoolMode("outlier", lam=4.0))
        assert ctx.empty[0, 0]
        assert feats[0, 0] == 1.0
        grads = cross_crop_backward(np.array([[1.0]]), ctx)
        assert grads[2][0, 0, 1, 1] == 1.0
        assert grads.sum() == 1.0

    def test_backward_routing_max(self):
        maps = [np.zeros((1, 2, 2, 2)) for _ in range(4)]
        maps[3][0, 0, 0, 1] = 5.0
        maps[1][0, 1, 1, 1] = 7.0
        _, ctx = cross_crop_pool(maps, PoolMode("max"))
        grads = cross_crop_backward(np.array([[2.0, 3.0]]), ctx)
        assert grads[3][0, 0, 0, 1] == 2.0
        assert grads[1][0, 1, 1, 1] == 3.0
        assert grads.sum() == 5.0

    def test_backward_average_spreads_over_union(self):
        maps = [np.zeros((1, 1, 2, 2)) for _ in range(4)]
        _, ctx = cross_crop_pool(maps, PoolMode("avg"))
        grads = cross_crop_backward(np.array([[16.0]]), ctx)
        np.testing.assert_array_equal(grads, np.ones((4, 1, 1, 2, 2)))

    def test_backward_linear_in_grad(self):
        rng = np.random.default_rng(53)
        maps = [rng.normal(size=(2, 3, 3, 3)) for _ in range(4)]
        g = rng.normal(size=(2, 3))
        for kind, sch in (("outlier", None), ("dynamic", Schedule(4, 20))):
            _, ctx = cross_crop_pool(maps, PoolMode(kind, lam=1.0), sch)
            a = cross_crop_backward(2.5 * g, ctx)
            b = cross_crop_backward(g, ctx)
            np.testing.assert_allclose(a, 2.5 * b, atol=1e-12)

    def test_fixed_matches_forward_at_base_point(self):
        rng = np.random.default_rng(54)
        maps = [rng.normal(size=(2, 2, 3, 3)) for _ in range(4)]
        sch = Schedule(11, 20)
        for kind in ("avg", "max", "outlier", "dynamic"):
            mode = PoolMode(kind, lam=2.0)
            feats, ctx = cross_crop_pool(maps, mode, sch if kind == "dynamic" else None)
            np.testing.assert_array_equal(cross_crop_pool_fixed(maps, ctx), feats)

    def test_rejects_mismatched_shapes(self):
        with pytest.raises(ShapeError):
            cross_crop_pool(
                [np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3))], PoolMode("avg")
            )


class TestModelForward:
    def test_logit_shapes_per_kind(self):
        rng = np.random.default_rng(60)
        for kind in ("global", "local", "multires"):
            spec = tiny_spec(kind)
            params = init_params(spec, 1)
            logits, _ = model_forward(tiny_inputs(rng, spec), spec, params)
            assert logits.shape == (2, 3)

    def test_multires_concat_dimension(self):
        spec = tiny_spec("multires")
        params = init_params(spec, 1)
        assert params["head.w"].shape[1] == 2 * spec.trunk_widths[-1]

    def test_local_logits_invariant_to_crop_order(self):
        rng = np.random.default_rng(61)
        spec = tiny_spec("local", pool="outlier")
        params = init_params(spec, 2)
        inputs = tiny_inputs(rng, spec, dtype=np.float32)
        base, _ = model_forward(inputs, spec, params)
        for perm in ((3, 1, 0, 2), (1, 0, 3, 2), (2, 3, 0, 1)):
            shuffled = ModelInputs(crops=inputs.crops[list(perm)])
            logits, _ = model_forward(shuffled, spec, params)
            np.testing.assert_array_equal(logits, base)

    def test_constant_image_hand_computed_one_block_trunk(self):
        # One conv block (3->2, all-ones kernels, zero bias), 4x4 constant
        # input of 1s, same padding: tap counts are 4 at corners, 6 on
        # edges, 9 inside, so the map sums to 3 * 100 and average pooling
        # gives 300/16 = 18.75 on both channels. An identity head then
        # reproduces that value in both logits.
        spec = ModelSpec(
            kind="global", num_classes=2, global_input_size=4,
            local_crop_size=4, pool_mode=PoolMode("avg"), trunk_widths=(2,),
        )
        params = {
            "g.conv0.w": np.ones((2, 3, 3, 3)),
            "g.conv0.b": np.zeros(2),
            "head.w": np.eye(2),
            "head.b": np.zeros(2),
        }
        inputs = ModelInputs(global_view=np.ones((1, 3, 4, 4)))
        logits, _ = model_forward(inputs, spec, params)
        np.testing.assert_allclose(logits, [[18.75, 18.75]], atol=1e-12)

    def test_dynamic_requires_schedule(self):
        rng = np.random.default_rng(62)
        spec = tiny_spec("global", pool="dynamic")
        params = init_params(spec, 1)
        with pytest.raises(ConfigurationError):
            model_forward(tiny_inputs(rng, spec), spec, params)

    def test_missing_crops_rejected(self):
        spec = tiny_spec("local")
        params = init_params(spec, 1)
        with pytest.raises(ShapeError):
            model_forward(ModelInputs(global_view=np.zeros((1, 3, 8, 8))), spec, params)

    def test_branch_batch_mismatch_rejected(self):
        spec = tiny_spec("multires")
        params = init_params(spec, 1)
        inputs = ModelInputs(
            global_view=np.zeros((2, 3, 8, 8)), crops=np.zeros((4, 3, 3, 8, 8))
        )
        with pytest.raises(ShapeError):
            model_forward(inputs, spec, params)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(63)
        spec = tiny_spec("multires", pool="dynamic")
        params = init_params(spec, 3)
        inputs = tiny_inputs(rng, spec, dtype=np.float32)
        sch = Schedule(6, 20)
        a, _ = model_forward(inputs, spec, params, sch)
        b, _ = model_forward(inputs, spec, params, sch)
        np.testing.assert_array_equal(a, b)


class TestModelBackward:
    def test_zero_grad_logits_zero_param_grads(self):
        rng = np.random.default_rng(70)
        spec = tiny_spec("multires", pool="outlier")
        params = init_params(spec, 4)
        logits, ctx = model_forward(tiny_inputs(rng, spec), spec, params)
        grads = model_backward(np.zeros_like(logits), ctx)
        assert set(grads) == set(params)
        for key in grads:
            np.testing.assert_array_equal(grads[key], 0.0)

    def test_doubling_grad_logits_doubles_param_grads(self):
        rng = np.random.default_rng(71)
        spec = tiny_spec("multires", pool="dynamic")
        params = init_params(spec, 5)
        inputs = tiny_inputs(rng, spec)
        logits, ctx = model_forward(inputs, spec, params, Schedule(9, 20))
        g = np.random.default_rng(1).normal(size=logits.shape)
        grads1 = model_backward(g, ctx)
        grads2 = model_backward(2.0 * g, ctx)
        for key in grads1:
            np.testing.assert_allclose(grads2[key], 2.0 * grads1[key], atol=1e-10)

    def test_shared_trunk_grad_is_sum_over_crops(self):
        rng = np.random.default_rng(72)
        spec = tiny_spec("local", pool="outlier")
        params = init_params(spec, 6)
        inputs = tiny_inputs(rng, spec)
        logits, ctx = model_forward(inputs, spec, params)
        g = rng.normal(size=logits.shape)
        grads = model_backward(g, ctx)

        from sparsepool.layers import dense_backward
        gfeats, _, _ = dense_backward(g, ctx.head_ctx)
        crop_grads = cross_crop_backward(gfeats, ctx.l_pool).astype(ctx.map_dtype)
        summed = {}
        for i in range(4):
            part = {}
            _trunk_backward(crop_grads[i], ctx.l_blocks[i], "l", part)
            for key, value in part.items():
                summed[key] = summed.get(key, 0) + value
        for key in summed:
            np.testing.assert_allclose(grads[key], summed[key], rtol=0, atol=1e-10)

    def test_fixed_forward_matches_at_base_point(self):
        rng = np.random.default_rng(73)
        sch = Schedule(14, 20)
        for kind in ("global", "local", "multires"):
            spec = tiny_spec(kind, pool="dynamic")
            params = init_params(spec, 7)
            inputs = tiny_inputs(rng, spec)
            logits, ctx = model_forward(inputs, spec, params, sch)
            replay = model_forward_fixed(inputs, spec, params, ctx)
            np.testing.assert_array_equal(replay, logits)


class TestResizedDims:
    def test_landscape(self):
        assert resized_dims(48, 96, 32) == (32, 64)

    def test_portrait(self):
        assert resized_dims(96, 48, 32) == (64, 32)

    def test_square_identity(self):
        assert resized_dims(64, 64, 64) == (64, 64)


class TestMakeCropPlan:
    def spec(self):
        return ModelSpec(
            kind="multires", num_classes=3, global_input_size=8,
            local_crop_size=4, pool_mode=PoolMode("avg"), trunk_widths=(2, 2),
        )

    def test_test_mode_quadrants_on_exact_image(self):
        plan = make_crop_plan((8, 8), self.spec(), "test", 0)
        assert plan.local_resized == (8, 8)
        assert plan.local_origins == ((0, 0), (4, 0), (0, 4), (4, 4))
        assert plan.global_origin == (0, 0)
        assert not plan.flip_h and not plan.flip_v

    def test_test_mode_centers_larger_image(self):
        plan = make_crop_plan((16, 32), self.spec(), "test", 0)
        # Local resize target 8: (16, 32) -> (8, 16); center 8x8 box at x=4.
        assert plan.local_resized == (8, 16)
        assert plan.local_origins[0] == (4, 0)
        assert plan.local_origins[3] == (8, 4)

    def test_train_mode_is_deterministic_given_seed(self):
        a = make_crop_plan((16, 32), self.spec(), "train", 123)
        b = make_crop_plan((16, 32), self.spec(), "train", 123)
        assert a == b

    def test_train_origins_stay_in_bounds(self):
        spec = self.spec()
        for seed in range(50):
            plan = make_crop_plan((16, 32), spec, "train", seed)
            rh, rw = plan.local_resized
            for ox, oy in plan.local_origins:
                assert 0 <= ox <= rw - plan.local_size
                assert 0 <= oy <= rh - plan.local_size
            gh, gw = plan.global_resized
            gx, gy = plan.global_origin
            assert 0 <= gx <= gw - plan.global_size
            assert 0 <= gy <= gh - plan.global_size

    def test_too_small_image_names_dimension(self):
        with pytest.raises(DataError, match="height 6"):
            make_crop_plan((6, 40), self.spec(), "train", 0)
        with pytest.raises(DataError, match="width 7"):
            make_crop_plan((40, 7), self.spec(), "test", 0)

    def test_rejects_unknown_mode(self):
        with pytest.raises(ConfigurationError):
            make_crop_plan((16, 16), self.spec(), "validate", 0)

    def test_crop_origins_uniform_over_valid_range(self):
        # Local branch on a (16, 24) image resizes to (8, 12); with 4x4
        # crops the origin grid is 9 x 5 = 45 cells. 10,000 draws give an
        # expected 222.2 per cell; the statistic is compared against the
        # chi-square 0.99 quantile at 44 degrees of freedom (68.71).
        spec = ModelSpec(
            kind="local", num_classes=3, local_crop_size=4,
            pool_mode=PoolMode("avg"), trunk_widths=(2, 2),
        )
        counts = np.zeros((9, 5))
        for seed in range(2500):
            plan = make_crop_plan((16, 24), spec, "train", seed)
            for ox, oy in plan.local_origins:
                counts[ox, oy] += 1
        total = counts.sum()
        assert total == 10000
        expected = total / counts.size
        chi2 = ((counts - expected) ** 2 / expected).sum()
        assert chi2 < 68.71, f"chi-square {chi2:.2f} exceeds the 0.99 quantile"
