"""Tests for attention aggregation, heads, inference modes and persistence."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from r4d.diffcore import PreconditionError, Tensor, gradient_check
from r4d.features import PackedPairs
from r4d.model import (
    INFERENCE_FLOOR_M,
    ModelConfig,
    R4DModel,
    absolute_head,
    attention_aggregate,
    forward,
    relative_head,
)
from r4d.records import CameraModel, Dataset, RenderedObject, Scene
from r4d.scenesim import APPEARANCE_DIM, SceneSpec, generate_dataset
from r4d.training import compute_loss

SMALL = ModelConfig(embed_dim=8, attn_hidden=8, head_hidden=8)


def obj(i, bbox, ref, dist):
    app = np.linspace(-1, 1, APPEARANCE_DIM) * (i + 1) / 3
    return RenderedObject(i, bbox, app, ref, known_distance_m=dist if ref else None,
                          label_distance_m=None if ref else dist, true_distance_m=dist)


def one_ref_scene(dr=100.0):
    return Scene("one", CameraModel(), [obj(0, (900.0, 545.0, 10.0, 6.0), False, 180.0),
                                        obj(1, (700.0, 600.0, 40.0, 25.0), True, dr)])


def zero_weights(model, prefix):
    for k, p in model.params.items():
        if k.startswith(prefix + "."):
            p.data[...] = 0.0


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(SceneSpec(n_references=(2, 7)), 6, 11)


class TestAttention:
    def test_single_pair(self):
        model = R4DModel(SMALL, seed=1)
        e = np.random.default_rng(0).normal(size=(1, 32))
        out = attention_aggregate(e, model)
        np.testing.assert_array_equal(out.weights, [1.0])
        np.testing.assert_array_equal(out.fused, e[0])

    def test_identical_pairs_split_evenly(self):
        model = R4DModel(SMALL, seed=1)
        e = np.tile(np.random.default_rng(0).normal(size=32), (2, 1))
        out = attention_aggregate(e, model)
        np.testing.assert_allclose(out.weights, [0.5, 0.5], rtol=0, atol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(PreconditionError):
            attention_aggregate(np.zeros((0, 32)), R4DModel(SMALL))

    @given(st.integers(1, 12), st.integers(0, 2**31))
    @settings(max_examples=40, deadline=None)
    def test_invariants(self, k, seed):
        rng = np.random.default_rng(seed)
        model = R4DModel(SMALL, seed=seed % 1000)
        e = rng.normal(size=(k, 32)) * rng.uniform(0.1, 5)
        out = attention_aggregate(e, model)
        assert np.all(out.weights >= 0)
        assert abs(out.weights.sum() - 1) <= 1e-9
        np.testing.assert_allclose(out.fused, out.weights @ e, rtol=0, atol=1e-12)
        perm = rng.permutation(k)
        shuffled = attention_aggregate(e[perm], model)
        np.testing.assert_allclose(shuffled.weights, out.weights[perm], rtol=0, atol=1e-12)
        np.testing.assert_allclose(shuffled.fused, out.fused, rtol=0, atol=1e-12)


class TestHeads:
    def test_zero_init_constant(self):
        model = R4DModel(SMALL, seed=0)
        zero_weights(model, "abs")
        model.set_output_offsets(120.0, 0.0)
        outs = [absolute_head(np.random.default_rng(s).normal(size=32), model) for s in range(5)]
        assert outs == [pytest.approx(120.0)] * 5

    def test_clamp(self):
        model = R4DModel(SMALL, seed=0)
        zero_weights(model, "abs")
        model.set_output_offsets(-5.0, 0.0)
        assert absolute_head(np.ones(32), model, inference=False) == pytest.approx(-5.0)
        assert absolute_head(np.ones(32), model) == INFERENCE_FLOOR_M == 1.0

    @pytest.mark.parametrize("head", ["abs", "rel"])
    def test_gradient(self, head):
        model = R4DModel(SMALL, seed=2)
        x = Tensor(np.random.default_rng(0).normal(size=(3, 32)))
        fn = model.absolute_head if head == "abs" else model.relative_head
        params = {k: v for k, v in model.params.items() if k.startswith(head + ".")}
        assert gradient_check(lambda: (fn(x) * fn(x)).sum() * 1e-3, params) < 1e-4

    def test_relative_head_scalar(self):
        model = R4DModel(SMALL, seed=2)
        zero_weights(model, "rel")
        model.set_output_offsets(0.0, 120.0)
        assert relative_head(np.ones(32), model) == pytest.approx(120.0)


class TestForward:
    def test_zero_references_fallback(self):
        scene = Scene("z", CameraModel(), [obj(0, (900.0, 545.0, 10.0, 6.0), False, 180.0)])
        pred = forward(scene, scene.objects[0], R4DModel(SMALL, seed=0))
        assert pred.per_pair_relative_m == [] and pred.attention == [] and pred.reference_ids == []
        assert np.isfinite(pred.absolute_m) and pred.absolute_m >= 1.0

    def test_zero_references_relative_only_rejected(self):
        scene = Scene("z", CameraModel(), [obj(0, (900.0, 545.0, 10.0, 6.0), False, 180.0)])
        with pytest.raises(PreconditionError):
            forward(scene, scene.objects[0], R4DModel(SMALL), mode="relative_only")

    def test_relative_only_adds_reference_distance(self):
        model = R4DModel(SMALL, seed=0)
        zero_weights(model, "rel")
        model.set_output_offsets(0.0, 30.0)
        scene = one_ref_scene(100.0)
        pred = forward(scene, scene.objects[0], model, mode="relative_only")
        assert pred.absolute_m == pytest.approx(130.0)
        assert pred.per_pair_relative_m == [pytest.approx(30.0)]

    def test_no_attention_uses_mean(self, scenes):
        model = R4DModel(SMALL, seed=4)
        packed = PackedPairs(scenes, 50, 300.0)
        targets, pairs = packed.batch_targets(np.arange(packed.n_targets))
        out = model.forward_batch(packed, targets, pairs, mode="no_attention")
        emb = out.pair_embeddings.data
        for k, t in enumerate(targets):
            sel = out.pair_local_target == k
            if sel.any():
                np.testing.assert_allclose(out.weights[sel], 1.0 / sel.sum(), rtol=0, atol=1e-15)
                np.testing.assert_allclose(out.fused.data[k], emb[sel].mean(axis=0), rtol=0, atol=1e-12)

    def test_batch_weights_sum_to_one(self, scenes):
        model = R4DModel(SMALL, seed=4)
        packed, (_, weights, _) = model.predict_dataset(scenes, 50)
        sums = np.bincount(packed.pair_target, weights, minlength=packed.n_targets)
        has = np.diff(packed.target_pstart) > 0
        np.testing.assert_allclose(sums[has], 1.0, rtol=0, atol=1e-9)

    def test_reference_permutation(self, scenes):
        model = R4DModel(SMALL, seed=5)
        scene = scenes.scenes[0]
        rng = np.random.default_rng(0)
        objs = list(scene.objects)
        shuffled = Scene(scene.scene_id, scene.camera, [objs[i] for i in rng.permutation(len(objs))],
                         scene.regime, dict(scene.road_gaps))
        for t in scene.targets:
            a = forward(scene, t, model)
            b = forward(shuffled, t, model)
            assert abs(a.absolute_m - b.absolute_m) <= 1e-12
            ka = sorted(zip(a.reference_ids, a.attention, a.per_pair_relative_m))
            kb = sorted(zip(b.reference_ids, b.attention, b.per_pair_relative_m))
            for x, y in zip(ka, kb):
                assert x[0] == y[0]
                assert abs(x[1] - y[1]) <= 1e-12 and abs(x[2] - y[2]) <= 1e-12

    def test_single_target_api_matches_batch(self, scenes):
        model = R4DModel(SMALL, seed=6)
        packed, (preds, weights, rel) = model.predict_dataset(scenes, 50)
        for t in range(packed.n_targets):
            scene = scenes.scenes[packed.target_scene[t]]
            pred = forward(scene, scene.get(int(packed.target_object[t])), model)
            assert abs(pred.absolute_m - preds[t]) <= 1e-9
            block = slice(packed.target_pstart[t], packed.target_pstart[t + 1])
            np.testing.assert_allclose(pred.attention, weights[block], rtol=0, atol=1e-12)
            np.testing.assert_allclose(pred.per_pair_relative_m, rel[block], rtol=0, atol=1e-9)


class TestFullGradient:
    def test_forward_and_loss(self, scenes):
        model = R4DModel(SMALL, seed=7)
        packed = PackedPairs(scenes, 50, 300.0)
        targets, pairs = packed.batch(np.arange(2))
        labels = packed.target_label[targets]
        local = np.repeat(np.arange(targets.size), np.diff(packed.target_pstart)[targets])
        dr = packed.pair_dr[pairs]

        def loss():
            out = model.forward_batch(packed, targets, pairs)
            return compute_loss(out.absolute, labels, out.relative, labels[local] - dr, local, 1.0)

        # the untrained loss is a few hundred while attention gradients are ~1e-5, so a
        # tiny step drowns the difference quotient in round-off; 1e-4 balances that
        # against the O(h^2) truncation error
        err = gradient_check(loss, model.params, h=1e-4, n_samples=200, rng=np.random.default_rng(0))
        assert err < 1e-4


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path, scenes):
        model = R4DModel(ModelConfig(embed_dim=8, attn_hidden=8, head_hidden=8, mode="no_attention"), seed=3)
        model.save(tmp_path / "m.ckpt", {"note": "x"})
        back, meta = R4DModel.load(tmp_path / "m.ckpt")
        assert back.config == model.config and meta["note"] == "x"
        for k in model.params:
            assert back.params[k].data.tobytes() == model.params[k].data.tobytes()
        np.testing.assert_array_equal(back.predict_dataset(scenes, 50)[1][0], model.predict_dataset(scenes, 50)[1][0])

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ModelConfig(mode="fast")
