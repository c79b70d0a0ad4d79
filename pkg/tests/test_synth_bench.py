import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gengmm.core_types import Domain, LabelKind, RunConfig, SpecError
from gengmm.synth_bench import (
    ScenarioSpec,
    coarse_mask,
    confusion_matrix,
    evaluate,
    evaluate_predictions,
    generate,
    make_world,
    point_mask,
)
from gengmm.trainer import train


def small(**kw):
    base = dict(n_source=6, n_target=6, n_heldout=2, H=12, W=12, regions_per_scene=4, seed=1)
    base.update(kw)
    return ScenarioSpec(**base)


class TestSpec:
    @pytest.mark.parametrize("change", [
        {"label_fraction": 0.0}, {"label_fraction": 1.2}, {"noise_rate": 1.0}, {"noise_rate": -0.1},
        {"source_priors": [0.5, 0.6, 0.0, -0.1]}, {"target_priors": [1.0]}, {"target_annotation": "box"},
        {"C": 0},
    ])
    def test_invalid(self, change):
        with pytest.raises(SpecError):
            small(**change)

    def test_point_count_exceeding_region(self):
        with pytest.raises(SpecError):
            small(target_annotation="point", point_count=10_000)
        # fits the grid but not the smaller class regions
        with pytest.raises(SpecError):
            generate(small(target_annotation="point", point_count=140))

    def test_dict_round_trip(self):
        spec = small(source_priors=[0.1, 0.2, 0.3, 0.4])
        assert ScenarioSpec.from_dict(spec.to_dict()) == spec

    def test_unknown_key(self):
        with pytest.raises(SpecError):
            ScenarioSpec.from_dict({"colour": 1})


class TestGenerate:
    def test_sizes_and_domains(self):
        src, tgt, held = generate(small())
        assert (len(src), len(tgt), len(held)) == (6, 6, 2)
        assert all(s.domain == Domain.SOURCE for s in src)
        assert all(s.domain == Domain.TARGET for s in tgt + held)
        assert src[0].features.shape == (12, 12, 16)

    def test_pure_function(self):
        a, b = generate(small(noise_rate=0.2)), generate(small(noise_rate=0.2))
        for x, y in zip(itertools.chain(*a), itertools.chain(*b)):
            assert x == y

    def test_seed_changes_output(self):
        a, b = generate(small(seed=1)), generate(small(seed=2))
        assert not np.array_equal(a[0][0].features, b[0][0].features)

    def test_identity_transform(self):
        w = make_world(small(target_rotation=0.0, target_shift=0.0))
        assert np.allclose(w.rotation, np.eye(16), atol=1e-14) and not w.shift.any()

    def test_rotation_is_orthogonal(self):
        w = make_world(small(target_rotation=1.3))
        np.testing.assert_allclose(w.rotation @ w.rotation.T, np.eye(16), atol=1e-12)

    def test_label_fraction(self):
        src, _, _ = generate(small(n_source=20, label_fraction=0.5))
        kinds = [int(s.label_kind.max()) for s in src]
        assert kinds.count(0) == 10

    def test_label_shift_histogram(self):
        # one region per scene makes each scene a single multinomial draw of its class
        p = np.array([0.1, 0.2, 0.3, 0.4])
        n = 2000
        spec = ScenarioSpec(n_source=1, n_target=n, n_heldout=1, H=2, W=2, regions_per_scene=1,
                            target_priors=p.tolist(), seed=3)
        _, tgt, _ = generate(spec)
        counts = np.bincount([int(s.true_label[0, 0]) for s in tgt], minlength=4)
        assert all(len(np.unique(s.true_label)) == 1 for s in tgt)
        sd = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 3 * sd)

    def test_symmetric_noise_rate(self):
        src, _, _ = generate(small(n_source=40, noise_rate=0.3, H=16, W=16))
        given = np.concatenate([s.label_class.ravel() for s in src])
        true = np.concatenate([s.true_label.ravel() for s in src]).astype(int)
        flipped = given != true
        n = len(given)
        assert abs(flipped.mean() - 0.3) < 3 * np.sqrt(0.3 * 0.7 / n)
        # flips land on the other classes roughly uniformly
        off = np.bincount((given[flipped] - true[flipped]) % 4, minlength=4)
        assert off[0] == 0 and off[1:].min() > 0.8 * off[1:].max()
        assert all(s.label_kind.max() == LabelKind.NOISY for s in src)

    @pytest.mark.parametrize("annotation", ["none", "point", "coarse"])
    def test_weak_labels_match_truth(self, annotation):
        _, tgt, held = generate(small(target_annotation=annotation, coarse_erosion=1))
        for s in tgt:
            lab = s.label_kind > 0
            assert np.array_equal(s.label_class[lab], s.true_label[lab].astype(np.int16))
        assert all(not s.label_kind.any() for s in held)

    def test_null_shift_source_model_transfers(self, tiny_cfg):
        spec = ScenarioSpec(n_source=16, n_target=4, n_heldout=16, H=16, W=16, target_rotation=0.0,
                            target_shift=0.0, seed=2)
        src, tgt, held = generate(spec)
        cfg = RunConfig(**{**tiny_cfg.to_dict(), "iterations": 60, "use_unlabeled": False, "use_gmm_cl": False})
        res = train(cfg, src, tgt)
        on_src = evaluate(res.pair.teacher, src, 4).miou
        on_tgt = evaluate(res.pair.teacher, held, 4).miou
        assert abs(on_src - on_tgt) < 0.05


class TestMasks:
    def test_point_discs_stay_in_class(self):
        rng = np.random.default_rng(0)
        true = np.zeros((20, 20), int)
        true[:, 10:] = 1
        m = point_mask(rng, true, 4, 1, 2)
        assert m[:, :10].any() and m[:, 10:].any()
        # a clipped disc of radius 4 holds at most 49 cells
        assert m[:, :10].sum() <= 49 and m[:, 10:].sum() <= 49

    def test_point_radius_zero(self):
        rng = np.random.default_rng(0)
        true = np.arange(9).reshape(3, 3) % 2
        assert point_mask(rng, true, 0, 1, 2).sum() == 2

    def test_coarse_zero_erosion_is_full(self):
        true = np.random.default_rng(0).integers(0, 3, (8, 8))
        assert coarse_mask(true, 0, 3).all()

    def test_coarse_zero_erosion_scene_equals_full_labels(self):
        _, tgt, _ = generate(small(target_annotation="coarse", coarse_erosion=0))
        for s in tgt:
            assert (s.label_kind == LabelKind.COARSE).all()
            assert np.array_equal(s.label_class, s.true_label.astype(np.int16))

    def test_coarse_band(self):
        true = np.zeros((10, 10), int)
        true[:, 5:] = 1
        m = coarse_mask(true, 1, 2)
        # columns 4 and 5 border the other class
        assert not m[:, 4:6].any() and m[:, :4].all() and m[:, 6:].all()


class TestEvaluate:
    def test_perfect(self):
        t = np.array([0, 1, 2, 2])
        assert evaluate_predictions(t, t, 3).miou == 1.0

    def test_constant_on_balanced_two_class(self):
        r = evaluate_predictions(np.array([0, 0, 1, 1]), np.zeros(4, int), 2)
        assert r.iou.tolist() == [0.5, 0.0] and r.miou == 0.25

    def test_absent_class_excluded(self):
        r = evaluate_predictions(np.array([0, 1]), np.array([0, 1]), 3)
        assert np.isnan(r.iou[2]) and r.miou == 1.0

    def test_confusion_orientation(self):
        cm = confusion_matrix([0, 0, 1], [1, 1, 1], 2)
        assert cm.tolist() == [[0, 2], [0, 1]]

    @settings(max_examples=40)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        r = np.random.default_rng(seed)
        t, p = r.integers(0, 4, 50), r.integers(0, 4, 50)
        perm = r.permutation(4)
        assert evaluate_predictions(t, p, 4).miou == pytest.approx(
            evaluate_predictions(perm[t], perm[p], 4).miou, abs=1e-15)

    @given(st.integers(0, 2**32 - 1))
    def test_bounds(self, seed):
        r = np.random.default_rng(seed)
        res = evaluate_predictions(r.integers(0, 3, 30), r.integers(0, 3, 30), 3)
        iou = res.iou[~np.isnan(res.iou)]
        assert np.all((iou >= 0) & (iou <= 1))
        assert res.miou == pytest.approx(iou.mean())

    def test_to_dict_json_safe(self):
        import json

        d = evaluate_predictions(np.array([0, 1]), np.array([0, 1]), 3).to_dict()
        assert json.loads(json.dumps(d))["iou"][2] is None
