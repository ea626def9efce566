import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probtal import features
from probtal.evaluate import temporal_iou
from probtal.localize import (LocalizeConfig, Proposal, candidate_runs, fuse_scores,
                              generate_proposals, read_results, results_to_json, soft_nms,
                              write_results)


def imap(T, spf=1.0):
    return features.IndexMap(np.arange(T), T, spf, T * spf)


def P(start, end, score, cls=0, vid="v"):
    return Proposal(vid, cls, start, end, score)


class TestFuse:
    def test_endpoints(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        soft = lambda x: np.exp(x) / np.exp(x).sum(1, keepdims=True)
        np.testing.assert_allclose(fuse_scores(a, b, 1.0), soft(a), rtol=1e-12)
        np.testing.assert_allclose(fuse_scores(a, b, 0.0), soft(b), rtol=1e-12)

    @given(st.integers(0, 10_000), st.floats(0, 1))
    @settings(max_examples=30)
    def test_rows_sum_to_one(self, seed, w):
        rng = np.random.default_rng(seed)
        s = fuse_scores(rng.normal(size=(5, 3)) * 10, rng.normal(size=(5, 3)) * 10, w)
        np.testing.assert_allclose(s.sum(1), 1.0, rtol=1e-12)

    def test_bad_weight(self):
        with pytest.raises(ValueError):
            LocalizeConfig(fusion_weight=1.5)

    def test_bad_thresholds(self):
        with pytest.raises(ValueError):
            LocalizeConfig(thresholds=[0.5, 0.3])
        with pytest.raises(ValueError):
            LocalizeConfig(thresholds=[0.0, 0.5])


class TestGenerate:
    def test_zero_actionness(self):
        s = np.full((10, 3), 1 / 3)
        assert generate_proposals("v", s, np.zeros(10), np.array([0.9, 0.05, 0.05]),
                                  LocalizeConfig(), imap(10)) == []

    def test_no_selected_class(self):
        s = np.full((10, 3), 1 / 3)
        assert generate_proposals("v", s, np.ones(10), np.array([0.1, 0.1, 0.8]),
                                  LocalizeConfig(), imap(10)) == []

    def test_uniform_run_gives_one_proposal(self):
        a = np.zeros(20)
        a[5:12] = 0.99
        s = np.tile([0.8, 0.1, 0.1], (20, 1))
        props = generate_proposals("v", s, a, np.array([0.9, 0.05, 0.05]), LocalizeConfig(), imap(20))
        assert len(props) == 1
        p = props[0]
        assert (p.class_id, p.start, p.end) == (0, 5.0, 12.0)
        # flat scores: contrast term vanishes, leaving p_supp
        assert p.score == pytest.approx(0.9)

    def test_outer_inner_score(self):
        a = np.zeros(12)
        a[4:8] = 0.95
        s = np.tile([0.2, 0.8], (12, 1)).astype(float)
        s[4:8, 0] = 0.7
        props = generate_proposals("v", s, a, np.array([0.6, 0.4]), LocalizeConfig(), imap(12))
        # inner mean 0.7, outer one snippet either side (0.25 * 4) at 0.2
        assert [p.score for p in props] == [pytest.approx(0.7 - 0.2 + 0.6)]

    def test_class_is_argmax_among_selected(self):
        a = np.full(8, 0.9)
        s = np.tile([0.4, 0.1, 0.5], (8, 1))
        s[4:, :2] = [0.1, 0.4]
        props = generate_proposals("v", s, a, np.array([0.45, 0.45, 0.1]), LocalizeConfig(), imap(8))
        assert sorted((p.class_id, p.start, p.end) for p in props) == [(0, 0.0, 4.0), (1, 4.0, 8.0)]

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_threshold_containment(self, seed):
        rng = np.random.default_rng(seed)
        T = 40
        a = np.convolve(rng.random(T), np.ones(3) / 3, mode="same")
        s = rng.random((T, 3))
        ths = LocalizeConfig().thresholds
        for lo, hi in zip(ths, ths[1:]):
            r_lo = candidate_runs(s, a, [0, 1], lo)
            r_hi = candidate_runs(s, a, [0, 1], hi)
            for c in r_hi:
                for f, l in r_hi[c]:
                    assert any(f0 <= f and l <= l0 for f0, l0 in r_lo[c])

    @given(st.integers(0, 10_000), st.integers(5, 50), st.integers(3, 64))
    @settings(max_examples=40, deadline=None)
    def test_times_within_duration(self, seed, t_raw, T):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(t_raw, 2)).astype(np.float32)
        b = features.SnippetFeatureBundle("v", x, x, x, fps=25.0, duration=t_raw * 16 / 25)
        im = features.sample_snippets(b, T).index_map
        props = generate_proposals("v", rng.random((T, 3)), rng.random(T), np.array([0.5, 0.5, 0.0]),
                                   LocalizeConfig(), im)
        for p in props:
            assert 0 <= p.start < p.end <= b.duration + 1e-9
            assert math.isfinite(p.score)

    def test_planted_video(self):
        """Oracle activations from a clean synthetic video: top proposal hits its segment."""
        cfg = features.SynthConfig(num_classes=3, dim=8, vlp_dim=8, num_train=0, num_test=4,
                                   feature_noise=0.0, flow_noise=0.0, vlp_noise=0.0)
        ds = features.synthesize_dataset(cfg, 21)
        proto = features.feature_prototypes(cfg, 21)
        for b, g in zip(ds.bundles, ds.truths):
            samp = features.sample_snippets(b, 64)
            d = ((samp.rgb[:, None, :] - proto[None]) ** 2).sum(-1)
            s_final = fuse_scores(-20 * d, -20 * d, 0.5)
            a = 1.0 - s_final[:, -1]
            props = soft_nms(generate_proposals(b.video_id, s_final, a, np.append(g.labels, 0.0),
                                                LocalizeConfig(), samp.index_map))
            top = max(props, key=lambda p: p.score)
            best = max(temporal_iou((top.start, top.end), (s.start, s.end))
                       for s in g.segments if s.class_id == top.class_id)
            assert best >= 0.5


class TestSoftNMS:
    def test_identical_pair(self):
        out = soft_nms([P(0, 10, 0.9), P(0, 10, 0.8)], 0.3)
        assert [p.score for p in out] == [0.9, pytest.approx(0.8 * math.exp(-1 / 0.3), abs=1e-6)]

    def test_partial_overlap(self):
        out = soft_nms([P(0, 10, 0.9), P(5, 15, 0.6)], 0.3)
        assert out[1].score == pytest.approx(0.6 * math.exp(-(1 / 3) ** 2 / 0.3), abs=1e-6)

    def test_chained_decay(self):
        # second pick is decayed before it decays the third
        out = soft_nms([P(0, 10, 0.9), P(0, 10, 0.8), P(0, 10, 0.7)], 0.5)
        e = math.exp(-1 / 0.5)
        np.testing.assert_allclose([p.score for p in out], [0.9, 0.8 * e, 0.7 * e * e], atol=1e-6)

    def test_single_unchanged(self):
        assert soft_nms([P(1, 2, 0.4)]) == [P(1, 2, 0.4)]

    def test_disjoint_unchanged(self):
        ps = [P(0, 1, 0.5), P(2, 3, 0.7), P(4, 5, 0.6)]
        assert sorted(soft_nms(ps), key=lambda p: p.start) == ps

    def test_classes_independent(self):
        out = soft_nms([P(0, 10, 0.9, cls=0), P(0, 10, 0.8, cls=1)])
        assert sorted(p.score for p in out) == [0.8, 0.9]

    def test_min_score_filter(self):
        out = soft_nms([P(0, 10, 0.9), P(0, 10, 1e-3)], 0.3)
        assert len(out) == 1

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            soft_nms([P(0, 1, 0.5)], 0.0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=50)
    def test_never_raises_scores_or_moves_boundaries(self, seed):
        rng = np.random.default_rng(seed)
        ps = []
        for _ in range(rng.integers(1, 12)):
            s = float(rng.uniform(0, 20))
            ps.append(P(s, s + float(rng.uniform(0.5, 8)), float(rng.uniform(0.01, 1)), cls=int(rng.integers(2))))
        before = {(p.class_id, p.start, p.end): p.score for p in ps}
        for p in soft_nms(ps, 0.3, min_score=0.0):
            assert p.score <= before[(p.class_id, p.start, p.end)]


class TestResultsFile:
    def test_empty(self, tmp_path):
        write_results([], tmp_path / "r.json", ["a"])
        assert json.loads((tmp_path / "r.json").read_text())["results"] == {}

    def test_round_trip(self, tmp_path):
        ps = [P(0.5, 3.25, 0.123456789, 1, "b"), P(1.0, 2.0, 0.9, 0, "a"), P(4.0, 9.5, 0.4, 0, "a")]
        write_results(ps, tmp_path / "r.json", ["x", "y"])
        back = read_results(tmp_path / "r.json", ["x", "y"])
        assert sorted(back, key=lambda p: p.start) == sorted(ps, key=lambda p: p.start)

    def test_stable_order_and_precision(self):
        ps = [P(0, 1, 0.2, vid="b"), P(0, 1, 0.3, vid="a"), P(2, 3, 0.7, vid="a")]
        doc = results_to_json(ps, ["x"])
        assert list(doc["results"]) == ["a", "b"]
        assert [r["score"] for r in doc["results"]["a"]] == [0.7, 0.3]
        text = json.dumps(results_to_json([P(0, 1, 1 / 3)], ["x"]))
        assert "0.333333" in text
