import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from co2net.autograd import ContractError
from co2net.localization import (
    LocalizeConfig, Proposal, default_thresholds, generate_proposals, localize_video, oic_score,
    soft_nms, video_class_scores,
)
from oracles import oic_oracle, soft_nms_oracle


class TestClassScores:
    def test_uniform(self):
        np.testing.assert_allclose(video_class_scores(np.zeros((6, 4))), [0.25] * 3)

    def test_dominant(self):
        s = np.zeros((8, 3))
        s[:, 1] = 50.0
        assert video_class_scores(s)[1] == pytest.approx(1.0)

    def test_small_case(self):
        s = np.array([[1.0, 0.0, 0.5], [3.0, 1.0, 0.0], [2.0, 2.0, 1.0], [0.0, 4.0, 0.0]])
        # k = max(1, 4 // 2) = 2 -> top-2 means 2.5, 3.0, 0.75
        v = np.array([2.5, 3.0, 0.75])
        want = np.exp(v) / np.exp(v).sum()
        np.testing.assert_allclose(video_class_scores(s, k_divisor=2), want[:2], atol=1e-15)


class TestProposals:
    def test_run_extraction(self):
        cfg = LocalizeConfig(attn_thresholds=[0.5])
        props = generate_proposals([0.9, 0.9, 0.1, 0.8, 0.8], [0], cfg)
        assert [(p.t_start, p.t_end) for p in props] == [(0.0, 2.0), (3.0, 5.0)]

    def test_zero_track(self):
        assert generate_proposals(np.zeros(10), [0, 1], LocalizeConfig()) == []

    def test_min_length(self):
        cfg = LocalizeConfig(attn_thresholds=[0.5])
        assert generate_proposals([0.9, 0.1, 0.9, 0.9], [0], cfg)[0].t_start == 2.0
        assert len(generate_proposals([0.9, 0.1, 0.9, 0.9], [0], cfg)) == 1

    def test_per_class_copies(self):
        cfg = LocalizeConfig(attn_thresholds=[0.5])
        props = generate_proposals([0.9, 0.9, 0.1], [2, 0], cfg)
        assert [p.cls for p in props] == [0, 2]

    def test_bad_proposal(self):
        with pytest.raises(ContractError):
            Proposal(3.0, 3.0, 0)

    def test_default_thresholds(self):
        th = default_thresholds()
        assert th[0] == 0.1 and th[-1] == 0.9 and len(th) == 17

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=12),
           st.lists(st.sampled_from(default_thresholds()), min_size=1, max_size=5),
           st.sampled_from(default_thresholds()))
    def test_adding_thresholds_keeps_segments(self, a, th, extra):
        seg = lambda ths: {(p.t_start, p.t_end) for p in  # noqa: E731
                           generate_proposals(a, [0], LocalizeConfig(attn_thresholds=ths))}
        base = seg(th)
        assert base <= seg(th + [extra])
        assert seg(list(reversed(th)) + th) == base
        for s, e in base:
            assert 0 <= s < e <= len(a)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.floats(0.1, 0.9), st.floats(0.1, 0.9))
    def test_lower_threshold_covers_more(self, a, t1, t2):
        lo, hi = min(t1, t2), max(t1, t2)
        cover = lambda t: {i for p in generate_proposals(  # noqa: E731
            a, [0], LocalizeConfig(attn_thresholds=[t], min_proposal_len=1))
            for i in range(int(p.t_start), int(p.t_end))}
        assert cover(hi) <= cover(lo)


class TestOic:
    def test_worked_example(self):
        assert oic_score([0.0, 1, 1, 0], Proposal(1, 3, 0), inflation=0.5) == 1.0

    def test_constant(self):
        assert oic_score([0.7] * 10, Proposal(3, 6, 0)) == pytest.approx(0.0, abs=1e-15)

    def test_full_span(self):
        assert oic_score([1.0, 2.0, 3.0], Proposal(0, 3, 0)) == pytest.approx(2.0)

    def test_empty_inner(self):
        with pytest.raises(ContractError):
            oic_score([1.0, 2.0, 3.0], Proposal(1.2, 1.8, 0))

    def test_random_vs_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            T = int(rng.integers(1, 9))
            col = rng.normal(size=T)
            s = float(rng.integers(0, T))
            e = float(rng.integers(int(s) + 1, T + 1))
            if e - s >= 2 and rng.random() < 0.3:
                s += 0.5
            infl = float(rng.choice([0.25, 0.5, 1.0]))
            assert oic_score(col, Proposal(s, e, 0), infl) == pytest.approx(oic_oracle(col, s, e, infl), abs=1e-12)


class TestSoftNms:
    def test_identical_pair(self):
        out = soft_nms([Proposal(0, 4, 0, 1.0), Proposal(0, 4, 0, 0.9)], sigma=0.3)
        assert out[0].confidence == 1.0
        assert out[1].confidence == pytest.approx(0.9 * math.exp(-1 / 0.3))
        assert out[1].confidence == pytest.approx(0.0321, abs=1e-4)

    def test_disjoint_unchanged(self):
        props = [Proposal(0, 2, 0, 0.3), Proposal(2, 4, 0, 0.8), Proposal(5, 9, 0, 0.5)]
        assert [p.confidence for p in soft_nms(props)] == [0.8, 0.5, 0.3]

    def test_classes_independent(self):
        out = soft_nms([Proposal(0, 4, 0, 1.0), Proposal(0, 4, 1, 0.9)])
        assert [p.confidence for p in out] == [1.0, 0.9]

    def test_input_untouched(self):
        props = [Proposal(0, 4, 0, 1.0), Proposal(1, 4, 0, 0.9)]
        soft_nms(props)
        assert props[1].confidence == 0.9

    def test_random_vs_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            items = []
            for _ in range(int(rng.integers(0, 11))):
                s = float(rng.integers(0, 8))
                items.append((s, s + float(rng.integers(1, 5)), int(rng.integers(0, 2)), float(rng.random())))
            got = soft_nms([Proposal(*it) for it in items], 0.3)
            want = soft_nms_oracle(items, 0.3)
            assert len(got) == len(want)
            for p, w in zip(got, want):
                assert (p.t_start, p.t_end, p.cls) == w[:3]
                assert p.confidence == pytest.approx(w[3], abs=1e-12)


def _fake_output(a, tcam):
    return SimpleNamespace(a_fused=np.asarray(a, dtype=float), tcam_supp=np.asarray(tcam, dtype=float))


class TestLocalizeVideo:
    def test_fallback_to_argmax(self):
        tcam = np.zeros((10, 6))
        tcam[:, 2] = 0.3
        a = np.zeros(10)
        a[3:7] = 0.8
        props = localize_video(_fake_output(a, tcam), LocalizeConfig(class_threshold=0.9))
        assert props and {p.cls for p in props} == {2}

    def test_planted_segment(self):
        T = 40
        a = np.full(T, 0.05)
        a[10:20] = 0.95
        tcam = np.zeros((T, 3))
        tcam[10:20, 1] = 5.0
        props = localize_video(_fake_output(a, tcam), LocalizeConfig())
        top = props[0]
        assert (top.t_start, top.t_end, top.cls) == (10.0, 20.0, 1)
        for p in props:
            assert 0 <= p.t_start < p.t_end <= T

    def test_empty_track(self):
        assert localize_video(_fake_output(np.zeros(8), np.zeros((8, 3))), LocalizeConfig()) == []
