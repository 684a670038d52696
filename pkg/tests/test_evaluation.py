import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from co2net.autograd import ContractError
from co2net.evaluation import ReportError, average_precision, map_report, tiou
from oracles import ap_oracle, tiou_oracle


class TestTiou:
    def test_examples(self):
        assert tiou((0, 2), (0, 2)) == 1.0
        assert tiou((0, 1), (1, 2)) == 0.0
        assert tiou((0, 2), (1, 3)) == pytest.approx(1 / 3)

    def test_degenerate(self):
        with pytest.raises(ContractError):
            tiou((1, 1), (0, 2))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-50, 50), st.floats(0.01, 20), st.floats(-50, 50), st.floats(0.01, 20))
    def test_symmetric_and_bounded(self, s1, l1, s2, l2):
        a, b = (s1, s1 + l1), (s2, s2 + l2)
        v = tiou(a, b)
        assert 0.0 <= v <= 1.0 and v == tiou(b, a)
        assert v == pytest.approx(tiou_oracle(a, b), abs=1e-9)


def _random_case(rng, n_det=10, n_gt=4, videos=("a", "b")):
    gts = []
    for _ in range(int(rng.integers(0, n_gt + 1))):
        s = float(rng.integers(0, 10))
        gts.append((str(rng.choice(videos)), s, s + float(rng.integers(1, 5))))
    confs = rng.permutation(n_det)[: int(rng.integers(0, n_det + 1))] / n_det + 0.01
    dets = []
    for c in confs:
        s = float(rng.integers(0, 10))
        dets.append((str(rng.choice(videos)), s, s + float(rng.integers(1, 5)), float(c)))
    return dets, gts


class TestAveragePrecision:
    def test_perfect(self):
        gts = [("a", 0, 2), ("a", 5, 8), ("b", 1, 3)]
        dets = [(v, s, e, 1.0 - 0.1 * i) for i, (v, s, e) in enumerate(gts)]
        assert average_precision(dets, gts, 0.5) == 1.0

    def test_all_false(self):
        assert average_precision([("a", 10, 12, 0.9)], [("a", 0, 2)], 0.1) == 0.0
        assert average_precision([("b", 0, 2, 0.9)], [("a", 0, 2)], 0.1) == 0.0

    def test_hand_case(self):
        # ranks: TP, FP, TP over 2 gt -> envelope [1, 2/3, 2/3] -> 0.5*1 + 0.5*2/3
        gts = [("a", 0, 4), ("a", 10, 14)]
        dets = [("a", 0, 4, 0.9), ("a", 20, 24, 0.8), ("a", 10, 14, 0.7)]
        assert average_precision(dets, gts, 0.5) == pytest.approx(0.5 + 1 / 3)

    def test_duplicate_is_false_positive(self):
        gts = [("a", 0, 4)]
        dets = [("a", 0, 4, 0.9), ("a", 0, 4, 0.8)]
        assert average_precision(dets, gts, 0.5) == 1.0
        assert average_precision(list(reversed(dets)), gts, 0.5) == 1.0

    def test_none_when_empty(self):
        assert average_precision([], [], 0.5) is None
        assert average_precision([], [("a", 0, 1)], 0.5) == 0.0

    def test_random_vs_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            dets, gts = _random_case(rng)
            thr = float(rng.choice([0.1, 0.3, 0.5, 0.7]))
            got, want = average_precision(dets, gts, thr), ap_oracle(dets, gts, thr)
            assert (got is None) == (want is None)
            if got is not None:
                assert got == pytest.approx(want, abs=1e-9)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            dets, gts = _random_case(rng)
            if not gts:
                continue
            aps = [average_precision(dets, gts, t) for t in np.arange(0.1, 1.0, 0.1)]
            assert all(x >= y - 1e-12 for x, y in zip(aps, aps[1:]))

    def test_zero_confidence_fp_never_helps(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            dets, gts = _random_case(rng)
            if not gts:
                continue
            base = average_precision(dets, gts, 0.5)
            assert average_precision(dets + [("a", 30, 31, 0.0)], gts, 0.5) <= base + 1e-12

    def test_order_invariant(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            dets, gts = _random_case(rng)
            perm = rng.permutation(len(dets))
            shuffled = [dets[i] for i in perm]
            assert average_precision(dets, gts, 0.3) == average_precision(shuffled, gts, 0.3)


class TestMapReport:
    def test_single_class(self):
        gts = [("a", 0, 4, 0)]
        props = [("a", 0, 4, 0, 0.9), ("a", 6, 8, 0, 0.5)]
        rep = map_report(props, gts, ["x"], thresholds=(0.5,))
        assert rep.map_at == {"0.5": average_precision([p[:3] + p[4:] for p in props], [g[:3] for g in gts], 0.5)}

    def test_avg_ranges(self):
        rng = np.random.default_rng(4)
        gts = [("a", 0, 4, 0), ("b", 2, 9, 1), ("b", 12, 15, 0)]
        props = [("a", float(s), float(s) + 3, int(c), float(rng.random()))
                 for s, c in zip(rng.integers(0, 10, 12), rng.integers(0, 2, 12))]
        props += [("b", 2.5, 8.0, 1, 0.7), ("b", 11.0, 15.0, 0, 0.4)]
        rep = map_report(props, gts, ["x", "y", "z"])
        assert set(rep.per_class_ap) == {"x", "y"}
        vals = list(rep.map_at.values())
        assert rep.avg_map["0.1:0.5"] == pytest.approx(np.mean(vals[:5]))
        assert rep.avg_map["0.1:0.7"] == pytest.approx(np.mean(vals[:7]))
        assert rep.avg_map["0.1:0.9"] == pytest.approx(np.mean(vals))
        json.dumps(rep.to_json())
        lines = rep.to_csv().strip().split("\n")
        assert lines[0].startswith("class,mAP@0.1") and lines[-1].startswith("AVG 0.1:0.9")

    def test_order_invariant(self):
        gts = [("a", 0, 4, 0), ("b", 2, 9, 1)]
        props = [("a", 0, 3, 0, 0.5), ("b", 2, 8, 1, 0.6), ("a", 1, 4, 0, 0.5), ("b", 0, 9, 1, 0.2)]
        assert map_report(props, gts, ["x", "y"]).to_json() == map_report(props[::-1], gts, ["x", "y"]).to_json()

    def test_no_gt(self):
        with pytest.raises(ReportError):
            map_report([("a", 0, 1, 0, 0.5)], [], ["x"])
