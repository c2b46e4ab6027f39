import numpy as np
import pytest

from abn.data import ActionInstance, VideoRecord
from abn.errors import DataError
from abn.evaluation import (EvalReport, ar_curve, auc_from_curve, auc_score,
                            average_recall, detection_thresholds,
                            evaluate_proposals, map_at_tiou,
                            proposal_thresholds, video_top1_label)

from oracles import auc_brute, average_recall_brute, map_brute

ANET = proposal_thresholds("anet")


class TestAverageRecall:
    def test_worked_two_action_example(self):
        gts = {"v": np.array([[0.0, 10.0], [20.0, 30.0]])}
        props = {"v": [(0.0, 9.0, 0.9), (19.0, 31.0, 0.8)]}
        # IoUs 0.9 and 10/12: matched at 9 and 7 of the 10 thresholds
        ar = average_recall(gts, props, 10, ANET)
        assert abs(ar - 0.80) < 1e-12

    def test_exact_proposals_reach_one(self):
        gts = {"a": np.array([[1.0, 4.0], [6.0, 9.0]])}
        props = {"a": [(1.0, 4.0, 0.9), (6.0, 9.0, 0.8)]}
        assert average_recall(gts, props, 5, ANET) == 1.0

    def test_no_proposals_zero(self):
        gts = {"a": np.array([[1.0, 4.0]])}
        assert average_recall(gts, {"a": []}, 10, ANET) == 0.0

    def test_budget_monotone(self):
        rng = np.random.default_rng(0)
        gts, props = random_instance(rng, 4)
        curve = ar_curve(gts, props, [1, 2, 5, 10, 50, 100], ANET)
        assert (np.diff(curve) >= -1e-15).all()

    def test_threshold_monotone(self):
        rng = np.random.default_rng(1)
        gts, props = random_instance(rng, 4)
        values = [average_recall(gts, props, 20, [th]) for th in ANET]
        assert (np.diff(values) <= 1e-15).all()

    def test_duplicates_never_increase_recall(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            gts, props = random_instance(rng, 3)
            doubled = {v: rows + rows for v, rows in props.items()}
            for th in (0.5, 0.75, 0.95):
                base = average_recall(gts, props, 100, [th])
                dup = average_recall(gts, doubled, 100, [th])
                assert dup <= base + 1e-12

    def test_empty_ground_truth_rejected(self):
        with pytest.raises(DataError):
            average_recall({"a": np.zeros((0, 2))}, {"a": []}, 10, ANET)

    def test_an_below_one_rejected(self):
        gts = {"a": np.array([[1.0, 4.0]])}
        with pytest.raises(DataError):
            average_recall(gts, {"a": []}, 0, ANET)


class TestAuc:
    def test_constant_full_recall_gives_99(self):
        ar = np.ones(100)
        assert auc_from_curve(ar, np.arange(1, 101)) == 99.0

    def test_linear_ramp_gives_triangle_area(self):
        an = np.arange(1, 101, dtype=np.float64)
        ar = (an - 1.0) / 99.0
        assert abs(auc_from_curve(ar, an) - 49.5) < 1e-12

    def test_no_proposals_zero(self):
        gts = {"a": np.array([[1.0, 4.0]])}
        assert auc_score(gts, {"a": []}) == 0.0

    def test_perfect_proposals_99(self):
        gts = {"a": np.array([[1.0, 4.0]]), "b": np.array([[0.0, 7.0]])}
        props = {"a": [(1.0, 4.0, 0.9)], "b": [(0.0, 7.0, 0.9)]}
        assert auc_score(gts, props) == 99.0


def random_instance(rng, n_videos, max_gt=3, max_props=12, with_labels=False):
    gts, props = {}, {}
    for i in range(n_videos):
        vid = f"v{i}"
        m = int(rng.integers(1, max_gt + 1))
        rows = []
        cursor = 0.0
        for _ in range(m):
            start = cursor + rng.uniform(0.5, 3.0)
            end = start + rng.uniform(1.0, 6.0)
            rows.append((start, end))
            cursor = end
        if with_labels:
            gts[vid] = [(s, e, int(rng.integers(0, 3))) for s, e in rows]
        else:
            gts[vid] = np.asarray(rows)
        k = int(rng.integers(0, max_props + 1))
        cands = []
        for _ in range(k):
            s = rng.uniform(0, cursor + 2.0)
            e = s + rng.uniform(0.5, 7.0)
            if with_labels:
                cands.append((s, e, float(rng.uniform(0.01, 1)), int(rng.integers(0, 3))))
            else:
                cands.append((s, e, float(rng.uniform(0.01, 1))))
        props[vid] = cands
    return gts, props


class TestOracleEquivalence:
    def test_recall_and_auc_match_bruteforce_exactly(self):
        rng = np.random.default_rng(42)
        for trial in range(25):
            gts, props = random_instance(rng, int(rng.integers(1, 5)))
            for an in (1, 3, 7, 50):
                for mode in ("per_video", "global"):
                    mine = average_recall(gts, props, an, ANET, mode)
                    brute = average_recall_brute(gts, props, an, ANET, mode)
                    assert mine == brute, (trial, an, mode)
            assert auc_score(gts, props) == auc_brute(gts, props, ANET)

    def test_map_matches_bruteforce_exactly(self):
        rng = np.random.default_rng(43)
        ths = detection_thresholds("anet")
        for trial in range(25):
            gts, dets = random_instance(rng, int(rng.integers(1, 4)), with_labels=True)
            mine = map_at_tiou(gts, dets, ths)
            brute = map_brute(gts, dets, ths)
            for th in ths:
                assert mine[th] == brute[th], trial


class TestMapAtTiou:
    def test_perfect_detections(self):
        gts = {"a": [(1.0, 4.0, 0), (6.0, 9.0, 1)]}
        dets = {"a": [(1.0, 4.0, 0.9, 0), (6.0, 9.0, 0.8, 1)]}
        out = map_at_tiou(gts, dets, [0.5, 0.75, 0.95])
        assert all(v == 1.0 for v in out.values())

    def test_hit_miss_hit_ranking(self):
        gts = {"a": [(0.0, 10.0, 0), (20.0, 30.0, 0)]}
        dets = {"a": [(0.0, 10.0, 0.9, 0), (50.0, 60.0, 0.8, 0), (20.0, 30.0, 0.7, 0)]}
        out = map_at_tiou(gts, dets, [0.5])
        assert abs(out[0.5] - (1.0 + 2.0 / 3.0) / 2.0) < 1e-12

    def test_all_below_threshold(self):
        gts = {"a": [(0.0, 10.0, 0)]}
        dets = {"a": [(9.0, 19.0, 0.9, 0)]}
        out = map_at_tiou(gts, dets, [0.5])
        assert out[0.5] == 0.0

    def test_unknown_class_detections_ignored(self):
        gts = {"a": [(0.0, 10.0, 0)]}
        dets = {"a": [(0.0, 10.0, 0.9, 5)]}
        out = map_at_tiou(gts, dets, [0.5])
        assert out[0.5] == 0.0

    def test_requires_labeled_ground_truth(self):
        with pytest.raises(DataError):
            map_at_tiou({"a": []}, {"a": []}, [0.5])


class TestEvaluateProposals:
    def make_records(self):
        return [
            VideoRecord("a", 20.0, 10.0, 200,
                        (ActionInstance(2.0, 6.0, label=1), ActionInstance(10.0, 15.0, label=1))),
            VideoRecord("b", 20.0, 10.0, 200, (ActionInstance(5.0, 9.0, label=0),)),
        ]

    def test_perfect_report(self):
        recs = self.make_records()
        props = {r.video_id: [(a.start, a.end, 0.9 - 0.1 * i) for i, a in enumerate(r.actions)]
                 for r in recs}
        rep = evaluate_proposals(recs, props)
        # AN=1 keeps one of video a's two actions; every budget >= 2 is perfect
        assert rep.ar_at_an[1] == pytest.approx(2.0 / 3.0)
        assert all(rep.ar_at_an[an] == 1.0 for an in (5, 10, 50, 100))
        assert rep.average_map == 1.0

    def test_single_action_videos_reach_one_everywhere(self):
        recs = [VideoRecord("a", 20.0, 10.0, 200, (ActionInstance(2.0, 6.0, label=0),)),
                VideoRecord("b", 20.0, 10.0, 200, (ActionInstance(5.0, 9.0, label=1),))]
        props = {r.video_id: [(r.actions[0].start, r.actions[0].end, 0.9)] for r in recs}
        rep = evaluate_proposals(recs, props)
        assert all(v == 1.0 for v in rep.ar_at_an.values())
        assert rep.auc == 99.0

    def test_report_serializes(self):
        recs = self.make_records()
        rep = evaluate_proposals(recs, {"a": [], "b": []})
        d = rep.to_dict()
        assert set(d) == {"ar_at_an", "auc", "map_at_tiou", "average_map"}
        assert d["auc"] == 0.0

    def test_top1_label_majority(self):
        rec = VideoRecord("a", 20.0, 10.0, 200,
                          (ActionInstance(1.0, 2.0, label=2),
                           ActionInstance(3.0, 4.0, label=2),
                           ActionInstance(5.0, 6.0, label=0)))
        assert video_top1_label(rec) == 2

    def test_top1_label_tie_smallest(self):
        rec = VideoRecord("a", 20.0, 10.0, 200,
                          (ActionInstance(1.0, 2.0, label=3),
                           ActionInstance(3.0, 4.0, label=1)))
        assert video_top1_label(rec) == 1
