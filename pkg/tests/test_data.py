import numpy as np
import pytest
from hypothesis import given, strategies as st

from abn.data import (ActionInstance, FeatureBundle, ModelConfig, VideoRecord,
                      seconds_to_snippets, snippets_to_seconds, tiou, tiou_matrix)
from abn.errors import ConfigError, DataError


def rec(duration, fps, frames, actions=()):
    return VideoRecord("v", duration, fps, frames,
                       tuple(ActionInstance(s, e) for s, e in actions))


class TestSecondsToSnippets:
    def test_unit_scale_at_standard_geometry(self):
        # 1600 frames at 16 fps rescaled to 100 snippets: 1 snippet per second
        r = rec(100.0, 16.0, 1600, [(10.0, 20.0)])
        assert seconds_to_snippets(r.actions[0], r, 100) == (10.0, 20.0)

    def test_full_extent_maps_to_full_range(self):
        r = rec(80.0, 10.0, 800, [(0.0, 80.0)])
        assert seconds_to_snippets(r.actions[0], r, 50) == (0.0, 50.0)

    def test_hand_computed_rescale(self):
        r = rec(80.0, 10.0, 800, [(3.7, 9.1)])
        lo, hi = seconds_to_snippets(r.actions[0], r, 50)
        assert abs(lo - 2.3125) < 1e-12
        assert abs(hi - 5.6875) < 1e-12

    def test_rejects_action_outside_extent(self):
        r = rec(10.0, 10.0, 100)
        with pytest.raises(DataError):
            seconds_to_snippets(ActionInstance(5.0, 20.0), r, 10)

    def test_inverse_round_trip(self):
        r = rec(80.0, 10.0, 800)
        assert abs(snippets_to_seconds(2.3125, r, 50) - 3.7) < 1e-12

    @given(st.floats(0.01, 50.0), st.floats(0.01, 29.9))
    def test_order_preserving(self, start, gap):
        r = rec(80.0, 10.0, 800)
        a = ActionInstance(start, min(start + gap, 80.0))
        lo, hi = seconds_to_snippets(a, r, 64)
        assert 0.0 <= lo < hi <= 64.0


class TestTiou:
    def test_hand_case(self):
        assert abs(tiou((0.0, 9.0), (0.0, 10.0)) - 0.9) < 1e-12

    def test_identity(self):
        assert tiou((3.0, 7.0), (3.0, 7.0)) == 1.0

    def test_disjoint(self):
        assert tiou((0.0, 1.0), (2.0, 3.0)) == 0.0

    def test_degenerate_zero_length(self):
        assert tiou((2.0, 2.0), (1.0, 3.0)) == 0.0

    @given(st.tuples(st.floats(0, 50), st.floats(0.01, 30)),
           st.tuples(st.floats(0, 50), st.floats(0.01, 30)))
    def test_symmetric_and_bounded(self, a, b):
        ia = (a[0], a[0] + a[1])
        ib = (b[0], b[0] + b[1])
        v = tiou(ia, ib)
        assert v == tiou(ib, ia)
        assert 0.0 <= v <= 1.0
        if v == 1.0:
            assert ia == ib

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(0)
        a = np.sort(rng.uniform(0, 20, (7, 2)), axis=1)
        b = np.sort(rng.uniform(0, 20, (5, 2)), axis=1)
        m = tiou_matrix(a, b)
        for i in range(7):
            for j in range(5):
                assert m[i, j] == tiou(a[i], b[j])


class TestDomainTypes:
    def test_action_rejects_inverted_interval(self):
        with pytest.raises(DataError):
            ActionInstance(5.0, 3.0)

    def test_video_rejects_duration_frame_mismatch(self):
        with pytest.raises(DataError):
            VideoRecord("v", 100.0, 10.0, 500)

    def test_video_rejects_action_beyond_duration(self):
        with pytest.raises(DataError):
            rec(10.0, 10.0, 100, [(5.0, 12.0)])

    def test_bundle_rejects_nonfinite(self):
        g = np.zeros((4, 3), dtype=np.float32)
        g[1, 1] = np.nan
        with pytest.raises(DataError):
            FeatureBundle("v", g, tuple(np.zeros((0, 3)) for _ in range(4)))

    def test_bundle_rejects_count_mismatch(self):
        with pytest.raises(DataError):
            FeatureBundle("v", np.zeros((4, 3)), (np.zeros((0, 3)),))

    def test_bundle_rejects_empty(self):
        with pytest.raises(DataError):
            FeatureBundle("v", np.zeros((0, 3)), ())

    def test_bundle_is_read_only(self):
        b = FeatureBundle("v", np.zeros((2, 3)), (np.zeros((1, 3)), np.zeros((0, 3))))
        with pytest.raises(ValueError):
            b.global_feats[0, 0] = 1.0

    def test_config_defaults_and_validation(self):
        cfg = ModelConfig(C=32)
        assert cfg.T == 100 and cfg.D == 100 and cfg.n_samples == 32
        assert cfg.heads == 4 and cfg.layers == 1
        assert cfg.lambda_reg == 10.0 and cfg.lr == 1e-4 and cfg.epochs == 10
        assert cfg.tau_upper == 0.98 and cfg.tau_lower == 0.3
        with pytest.raises(ConfigError):
            ModelConfig(C=32, D=200)
        with pytest.raises(ConfigError):
            ModelConfig(C=32, n_samples=1)
        with pytest.raises(ConfigError):
            ModelConfig(C=30, heads=4)
        with pytest.raises(ConfigError):
            ModelConfig(C=32, lambda_reg=-1)
        with pytest.raises(ConfigError):
            ModelConfig(C=32, feature_mode="both")
