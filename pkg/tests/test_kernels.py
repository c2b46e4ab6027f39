import os
import subprocess
import sys

import numpy as np
import pytest

from abn.backend import HAS_NUMBA
from abn.boundary import build_sample_table
from abn.kernels import ProposalSampler, soft_nms_core

needs_numba = pytest.mark.skipif(not HAS_NUMBA, reason="numba unavailable")


def make_samplers(T=14, D=7, N=4, rho=0.25):
    i0, i1, w0, w1, _ = build_sample_table(T, D, N, rho)
    np_s = ProposalSampler(i0, i1, w0, w1, T, D * T, N, backend="numpy")
    nb_s = ProposalSampler(i0, i1, w0, w1, T, D * T, N, backend="numba") if HAS_NUMBA else None
    return np_s, nb_s


class TestSamplerBackends:
    @needs_numba
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_forward_parity(self, dtype):
        np_s, nb_s = make_samplers()
        rng = np.random.default_rng(0)
        x = np.ascontiguousarray(rng.normal(0, 1, (3, 14, 16)).astype(dtype))
        a = np_s.forward(x)
        b = nb_s.forward(x)
        assert a.dtype == b.dtype == dtype
        tol = 1e-6 if dtype == np.float32 else 1e-12
        assert np.abs(a - b).max() < tol

    @needs_numba
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_backward_parity(self, dtype):
        np_s, nb_s = make_samplers()
        rng = np.random.default_rng(1)
        g = np.ascontiguousarray(rng.normal(0, 1, (3, 7 * 14, 4 * 16)).astype(dtype))
        a = np_s.backward(g, 16)
        b = nb_s.backward(g, 16)
        tol = 1e-4 if dtype == np.float32 else 1e-10
        assert np.abs(a - b).max() < tol

    def test_numpy_backward_is_adjoint(self):
        np_s, _ = make_samplers()
        rng = np.random.default_rng(2)
        x = rng.normal(0, 1, (2, 14, 16))
        y = rng.normal(0, 1, (2, 7 * 14, 4 * 16))
        assert abs(float((np_s.forward(x) * y).sum())
                   - float((x * np_s.backward(y, 16)).sum())) < 1e-9

    def test_deterministic_across_calls(self):
        np_s, _ = make_samplers()
        x = np.random.default_rng(3).normal(0, 1, (2, 14, 16))
        assert np.array_equal(np_s.forward(x), np_s.forward(x))

    def test_rejects_wrong_length(self):
        np_s, _ = make_samplers()
        with pytest.raises(ValueError):
            np_s.forward(np.zeros((1, 9, 16)))


class TestSoftNmsBackends:
    def case(self):
        rng = np.random.default_rng(4)
        starts = rng.uniform(0, 40, 60)
        ends = starts + rng.uniform(1, 10, 60)
        scores = rng.uniform(0.01, 1.0, 60)
        return starts, ends, scores

    @needs_numba
    def test_backend_parity(self):
        starts, ends, scores = self.case()
        o1, s1 = soft_nms_core(starts, ends, scores, 0.4, 1e-3, 60, backend="numpy")
        o2, s2 = soft_nms_core(starts, ends, scores, 0.4, 1e-3, 60, backend="numba")
        assert np.array_equal(o1, o2)
        assert np.abs(s1 - s2).max() < 1e-12

    def test_scores_non_increasing(self):
        starts, ends, scores = self.case()
        _, kept = soft_nms_core(starts, ends, scores, 0.4, 1e-3, 60, backend="numpy")
        assert (np.diff(kept) <= 1e-15).all()

    def test_cap_respected(self):
        starts, ends, scores = self.case()
        order, kept = soft_nms_core(starts, ends, scores, 0.4, 1e-3, 5, backend="numpy")
        assert len(order) == 5 and len(kept) == 5


class TestEnvFlag:
    def test_env_var_disables_numba(self):
        code = ("import abn.backend as b; "
                "print(b.USE_NUMBA, b.HAS_NUMBA)")
        env = dict(os.environ, ABN_NO_NUMBA="1")
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True, check=True)
        assert out.stdout.split()[0] == "False"

    def test_zero_means_enabled(self):
        code = "import abn.backend as b; print(b.USE_NUMBA == b.HAS_NUMBA)"
        env = dict(os.environ, ABN_NO_NUMBA="0")
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "True"

    def test_fallback_pipeline_smoke(self):
        # whole forward pass under the numpy backend via the env flag
        code = (
            "import numpy as np\n"
            "from abn.data import ModelConfig\n"
            "from abn.model import init_params, forward_video\n"
            "from abn.io_synth import SynthSpec, generate\n"
            "import abn.backend\n"
            "assert not abn.backend.USE_NUMBA\n"
            "bundles, recs = generate(SynthSpec(n_videos=1, T=12, C=8, n_classes=2, "
            "actions_min=1, actions_max=1, seed=1))\n"
            "cfg = ModelConfig(C=8, T=12, D=6, n_samples=4, heads=4)\n"
            "out = forward_video(init_params(cfg), bundles[0], cfg)\n"
            "assert out.p_cc.shape == (6, 12)\n"
            "print('ok')\n"
        )
        env = dict(os.environ, ABN_NO_NUMBA="1")
        out = subprocess.run([sys.executable, "-c", code], env=env,
                             capture_output=True, text=True)
        assert out.returncode == 0, out.stderr
        assert out.stdout.strip() == "ok"
