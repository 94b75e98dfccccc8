import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carkit.image import load_png
from carkit.metrics import MetricReport, aggregate, evaluate_bicubic_baseline, evaluate_pair, psnr, ssim
from carkit.models import Topology
from carkit.pipeline import CARModel
from carkit.resampler import ResampleGeometry
from carkit.trainer import build_model, identity_checkpoint

DATA = Path(__file__).parent / "data"

# frozen output of tests/oracles/baseline_psnr.py (scalar loop implementation)
BASELINE_PSNR_Y = 33.1066082820
BASELINE_PSNR_RGB = 30.3350066078


class TestPSNR:
    def test_identical_is_infinite(self):
        a = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(a, a) == math.inf

    def test_sixteen_levels(self):
        a = np.full((6, 6, 1), 100 / 255)
        b = np.full((6, 6, 1), 116 / 255)
        assert psnr(a, b) == pytest.approx(20 * math.log10(255 / 16))
        assert psnr(a, b) == pytest.approx(24.05, abs=0.01)

    def test_maximal_error(self):
        assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 0.0

    def test_border_zero_is_full_frame(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        assert psnr(a, b, border=0) == psnr(a, b)

    def test_border_crops(self):
        a = np.zeros((6, 6, 1))
        b = a.copy()
        b[0, :] = 1.0  # only the cropped frame differs
        assert psnr(a, b, border=1) == math.inf

    @settings(max_examples=25)
    @given(st.integers(0, 2 ** 31))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((5, 7, 3)), rng.random((5, 7, 3))
        assert psnr(a, b) == psnr(b, a)

    def test_errors(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), border=2)


class TestSSIM:
    def test_identical(self):
        a = np.random.default_rng(0).random((16, 16))
        assert ssim(a, a) == 1.0

    def test_anticorrelated(self):
        rng = np.random.default_rng(1)
        a = rng.choice([0.1, 0.9], size=(16, 16))
        assert ssim(a, 1.0 - a) < 0

    def test_swap_invariant(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((20, 20)), rng.random((20, 20))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)

    def test_against_second_implementation(self):
        structural_similarity = pytest.importorskip("skimage.metrics").structural_similarity
        rng = np.random.default_rng(3)
        a = rng.integers(0, 256, (32, 32)).astype(np.float64)
        b = np.clip(a + rng.normal(0, 20, a.shape), 0, 255).round()
        ref = structural_similarity(a, b, data_range=255, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, win_size=11)
        assert ssim(a / 255, b / 255) == pytest.approx(ref, abs=1e-6)

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 12)), np.zeros((10, 12)))


class TestEvaluate:
    def test_identity_pipeline_infinite(self):
        model = build_model(identity_checkpoint())
        hr = np.random.default_rng(0).integers(0, 256, (16, 16, 3)) / 255
        rep = evaluate_pair(hr, model)
        assert rep.psnr_y == math.inf and rep.psnr_rgb == math.inf and rep.ssim_y == 1.0
        assert json.loads(rep.to_json())["psnr_y"] == "inf"

    def test_fields_populated(self):
        model = CARModel(ResampleGeometry(2), Topology(base=4, cap=8, n_res=1, head_ch=4))
        rep = evaluate_pair(np.random.default_rng(1).random((64, 64, 3)), model, name="x")
        assert rep.border == 2 and rep.name == "x"
        assert all(np.isfinite([rep.psnr_y, rep.ssim_y, rep.psnr_rgb]))

    def test_indivisible(self):
        model = CARModel(ResampleGeometry(2), Topology(base=4, cap=8, n_res=1, head_ch=4))
        with pytest.raises(ValueError):
            evaluate_pair(np.zeros((15, 16, 3)), model)

    def test_baseline_matches_oracle(self):
        rep = evaluate_bicubic_baseline(load_png(DATA / "astronaut_64.png"), 2)
        assert rep.psnr_y == pytest.approx(BASELINE_PSNR_Y, abs=1e-8)
        assert rep.psnr_rgb == pytest.approx(BASELINE_PSNR_RGB, abs=1e-8)

    def test_aggregate(self):
        reps = [MetricReport("a", 30.0, 0.9, 28.0, 2), MetricReport("b", 32.0, 0.8, 30.0, 2)]
        agg = aggregate(reps)
        assert agg["psnr_y"] == 31.0 and agg["ssim_y"] == pytest.approx(0.85) and agg["count"] == 2
