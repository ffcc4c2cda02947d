import json
import math

import numpy as np
import pytest

from shifted_nls import SearchConfig, paired_search
from shifted_nls.errors import ConfigError, DomainError
from shifted_nls.harness import (BENCH_COLUMNS, align_frames, correction_stats, global_reads_model,
                                 n3net_memory_factor, parse_grid, rows_to_csv, run_benchmark,
                                 smooth_texture, translating_video)


class TestFixtures:
    def test_texture_range(self):
        a = smooth_texture(10, 12, 2, seed=4)
        assert a.shape == (10, 12, 2) and a.min() == 0.0 and a.max() == 255.0

    def test_translating_exact(self):
        v, fl = translating_video(3, 10, 12, velocity=(1, -2), seed=2)
        np.testing.assert_array_equal(v[1, 1:, :10], v[0, :9, 2:])
        assert np.all(fl == (1, -2))

    def test_circular(self):
        v, _ = translating_video(2, 8, 8, velocity=(3, 4), circular=True)
        np.testing.assert_array_equal(v[1], np.roll(v[0], (3, 4), (0, 1)))


class TestAlign:
    def test_static_is_inf(self):
        v, _ = translating_video(3, 12, 12, seed=1)
        aligned, rep = align_frames(v, SearchConfig(ws=3), "zero", noise_sigma=0.0)
        assert rep.mean_psnr == math.inf and all(p == math.inf for p in rep.psnr)
        np.testing.assert_array_equal(aligned, v[1:])
        lines = [json.loads(s) for s in rep.to_jsonl().splitlines()]
        assert lines[0] == {"record": "frame", "t": 0, "psnr": "inf"}
        assert lines[-1]["mean_psnr"] == "inf" and lines[-1]["flow_source"] == "zero"

    def test_exact_flow_recovers_interior(self):
        v, fl = translating_video(3, 16, 16, velocity=(3, 4), circular=True)
        aligned, rep = align_frames(v, SearchConfig(ws=1), fl, noise_sigma=0.0)
        np.testing.assert_array_equal(aligned[:, :13, :12], v[:-1, :13, :12])
        assert rep.flow_source == "file"

    def test_zero_flow_is_worse_on_motion(self):
        v, fl = translating_video(4, 32, 32, velocity=(0, 6), seed=5)
        cfg = SearchConfig(ws=3, ps=3)
        _, exact = align_frames(v, cfg, fl, noise_sigma=15.0, seed=1)
        _, zero = align_frames(v, cfg, "zero", noise_sigma=15.0, seed=1)
        assert exact.mean_psnr > zero.mean_psnr + 3.0

    def test_block_matching_source(self):
        v, _ = translating_video(3, 30, 30, velocity=(2, -3), seed=6)
        _, bm = align_frames(v, SearchConfig(ws=3, ps=3), "bm", noise_sigma=5.0, seed=2)
        _, zero = align_frames(v, SearchConfig(ws=3, ps=3), "zero", noise_sigma=5.0, seed=2)
        assert bm.flow_source == "block-matching" and bm.mean_psnr > zero.mean_psnr

    def test_report_fields(self):
        v, _ = translating_video(3, 10, 10, seed=1)
        _, rep = align_frames(v, SearchConfig(ws=3), "zero", noise_sigma=10.0, seed=3)
        assert set(rep.stage_ms) == {"noise", "flow", "search", "aggregate", "metric"}
        assert sum(rep.stage_ms.values()) == pytest.approx(rep.total_ms, rel=1e-9)
        assert rep.config["seed"] == 3 and rep.config["noise_sigma"] == 10.0
        assert rep.peak_aux_bytes > 0

    def test_deterministic(self):
        v, fl = translating_video(3, 12, 12, velocity=(0, 2), seed=1)
        a1, r1 = align_frames(v, SearchConfig(ws=3), fl, seed=9)
        a2, r2 = align_frames(v, SearchConfig(ws=3), fl, seed=9, threads=4, fused=True)
        np.testing.assert_array_equal(a1, a2)
        assert r1.psnr == r2.psnr

    def test_errors(self):
        v, _ = translating_video(2, 6, 6)
        with pytest.raises(DomainError):
            align_frames(v[:1], SearchConfig(ws=1))
        with pytest.raises(DomainError):
            align_frames(v, SearchConfig(ws=1), np.zeros((1, 5, 6, 2)))
        with pytest.raises(ConfigError):
            align_frames(v, SearchConfig(ws=1), "farneback")


class TestCorrectionStats:
    def test_two_point(self):
        offs = np.zeros((4, 1, 3))
        offs[:2, 0, 1] = 1.0
        offs[2:, 0, 1] = -1.0
        st = correction_stats(np.zeros((4, 2)), offs)
        np.testing.assert_array_equal(st.covariance, [[1.0, 0.0], [0.0, 0.0]])
        assert st.fraction_at_zero == 0.0 and st.count == 4
        np.testing.assert_array_equal(st.support, [[-1.0, 0.0], [1.0, 0.0]])
        np.testing.assert_array_equal(st.mass, [0.5, 0.5])

    def test_exact_flow_is_all_zero(self, rng):
        X = rng.random((1, 12, 20, 1))
        K = np.roll(X, 5, axis=2)
        fl = np.broadcast_to((0.0, 5.0), (1, 12, 20, 2))
        _, offs, _ = paired_search(X, K, fl, SearchConfig(ws=3))
        st = correction_stats(fl, offs)
        mask = np.zeros((12, 20), bool)
        mask[:, 5:18] = True
        assert st.fraction_at_zero >= mask.mean()

    def test_dts_filter_and_errors(self):
        offs = np.array([[[0, 1.0, 0]], [[1, 2.0, 0]]])
        st = correction_stats(np.zeros((2, 2)), offs, dts=[1])
        assert st.count == 1 and st.mean.tolist() == [2.0, 0.0]
        with pytest.raises(DomainError):
            correction_stats(np.zeros((3, 2)), offs)
        with pytest.raises(DomainError):
            correction_stats(np.zeros((2, 2)), offs, dts=[5])


class TestCostModels:
    @pytest.mark.parametrize("args,out", [((3, 13), (15, 507)), ((1, 1), (1, 1)), ((3, 3), (5, 27))])
    def test_reads(self, args, out):
        assert global_reads_model(*args) == out

    @pytest.mark.parametrize("args,out", [((3, 1, 1), 18.0), ((1, 1, 1), 2.0), ((7, 1, 2), 61.25)])
    def test_memory_factor(self, args, out):
        assert n3net_memory_factor(*args) == out


class TestBenchmark:
    def test_rows_and_ordering(self):
        cfgs = [SearchConfig(ws=5, ps=3), SearchConfig(ws=5, ps=3, stride0=2),
                (SearchConfig(ws=5, ps=3), True)]
        rows = run_benchmark(cfgs, (3, 32, 32, 4), repeats=3)
        assert len(rows) == 3 and all(r["error"] == "" for r in rows)
        assert rows[1]["nq"] * 4 <= rows[0]["nq"] + 40
        assert rows[1]["median_ms"] < rows[0]["median_ms"]
        assert rows[2]["peak_aux_bytes"] < rows[0]["peak_aux_bytes"]

    def test_peak_repeatable(self):
        cfg = [SearchConfig(ws=3, wt=1)]
        a = run_benchmark(cfg, (3, 10, 10, 2), repeats=3)
        b = run_benchmark(cfg, (3, 10, 10, 2), repeats=4)
        assert a[0]["peak_aux_bytes"] == b[0]["peak_aux_bytes"]

    def test_error_cell(self):
        rows = run_benchmark([SearchConfig(ws=1, wt=1, topl=3)], (2, 4, 4, 1))
        assert rows[0]["error"].startswith("ConfigError") and rows[0]["median_ms"] is None

    def test_min_repeats(self):
        with pytest.raises(ConfigError):
            run_benchmark([SearchConfig(ws=1)], (1, 4, 4, 1), repeats=2)

    def test_csv(self):
        rows = run_benchmark([SearchConfig(ws=1)], (1, 4, 4, 1))
        lines = rows_to_csv(rows).splitlines()
        assert lines[0] == ",".join(BENCH_COLUMNS) and len(lines) == 2


class TestGrid:
    def test_parse(self):
        g = parse_grid("# grid\nws=9 ps=3 fused=1\n\nws=5 stride1=0.5 metric=ip  # half-pel\n")
        assert g == [(SearchConfig(ws=9, ps=3), True),
                     (SearchConfig(ws=5, stride1=0.5, metric="ip"), False)]

    @pytest.mark.parametrize("text", ["ps=3", "ws=3 foo=1", "ws=x", "ws=3 ps"])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            parse_grid(text)
