import json
import subprocess
import sys

import numpy as np
import pytest

from shifted_nls.cli import main
from shifted_nls.flow import read_flo
from shifted_nls.harness import translating_video
from shifted_nls.tensor_core import load_raw, save_raw, save_video


@pytest.fixture
def frames(tmp_path):
    v, _ = translating_video(8, 24, 24, velocity=(2, -3), seed=7)
    save_video(v, tmp_path / "frames")
    return tmp_path / "frames"


@pytest.mark.parametrize("cmd", [[], ["align"], ["search"], ["flow"], ["flow", "estimate"],
                                 ["flow", "convert"], ["flow", "stats"], ["bench"], ["model"],
                                 ["model", "reads"], ["model", "n3mem"]])
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        main(cmd + ["--help"])
    assert e.value.code == 0
    assert "usage" in capsys.readouterr().out


@pytest.mark.parametrize("argv,out", [
    (["model", "reads", "--q", "3", "--ws", "13"], "15 507\n"),
    (["model", "n3mem", "--ps", "3", "--sq", "1", "--sk", "1"], "18\n"),
    (["model", "n3mem", "--ps", "7", "--sk", "2"], "61.25\n"),
    (["model", "reads", "--ws", "1", "3"], "q=3 ws=1: 3 3\nq=3 ws=3: 5 27\n"),
])
def test_model(argv, out, capsys):
    assert main(argv) == 0
    assert capsys.readouterr().out == out


def test_align_smoke(frames, tmp_path, capsys):
    assert main(["align", "--frames", str(frames), "--ws", "3", "--ps", "3",
                 "--out", str(tmp_path / "al.stnt"), "--report", str(tmp_path / "r.jsonl")]) == 0
    recs = [json.loads(s) for s in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert [r["record"] for r in recs] == ["frame"] * 7 + ["summary"]
    assert recs[-1]["flow_source"] == "block-matching"
    assert load_raw(tmp_path / "al.stnt").shape == (7, 24, 24, 1)


def test_align_inf_printed(tmp_path, capsys):
    v = np.repeat(translating_video(1, 8, 8, seed=3)[0], 3, axis=0)
    save_video(v, tmp_path / "static")
    assert main(["align", "--frames", str(tmp_path / "static"), "--flow", "zero",
                 "--sigma", "0", "--ws", "3"]) == 0
    out = capsys.readouterr().out
    assert '"psnr": "inf"' in out and '"mean_psnr": "inf"' in out


def test_align_missing_frames_flag(capsys):
    with pytest.raises(SystemExit) as e:
        main(["align"])
    assert e.value.code == 2
    assert "--frames" in capsys.readouterr().err


def test_align_missing_path(tmp_path, capsys):
    assert main(["align", "--frames", str(tmp_path / "nope")]) == 2


def test_bad_threads(frames):
    with pytest.raises(SystemExit) as e:
        main(["align", "--frames", str(frames), "--threads", "0"])
    assert e.value.code == 2


def test_corrupt_input_exits_1(tmp_path, capsys):
    (tmp_path / "bad.stnt").write_bytes(b"JUNK" + bytes(17))
    assert main(["search", "--q", str(tmp_path / "bad.stnt"), "--k", str(tmp_path / "bad.stnt")]) == 1
    assert "magic" in capsys.readouterr().err


def test_search_shapes(tmp_path, capsys):
    r = np.random.default_rng(0)
    save_raw(r.standard_normal((2, 6, 7, 3)), tmp_path / "q.stnt")
    save_raw(r.standard_normal((2, 6, 7, 3)), tmp_path / "k.stnt")
    assert main(["search", "--q", str(tmp_path / "q.stnt"), "--k", str(tmp_path / "k.stnt"),
                 "--ws", "3", "--topl", "9", "--out-inds", str(tmp_path / "i.stnt"),
                 "--out-dists", str(tmp_path / "d.stnt")]) == 0
    assert load_raw(tmp_path / "i.stnt").shape == (1, 84, 9, 3)
    assert load_raw(tmp_path / "d.stnt").shape == (1, 84, 9, 1)
    assert "nq=84 topl=9" in capsys.readouterr().out


def test_search_paired_flow(tmp_path, capsys):
    r = np.random.default_rng(1)
    Q = r.random((1, 10, 16, 1))
    save_raw(Q, tmp_path / "q.stnt")
    save_raw(np.roll(Q, 5, axis=2), tmp_path / "k.stnt")
    save_raw(np.broadcast_to((0.0, 4.0), (1, 10, 16, 2)).copy(), tmp_path / "f.stnt")
    assert main(["search", "--q", str(tmp_path / "q.stnt"), "--k", str(tmp_path / "k.stnt"),
                 "--flow", str(tmp_path / "f.stnt"), "--ws", "3",
                 "--out-inds", str(tmp_path / "i.stnt"), "--out-dists", str(tmp_path / "d.stnt")]) == 0
    inds = load_raw(tmp_path / "i.stnt").reshape(10, 16, 3)
    assert np.all(inds[:, 5:11] == (0, 0, 5))


def test_search_flag_conflict(tmp_path):
    save_raw(np.zeros((1, 3, 3, 1)), tmp_path / "q.stnt")
    save_raw(np.zeros((1, 3, 3, 2)), tmp_path / "f.stnt")
    q = str(tmp_path / "q.stnt")
    f = str(tmp_path / "f.stnt")
    assert main(["search", "--q", q, "--k", q, "--flow", f, "--fflow", f]) == 2


def test_flow_estimate_and_stats(frames, tmp_path, capsys):
    out = tmp_path / "f.flo"
    assert main(["flow", "estimate", "--a", str(frames / "00000.png"),
                 "--b", str(frames / "00001.png"), "--out", str(out)]) == 0
    fl = read_flo(out)
    assert tuple(fl[12, 12]) == (2.0, -3.0)
    capsys.readouterr()
    assert main(["flow", "stats", "--in", str(out)]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(np.abs(fl).mean(), rel=1e-5)
    assert main(["flow", "convert", "--in", str(out), "--out", str(tmp_path / "f.stnt")]) == 0
    np.testing.assert_array_equal(load_raw(tmp_path / "f.stnt")[0], fl)


def test_bench_csv(tmp_path, capsys):
    (tmp_path / "g.txt").write_text("ws=3\nws=3 fused=1\nws=1 stride0=2\n")
    assert main(["bench", "--grid", str(tmp_path / "g.txt"), "--shape", "2,8,8,2",
                 "--out", str(tmp_path / "b.csv")]) == 0
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[0].startswith("ws,wt,ps")


def test_bench_bad_grid(tmp_path):
    (tmp_path / "g.txt").write_text("ws=4\n")
    assert main(["bench", "--grid", str(tmp_path / "g.txt")]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "shifted_nls", "model", "reads", "--ws", "13"],
                         capture_output=True, text=True, check=True)
    assert res.stdout == "15 507\n"
