import json

import numpy as np
import pytest

from atp.cli import main
from atp.linalg import Fixed, Fraction
from atp.matio import read_matx, write_matx
from atp.model import EncoderLayer, save_layer


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def rank_one_manifest(tmp_path, rng):
    entries = []
    for i, L in enumerate([4, 6, 6]):
        write_matx(tmp_path / f"s{i}.matx", np.outer(rng.standard_normal(L), rng.standard_normal(5)))
        entries.append({"path": f"s{i}.matx", "length": L})
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"entries": entries}))
    return path


# profile


def test_profile_rank_one(capsys, rank_one_manifest):
    code, out, _ = run(capsys, "profile", rank_one_manifest, "--bins", 4)
    assert code == 0
    rep = json.loads(out)
    for rec in rep["records"]:
        assert rec["ratio"] == pytest.approx(1 / rec["L"])


def test_profile_partial_failure(capsys, rank_one_manifest, tmp_path):
    data = json.loads(rank_one_manifest.read_text())
    (tmp_path / "junk.matx").write_bytes(b"MATXjunk")
    data["entries"].append({"path": "junk.matx", "length": 3})
    rank_one_manifest.write_text(json.dumps(data))
    code, out, err = run(capsys, "profile", rank_one_manifest)
    assert code == 2
    assert len(json.loads(out)["records"]) == 3
    assert "junk.matx" in err


def test_profile_all_failed(capsys, tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"entries": [{"path": "nope.matx", "length": 2}]}))
    assert run(capsys, "profile", tmp_path / "m.json")[0] == 1


def test_profile_csv_and_buckets(capsys, rank_one_manifest):
    code, out, _ = run(capsys, "profile", rank_one_manifest, "--format", "csv",
                       "--buckets", "1-4,5-10", "--bins", 2)
    lines = out.strip().splitlines()
    assert code == 0 and lines[0] == "bucket,bin,density"
    assert {line.split(",")[0] for line in lines[1:]} == {"1-4", "5-10"}


def test_profile_missing_manifest(capsys, tmp_path):
    code, _, err = run(capsys, "profile", tmp_path / "none.json")
    assert code == 1 and "not found" in err


# decompose


def test_decompose_rank_one(capsys, tmp_path, rng):
    write_matx(tmp_path / "x.matx", np.outer(rng.standard_normal(8), rng.standard_normal(6)))
    out = tmp_path / "out"
    code, _, _ = run(capsys, "decompose", tmp_path / "x.matx", "--rank", 1, "-o", out)
    assert code == 0
    summary = json.loads((out / "factors.json").read_text())
    assert summary["residual"] <= 1e-10
    assert summary["orthonormal"] and summary["orthonormality_defect"] <= 1e-12
    assert read_matx(out / "U.matx").shape == (8, 1)
    assert read_matx(out / "Xp.matx").shape == (1, 6)


def test_decompose_exact_beats_alternating(capsys, tmp_path, rng):
    A, _ = np.linalg.qr(rng.standard_normal((20, 12)))
    B, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    X = (A * 0.8 ** np.arange(12)) @ B.T
    write_matx(tmp_path / "x.matx", X)
    res = {}
    for method in ("exact", "alternating"):
        run(capsys, "decompose", tmp_path / "x.matx", "--rank", 4, "--method", method,
            "-o", tmp_path / method)
        res[method] = json.loads((tmp_path / method / "factors.json").read_text())
    assert res["exact"]["residual"] <= res["alternating"]["residual"]
    assert res["exact"]["method"] == "exact-truncated"


def test_decompose_entropy_and_no_reorth(capsys, tmp_path, rng):
    write_matx(tmp_path / "x.matx", rng.standard_normal((6, 6)))
    code, _, _ = run(capsys, "decompose", tmp_path / "x.matx", "--entropy", 1.0,
                     "--no-reorthogonalize", "-o", tmp_path / "o")
    summary = json.loads((tmp_path / "o" / "factors.json").read_text())
    assert code == 0 and not summary["orthonormal"]
    assert summary["policy"]["type"] == "entropy"


@pytest.mark.parametrize("flags", [["--rank", "2", "--fraction", "0.5"], ["--fraction", "2"],
                                   ["--rank", "0"]])
def test_decompose_invalid_policy(capsys, tmp_path, rng, flags):
    write_matx(tmp_path / "x.matx", rng.standard_normal((4, 4)))
    code, _, err = run(capsys, "decompose", tmp_path / "x.matx", *flags, "-o", tmp_path / "o")
    assert code == 1 and "usage:" in err


# attend


def layer_dir(tmp_path, d, policy, seed=0):
    path = tmp_path / f"layer{seed}"
    save_layer(path, EncoderLayer.random(d, 4, 8, heads=2, seed=seed, rank_policy=policy))
    return path


def test_attend_compare_exact_rank(capsys, tmp_path, rng):
    X = rng.standard_normal((12, 3)) @ rng.standard_normal((3, 8))
    write_matx(tmp_path / "x.matx", X)
    code, out, _ = run(capsys, "attend", tmp_path / "x.matx", layer_dir(tmp_path, 8, Fixed(3)),
                       "--compare")
    assert code == 0
    assert json.loads(out)["lowrank_vs_oracle"]["max_abs"] <= 1e-8


def test_attend_single_token(capsys, tmp_path, rng):
    write_matx(tmp_path / "x.matx", rng.standard_normal((1, 8)))
    code, out, _ = run(capsys, "attend", tmp_path / "x.matx", layer_dir(tmp_path, 8, Fraction(0.5)),
                       "--compare")
    rep = json.loads(out)
    assert code == 0 and all(v["max_abs"] <= 1e-8 for v in rep.values())


def test_attend_full_rank(capsys, tmp_path, rng):
    write_matx(tmp_path / "x.matx", rng.standard_normal((6, 8)))
    code, out, _ = run(capsys, "attend", tmp_path / "x.matx", layer_dir(tmp_path, 8, Fraction(1.0)),
                       "--compare")
    assert code == 0 and json.loads(out)["lowrank_vs_oracle"]["max_abs"] <= 1e-8


def test_attend_writes_output(capsys, tmp_path, rng):
    write_matx(tmp_path / "x.matx", rng.standard_normal((5, 8)))
    code, _, _ = run(capsys, "attend", tmp_path / "x.matx", layer_dir(tmp_path, 8, Fixed(2)),
                     "--mode", "standard", "-o", tmp_path / "y.csv")
    assert code == 0
    assert np.loadtxt(tmp_path / "y.csv", delimiter=",").shape == (5, 8)


def test_attend_shape_mismatch(capsys, tmp_path, rng):
    write_matx(tmp_path / "x.matx", rng.standard_normal((5, 7)))
    code, _, err = run(capsys, "attend", tmp_path / "x.matx", layer_dir(tmp_path, 8, Fixed(2)))
    assert code == 1 and "X" in err and "wq" in err


# bench


def test_bench_counts(capsys):
    code, out, _ = run(capsys, "bench", "--lengths", "32,64", "--rank", 4, "--dims", "16,8",
                       "--repeats", 1)
    rep = json.loads(out)
    assert code == 0
    for r in rep["runs"]:
        expected = 2 * r["L"] * (r["L"] if r["mode"] == "standard" else 4) * 8
        assert r["stages"]["attention"]["multiplies"] == expected
    assert all(t["wall_ns"] > 0 for t in rep["timing"]["runs"])


def test_bench_single_length(capsys):
    code, out, _ = run(capsys, "bench", "--lengths", "32", "--rank", 4, "--dims", "16,8",
                       "--repeats", 1)
    rep = json.loads(out)
    assert code == 0 and "count_slopes" not in rep and len(rep["runs"]) == 2


def test_bench_refusal(capsys, monkeypatch):
    monkeypatch.setenv("ATP_MEMORY_BUDGET_BYTES", "1024")
    code, _, err = run(capsys, "bench", "--lengths", "64", "--rank", 4, "--dims", "16,8",
                       "--repeats", 1)
    assert code == 3 and "predicted_bytes" in err


def test_bench_bad_dims(capsys):
    assert run(capsys, "bench", "--dims", "16")[0] == 1


# gradcheck


def test_gradcheck_default(capsys):
    code, out, err = run(capsys, "gradcheck")
    rep = json.loads(out)
    assert code == 0 and rep["worst_rel_error"] <= 1e-4
    assert "worst relative error" in err


def test_gradcheck_tiny_sizes_never_crash(capsys):
    # L = r = 1 makes the row normalizers affine in a single scalar, so
    # instances near the guard are common
    code, out, _ = run(capsys, "gradcheck", "--sizes", "1x1x1,2x1x2", "--trials", 20)
    rep = json.loads(out)
    assert code in (0, 4)
    assert rep["configurations"] + rep["guard_discontinuities"] == 2 * 20 * 6


def test_gradcheck_zero_trials(capsys):
    code, _, err = run(capsys, "gradcheck", "--trials", 0)
    assert code == 1 and "usage:" in err


def test_gradcheck_bad_sizes(capsys):
    assert run(capsys, "gradcheck", "--sizes", "4x2")[0] == 1


# synth and global flags


def test_synth_then_profile(capsys, tmp_path):
    code, out, _ = run(capsys, "--seed", 3, "synth", "--count", 4, "--lengths", "16,32",
                       "--d", 12, "--rank", 2, "-o", tmp_path / "c")
    assert code == 0
    manifest = out.strip()
    code, out, _ = run(capsys, "profile", manifest)
    for rec in json.loads(out)["records"]:
        assert abs(rec["ratio"] - 2 / rec["L"]) <= 1 / rec["L"]


def test_flags_after_subcommand(capsys, tmp_path, rng):
    write_matx(tmp_path / "x.matx", rng.standard_normal((6, 5)))
    code, _, _ = run(capsys, "decompose", tmp_path / "x.matx", "--precision", "f32",
                     "--seed", 4, "--rank", 2, "-o", tmp_path / "o")
    assert code == 0
    assert read_matx(tmp_path / "o" / "U.matx").dtype == np.float32


def test_usage_errors(capsys):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "--help")[0] == 0
