"""Command-line interface: argument handling, exit codes, fault injection
through the verification harness, and the artifacts each subcommand writes."""

import numpy as np
import pytest

from qna.cli import build_parser, main, run_train_toy
from qna.tensor import make_rng, save_qnat

PERTURB = "QNA_CHECK_PERTURB"


@pytest.fixture(autouse=True)
def _no_leftover_perturbation(monkeypatch):
    monkeypatch.delenv(PERTURB, raising=False)


# ---------------------------------------------------------------------------
# Parser and usage errors
# ---------------------------------------------------------------------------


def test_usage_errors_exit_two(capsys):
    for argv in ([], ["frobnicate"], ["check", "--grid", "huge"],
                 ["bench", "--input", "abc"], ["bench", "--k", "3,x"],
                 ["bench", "--impls", "nope"], ["model"],
                 ["model", "--variant", "giga"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2, argv
        capsys.readouterr()


def test_parser_defaults():
    args = build_parser().parse_args(["check"])
    assert args.grid == "small" and args.dtype == "f64" and args.seed == 42
    args = build_parser().parse_args(["bench"])
    assert args.input == (256, 256, 64)
    assert args.k == (3, 5, 7, 9, 11, 13, 15)
    assert len(args.impls) == 4
    assert args.out == "qna_bench.csv"
    args = build_parser().parse_args(["train-toy"])
    assert args.steps == 200 and args.seed == 42


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


def test_check_small_grid_passes(capsys):
    assert main(["check", "--grid", "small"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
    assert "gradcheck" in out  # f64 default includes the gradient check


def test_check_small_grid_f32(capsys):
    assert main(["check", "--grid", "small", "--dtype", "f32"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out
    assert "gradcheck" not in out


def test_check_accepts_stringio_sink():
    import io

    from qna.cli import _run_oracle_grid

    buf = io.StringIO()
    assert _run_oracle_grid("small", "f32", 42, out=buf)
    assert buf.getvalue().count("PASS") == 48


@pytest.mark.parametrize("tensor", ["w_o", "bias"])
def test_check_fault_injection_fails(tensor, capsys, monkeypatch):
    monkeypatch.setenv(PERTURB, tensor)
    assert main(["check", "--grid", "small", "--dtype", "f32"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out
    assert f"(perturbed {tensor})" in out


def test_check_gradcheck_fault_injection(capsys, monkeypatch):
    monkeypatch.setenv(PERTURB, "w_v")
    assert main(["check", "--grid", "small"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_check_tiny_model(capsys):
    assert main(["check", "--grid", "tiny-model"]) == 0
    assert "tiny-model oracle swap" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def test_bench_writes_csv(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    code = main(["bench", "--input", "12x12x4", "--k", "1,3",
                 "--impls", "qna_efficient,conv", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("impl,k,stride")
    assert len(lines) == 5
    assert lines[1].split(",")[0] == "qna_efficient"
    assert "wrote 4 rows" in capsys.readouterr().out


def test_bench_unwritable_path_exits_three(tmp_path, capsys):
    code = main(["bench", "--input", "8x8x4", "--k", "1",
                 "--impls", "conv", "--out", str(tmp_path / "missing" / "x.csv")])
    assert code == 3
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def test_model_report_text(capsys):
    assert main(["model", "--variant", "tiny"]) == 0
    out = capsys.readouterr().out
    assert "total params" in out and "total macs" in out
    assert "patch_embed" in out and "head" in out


def test_model_report_json(capsys):
    assert main(["model", "--variant", "tiny", "--report", "params", "--json"]) == 0
    import json

    doc = json.loads(capsys.readouterr().out)
    assert doc["variant"] == "tiny"
    assert "params" in doc and "flops" not in doc
    assert all("flops" not in row for row in doc["rows"])
    assert doc["params"] == sum(row["params"] for row in doc["rows"])


def test_model_bad_resolution_exits_two(capsys):
    assert main(["model", "--variant", "tiny", "--resolution", "223"]) == 2
    assert "divisible by 32" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# viz
# ---------------------------------------------------------------------------


def _write_input(path, shape, dtype=np.float64, seed=0):
    save_qnat(path, make_rng(seed).standard_normal(shape).astype(dtype))


def test_viz_writes_pgm_per_query_and_head(tmp_path, capsys):
    src = tmp_path / "map.qnat"
    _write_input(src, (12, 10, 6))
    outdir = tmp_path / "maps"
    assert main(["viz", "--input", str(src), "--out", str(outdir)]) == 0
    files = sorted(p.name for p in outdir.iterdir())
    assert files == ["attn_q0_h0.pgm", "attn_q0_h1.pgm", "attn_q1_h0.pgm", "attn_q1_h1.pgm"]
    blob = (outdir / "attn_q0_h0.pgm").read_bytes()
    assert blob.startswith(b"P5\n10 12\n255\n")
    assert len(blob) == len(b"P5\n10 12\n255\n") + 12 * 10


def test_viz_odd_channels_single_head(tmp_path):
    src = tmp_path / "map.qnat"
    _write_input(src, (6, 6, 5))
    outdir = tmp_path / "maps"
    assert main(["viz", "--input", str(src), "--out", str(outdir)]) == 0
    assert len(list(outdir.iterdir())) == 2  # L=2, one head


def test_write_pgm_scaling(tmp_path):
    from qna.cli import _write_pgm

    path = tmp_path / "ramp.pgm"
    _write_pgm(path, np.array([[0.0, 51.0], [102.0, 255.0]]))
    assert path.read_bytes() == b"P5\n2 2\n255\n" + bytes([0, 51, 102, 255])
    # a constant map has no range to normalize; it renders as black
    _write_pgm(path, np.full((2, 3), 7.25))
    assert path.read_bytes() == b"P5\n3 2\n255\n" + bytes(6)


def test_viz_missing_file_exits_three(tmp_path, capsys):
    assert main(["viz", "--input", str(tmp_path / "nope.qnat")]) == 3
    assert "error" in capsys.readouterr().err


def test_viz_corrupt_file_exits_three(tmp_path, capsys):
    bad = tmp_path / "bad.qnat"
    bad.write_bytes(b"JUNKJUNKJUNK")
    assert main(["viz", "--input", str(bad)]) == 3
    capsys.readouterr()


def test_viz_wrong_rank_exits_two(tmp_path, capsys):
    src = tmp_path / "mat.qnat"
    _write_input(src, (6, 6))
    assert main(["viz", "--input", str(src)]) == 2
    assert "rank" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train-toy
# ---------------------------------------------------------------------------


def test_train_toy_short_run_prints_trace(capsys):
    code = main(["train-toy", "--steps", "20"])
    out = capsys.readouterr().out
    assert "step    0" in out
    assert "step   10" in out
    assert out.strip().splitlines()[-1].startswith(("PASS", "FAIL"))
    assert code in (0, 1)  # 20 steps need not reach the halving target


def test_train_toy_zero_lr_fails(capsys):
    assert main(["train-toy", "--steps", "5", "--lr", "0"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out


def test_train_toy_bad_steps_exit_two(capsys):
    assert main(["train-toy", "--steps", "0"]) == 2
    capsys.readouterr()


def test_run_train_toy_deterministic():
    a = run_train_toy(6, 0.2, 11)
    b = run_train_toy(6, 0.2, 11)
    assert a[0] == b[0] and a[1] == b[1]
    assert a[2] == b[2] and len(a[2]) == 7  # per-step losses plus the final
    c = run_train_toy(6, 0.2, 12)
    assert c[0] != a[0] or c[1] != a[1]


def test_run_train_toy_zero_lr_keeps_loss():
    initial, final, trace = run_train_toy(4, 0.0, 3)
    assert initial == final
    assert all(v == initial for v in trace)
    with pytest.raises(ValueError):
        run_train_toy(0, 0.1, 3)
