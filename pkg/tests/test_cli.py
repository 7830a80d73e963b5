import io
import json

import pytest

from riemannian_precoding.cli import main

SPEC = """\
num_bs_antennas = 4
user_antennas = 2, 2
snr_points_db = 10
seeds = 1, 2
max_outer = 30
"""


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "exp.spec"
    path.write_text(SPEC + f"output_dir = {tmp_path / 'out'}\n")
    return path


def run(*argv):
    buf = io.StringIO()
    code = main(list(argv), out=buf)
    return code, buf.getvalue()


def test_run_and_summarize(spec_file, tmp_path):
    code, text = run("run", str(spec_file), "--seed", "2", "--solver", "rtr", "--constraint", "pupc", "--init", "rzf")
    assert code == 0, text
    out = tmp_path / "out"
    assert [p.name for p in out.glob("trace_*.csv")] == ["trace_2_10.csv"]
    assert "rtr  pupc" in text
    (out / "summary.csv").unlink()
    code, text = run("summarize", str(out))
    assert code == 0 and (out / "summary.csv").exists()


def test_out_flag_overrides_spec(spec_file, tmp_path):
    code, _ = run("run", str(spec_file), "--out", str(tmp_path / "elsewhere"))
    assert code == 0
    assert len(list((tmp_path / "elsewhere").glob("trace_*.csv"))) == 2


def test_check_gradients(spec_file):
    code, text = run("check-gradients", str(spec_file), "--constraint", "papc")
    assert code == 0
    assert text.count(" ok") == 2 and "worst relative error" in text


def test_bench_flops(spec_file, tmp_path):
    code, text = run("bench-flops", str(spec_file), "--iterations", "3", "--out", str(tmp_path / "b"))
    assert code == 0
    reports = json.loads((tmp_path / "b" / "bench_flops.json").read_text())
    assert [r["dims"]["Mt"] for r in reports] == [4, 8, 16]
    assert "Mt 4 -> 8" in text


def test_bad_spec_reports_error(tmp_path, capsys):
    bad = tmp_path / "bad.spec"
    bad.write_text("colour = blue\n")
    code, _ = run("run", str(bad))
    assert code == 2
    assert "unknown key" in capsys.readouterr().err


def test_invalid_choice_exits():
    with pytest.raises(SystemExit):
        main(["run", "x.spec", "--solver", "newton"])
