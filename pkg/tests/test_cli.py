import json
import os
import subprocess
import sys

import numpy as np
import pytest

from bhra.cli import main
from bhra.matrix_core import save_matrix

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def payload(out):
    return json.loads(out)


def test_grad_check_passes(capsys):
    code, out, err = run(capsys, "grad-check", "--kinds", "bhra", "--trials", "50", "--seed", "7")
    assert code == 0
    doc = payload(out)
    assert doc["kinds"]["bhra"]["max_rel_err"] <= 1e-6 and doc["passed"]
    assert "bhra" in err


def test_grad_check_all_kinds(capsys):
    code, out, _ = run(capsys, "grad-check", "--kinds", "all", "--trials", "3")
    assert code == 0 and sorted(payload(out)["kinds"]) == ["abba", "bhra", "hira", "lora"]


@pytest.mark.parametrize("argv", [
    ("grad-check", "--kinds", "dora"),
    ("grad-check", "--trials", "0"),
    ("rank-bounds", "--trials", "0"),
    ("flops", "--m", "8", "--n", "8", "--r", "4", "--b", "3", "--T", "1"),
    ("flops", "--m", "8"),
    ("nonsense",),
    (),
])
def test_usage_errors_exit_2(capsys, argv):
    code, out, err = run(capsys, *argv)
    assert code == 2 and out == "" and "error" in err


def test_rank_bounds_default_and_witness(capsys):
    code, out, err = run(capsys, "rank-bounds")
    doc = payload(out)
    assert code == 0
    assert all(v["violations"] == 0 for v in doc["kinds"].values())
    assert doc["witness"]["rank"] == 4 and doc["witness"]["hira_bound"] == 2
    code, out, _ = run(capsys, "rank-bounds", "--kinds", "hira", "--trials", "1000")
    assert code == 0 and payload(out)["kinds"]["hira"]["violations"] == 0


def test_spectra_identity_and_rank1(capsys):
    code, out, _ = run(capsys, "spectra", "--matrix", os.path.join(FIXTURES, "identity_4.txt"), "--grid-b", "2")
    doc = payload(out)
    assert code == 0 and doc["stable_rank"] == 4.0
    # two occupied diagonal blocks out of four
    assert doc["block_gini"] == pytest.approx(0.5)
    code, out, _ = run(capsys, "spectra", "--matrix", os.path.join(FIXTURES, "rank1_3x4.txt"))
    assert payload(out)["stable_rank"] == pytest.approx(1.0, abs=1e-12)


def test_spectra_golden_is_byte_identical(capsys):
    code, out, _ = run(capsys, "spectra", "--matrix", os.path.join(FIXTURES, "golden_8x8.txt"), "--grid-b", "2")
    with open(os.path.join(FIXTURES, "golden_8x8_b2.json")) as fh:
        assert out == fh.read()


def test_spectra_csv(capsys):
    code, out, _ = run(capsys, "spectra", "--matrix", os.path.join(FIXTURES, "identity_4.txt"), "--format", "csv")
    header, row = out.strip().splitlines()
    assert header.startswith("matrix_id,") and row.startswith("identity_4.txt,4,")


def test_spectra_errors(capsys, tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("2 2\n1 2\n3\n")
    assert run(capsys, "spectra", "--matrix", str(bad))[0] == 2
    assert run(capsys, "spectra", "--matrix", str(tmp_path / "missing.txt"))[0] == 2
    good = tmp_path / "m.txt"
    save_matrix(good, np.eye(4))
    assert run(capsys, "spectra", "--matrix", str(good), "--grid-b", "3")[0] == 2


def test_flops_examples(capsys):
    code, out, _ = run(capsys, "flops", "--m", "8", "--n", "8", "--r", "4", "--b", "2", "--T", "1")
    rep = payload(out)["report"]
    assert code == 0 and rep["flops_train"] == 384 and rep["gralora_train"] == 176
    code, out, _ = run(capsys, "flops", "--m", "8", "--n", "8", "--r", "4", "--b", "1", "--T", "3")
    rep = payload(out)["report"]
    assert rep["flops_train"] == rep["hira_train"]


def test_float_output_has_17_digits(capsys):
    _, out, _ = run(capsys, "spectra", "--matrix", os.path.join(FIXTURES, "golden_8x8.txt"))
    text = out.split('"effective_rank": ')[1].split(",")[0]
    assert len(text.replace(".", "").lstrip("0")) == 17
    assert float(text) == payload(out)["effective_rank"]


def write_cfg(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return str(p)


SMALL_CFG = """
m = 16
n = 16
r0_target = 4
train_steps = 80
warmup_steps = 10
seeds = 1, 2
"""


def test_train_toy_small(capsys, tmp_path):
    cfg = write_cfg(tmp_path, SMALL_CFG + "kind = hira\nr_tot = 4\n")
    out_dir = tmp_path / "out"
    code, out, err = run(capsys, "train-toy", "--config", cfg, "--out-dir", str(out_dir))
    doc = payload(out)
    assert code == 0 and len(doc["records"]) == 2
    assert doc["records"][0]["config"]["kind"] == "hira"
    lines = (out_dir / "records.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["seed"] == 1
    assert (out_dir / "aggregate.csv").read_text().startswith("kind,")


def test_train_toy_is_deterministic(capsys, tmp_path):
    cfg = write_cfg(tmp_path, SMALL_CFG + "kind = bhra\nr_tot = 4\nb = 2\n")
    first = run(capsys, "train-toy", "--config", cfg)[1]
    assert run(capsys, "train-toy", "--config", cfg, "--threads", "2")[1] == first


def test_config_errors_exit_2(capsys, tmp_path):
    assert run(capsys, "train-toy", "--config", str(tmp_path / "missing.cfg"))[0] == 2
    assert run(capsys, "sweep", "--config", write_cfg(tmp_path, "bogus = 1\n"))[0] == 2
    assert run(capsys, "train-toy", "--config", write_cfg(tmp_path, "kind = dora\n"))[0] == 2
    assert run(capsys, "sweep", "--config", write_cfg(tmp_path, "blocks = 1, 3\n"))[0] == 2
    assert run(capsys, "gini", "--config", write_cfg(tmp_path, "m = x\n"))[0] == 2


def test_sweep_flags_failed_ordering(capsys, tmp_path):
    # two blocks cannot have an interior peak, so the check must fail
    cfg = write_cfg(tmp_path, SMALL_CFG + "r_tot = 4\nblocks = 1, 2\n")
    code, out, _ = run(capsys, "sweep", "--config", cfg)
    assert code == 1 and payload(out)["passed"] is False


def test_bundled_sweep_config(capsys):
    code, out, err = run(capsys, "sweep")
    doc = payload(out)
    assert code == 0 and doc["checks"]["unimodal_interior_peak"]
    assert len(doc["aggregate"]) == 4 and all(r["runs"] == 5 for r in doc["aggregate"])


def test_bundled_figure1_config(capsys):
    code, out, err = run(capsys, "figure1")
    assert code == 0 and payload(out)["checks"]["bhra_above_hira_and_lora_below_2"]


def test_bundled_gini_config(capsys):
    code, out, err = run(capsys, "gini")
    doc = payload(out)
    assert code == 0 and doc["checks"]["gini_order_seeds"] >= 4


def test_console_script_and_module_entry(tmp_path):
    env = dict(os.environ, BHRA_THREADS="2")
    res = subprocess.run([sys.executable, "-m", "bhra.cli", "flops", "--m", "8", "--n", "8", "--r", "4",
                          "--b", "2", "--T", "1"], capture_output=True, text=True, env=env)
    assert res.returncode == 0 and json.loads(res.stdout)["report"]["flops_train"] == 384
