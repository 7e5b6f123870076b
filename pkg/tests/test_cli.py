"""Command-line interface: flags, JSON payloads, exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from hiformer import cli
from hiformer import checkpoint as ckpt_io
from hiformer import pnm
from hiformer.config import build_config
from hiformer.model import build_model


def run_cli(capsys, *argv):
    rc = cli.main(list(argv))
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


def json_out(capsys, *argv):
    rc, out, err = run_cli(capsys, *argv)
    assert rc == 0, err
    return json.loads(out)


# One small dataset plus one short training run, shared by the tests below.

@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliwork")
    data = root / "data"
    ckpt = root / "model.hifw"
    log = root / "train.jsonl"
    rc = cli.main(["synth", "--n", "8", "--hw", "32", "--k", "2",
                   "--seed", "0", "--out", str(data)])
    assert rc == 0
    rc = cli.main(["train", "--model", "hiformer-tiny", "--data", str(data),
                   "--epochs", "1", "--batch", "4", "--seed", "0",
                   "--out", str(ckpt), "--log", str(log)])
    assert rc == 0
    return {"root": root, "data": data, "ckpt": ckpt, "log": log}


def test_params_tiny_matches_frozen_counts(capsys):
    payload = json_out(capsys, "params", "--model", "hiformer-tiny", "--json")
    assert payload["model"] == "hiformer-tiny"
    # Totals hand-derived from layer shapes in test_config.py.
    assert payload["total"] == 136_864
    assert payload["per_module"] == {
        "cnn": 82_056, "swin": 36_590, "dlf": 13_384, "decoder": 4_834,
    }


def test_params_b_near_published_total(capsys):
    payload = json_out(capsys, "params", "--model", "hiformer-b", "--json")
    assert abs(payload["total"] - 25_510_000) / 25_510_000 < 0.15


def test_params_no_dlf_drops_the_fusion_block(capsys):
    full = json_out(capsys, "params", "--model", "hiformer-tiny", "--json")
    bare = json_out(capsys, "params", "--model", "hiformer-tiny",
                    "--no-dlf", "--json")
    assert "dlf" not in bare["per_module"]
    assert full["total"] - bare["total"] == full["per_module"]["dlf"]


def test_audit_passes_and_reports_every_model(capsys):
    rc, out, err = run_cli(capsys, "audit", "--json")
    assert rc == 0
    rows = json.loads(out)
    assert [r["model"] for r in rows] == ["hiformer-b", "hiformer-l",
                                         "hiformer-s"]
    for row in rows:
        assert row["within"] is True
        assert abs(row["rel_dev"]) < 0.15
        assert set(row["per_module"]) == {"cnn", "swin", "dlf", "decoder"}
        assert row["largest_module"] in row["per_module"]
        assert row["measured"] == sum(row["per_module"].values())


def test_synth_writes_loadable_layout(workdir):
    data = workdir["data"]
    assert sorted(p.name for p in (data / "images").iterdir()) == [
        f"{i:05d}.pgm" for i in range(8)
    ]
    assert len(list((data / "masks").iterdir())) == 8


def test_train_emits_summary_and_log(workdir, capsys):
    assert workdir["ckpt"].exists()
    lines = workdir["log"].read_text().strip().splitlines()
    assert len(lines) == 1
    record = json.loads(lines[0])
    assert record["epoch"] == 0  # epochs are logged zero-based
    assert np.isfinite(record["loss"])


def test_eval_oracle_is_perfect(workdir, capsys):
    payload = json_out(capsys, "eval", "--model", "hiformer-tiny",
                       "--data", str(workdir["data"]), "--oracle", "--json")
    assert payload["mean"]["dsc"] == 1.0
    assert payload["mean"]["hd95"] == 0.0
    assert payload["mean"]["acc"] == 1.0
    assert payload["n_images"] == 8


def test_eval_with_checkpoint(workdir, capsys):
    payload = json_out(capsys, "eval", "--model", "hiformer-tiny",
                       "--data", str(workdir["data"]),
                       "--ckpt", str(workdir["ckpt"]), "--json")
    for key in ("dsc", "hd95", "se", "sp", "acc", "miou"):
        assert key in payload["mean"]
    assert 0.0 <= payload["mean"]["dsc"] <= 1.0


def test_eval_without_checkpoint_errors(workdir, capsys):
    rc, out, err = run_cli(capsys, "eval", "--model", "hiformer-tiny",
                           "--data", str(workdir["data"]))
    assert rc == 1
    assert err.startswith("error: HiFormerError: eval needs --ckpt")


def test_infer_writes_argmax_mask(workdir, capsys):
    image = workdir["data"] / "images" / "00000.pgm"
    out_path = workdir["root"] / "pred.pgm"
    payload = json_out(capsys, "infer", "--model", "hiformer-tiny",
                       "--ckpt", str(workdir["ckpt"]),
                       "--image", str(image), "--out", str(out_path), "--json")
    mask = pnm.load_mask(out_path)
    assert mask.shape == (32, 32)
    assert payload["classes"] == sorted(int(c) for c in np.unique(mask))
    assert set(payload["classes"]) <= {0, 1}


def test_zero_epoch_checkpoint_is_the_init(workdir, capsys):
    out = workdir["root"] / "init.hifw"
    payload = json_out(capsys, "train", "--model", "hiformer-tiny",
                       "--data", str(workdir["data"]), "--epochs", "0",
                       "--seed", "3", "--out", str(out), "--json")
    assert payload["steps"] == 0
    arrays = ckpt_io.load_arrays(out)
    model = build_model(build_config("hiformer-tiny"), seed=3)
    for name, param in model.named_parameters():
        np.testing.assert_array_equal(arrays[name], param.data)


def test_gradcheck_cli_passes(capsys):
    payload = json_out(capsys, "gradcheck", "--samples", "1", "--json")
    assert payload["passed"] is True
    assert payload["threshold"] == 1e-4
    assert payload["group_max"]
    assert all(v < 1e-4 for v in payload["group_max"].values())


def test_unknown_model_is_a_clean_error(capsys):
    rc, out, err = run_cli(capsys, "params", "--model", "hiformer-xxl")
    assert rc == 1
    assert err.startswith("error: UnknownModel:")


def test_bad_override_is_a_clean_error(capsys):
    rc, out, err = run_cli(capsys, "params", "--model", "hiformer-tiny",
                           "--hw", "30")
    assert rc == 1
    assert err.startswith("error: InvalidConfig:")


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "hiformer", "params",
         "--model", "hiformer-tiny", "--json"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["total"] == 136_864
