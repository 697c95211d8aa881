"""Command-line behaviour, driven through the installed module."""

import json
import subprocess
import sys

import numpy as np
import pytest

from exporter_fixtures import SMALL_CFG, build_model_pair
from ffwdexport import __version__
from ffwdexport.namemap import community_default_map
from ffwdexport.safetensors_io import write_safetensors


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "ffwdexport", *[str(a) for a in args]],
        capture_output=True, text=True,
    )


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    source, engine = build_model_pair(SMALL_CFG, seed=20)
    write_safetensors(root / "model.safetensors", source)
    (root / "map.json").write_text(json.dumps(community_default_map(SMALL_CFG)))
    (root / "toks.txt").write_text("1 2 3 4 5 6 7 8 9 10\n0 63 31\n")
    proc = run_cli("export", "--src", root / "model.safetensors",
                   "--map", root / "map.json", "--out", root / "model.ffwd")
    assert proc.returncode == 0, proc.stderr
    return root


def test_version():
    proc = run_cli("--version")
    assert proc.returncode == 0
    assert proc.stdout.strip() == __version__


def test_export_reports_summary(workspace):
    assert (workspace / "model.ffwd").exists()
    proc = run_cli("export", "--src", workspace / "model.safetensors",
                   "--map", workspace / "map.json",
                   "--out", workspace / "again.ffwd")
    assert proc.returncode == 0
    assert "21 tensors" in proc.stdout  # 3 globals + 9 fields x 2 layers


def test_missing_source_exits_2_without_traceback(workspace):
    proc = run_cli("export", "--src", workspace / "nope.safetensors",
                   "--map", workspace / "map.json",
                   "--out", workspace / "x.ffwd")
    assert proc.returncode == 2
    assert "error:" in proc.stderr
    assert "Traceback" not in proc.stderr


def test_malformed_map_exits_2(workspace, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    proc = run_cli("export", "--src", workspace / "model.safetensors",
                   "--map", bad, "--out", tmp_path / "x.ffwd")
    assert proc.returncode == 2
    assert "not valid JSON" in proc.stderr


def test_reference_from_source_and_from_export_agree(workspace):
    for src, out in (("model.safetensors", "ref_src.json"),
                     ("model.ffwd", "ref_ffwd.json")):
        proc = run_cli("reference", "--src", workspace / src,
                       "--map", workspace / "map.json",
                       "--tokens", workspace / "toks.txt",
                       "--out", workspace / out)
        assert proc.returncode == 0, proc.stderr
    a = json.loads((workspace / "ref_src.json").read_text())["logits"]
    b = json.loads((workspace / "ref_ffwd.json").read_text())["logits"]
    assert a == b
    assert len(a) == 2
    assert len(a[0]) == SMALL_CFG["vocab_size"]


def test_parity_identical_inputs(workspace):
    proc = run_cli("parity", "--engine-logits", workspace / "ref_src.json",
                   "--ref-logits", workspace / "ref_ffwd.json",
                   "--report", workspace / "parity.json")
    assert proc.returncode == 0, proc.stderr
    report = json.loads((workspace / "parity.json").read_text())
    assert report["max_abs_diff"] == 0.0
    assert report["argmax_agreement"] == 1.0
    assert report["within_tolerance"] is True
    assert "100%" in proc.stdout


def test_parity_beyond_tolerance_exits_1(workspace, tmp_path):
    payload = json.loads((workspace / "ref_src.json").read_text())
    payload["logits"][0][0] += 1.0
    nudged = tmp_path / "nudged.json"
    nudged.write_text(json.dumps(payload))
    proc = run_cli("parity", "--engine-logits", workspace / "ref_src.json",
                   "--ref-logits", nudged)
    assert proc.returncode == 1
    assert "max |diff| = 1.000e+00" in proc.stdout


def test_parity_sequence_count_mismatch_exits_2(workspace, tmp_path):
    payload = json.loads((workspace / "ref_src.json").read_text())
    payload["logits"] = payload["logits"][:1]
    short = tmp_path / "short.json"
    short.write_text(json.dumps(payload))
    proc = run_cli("parity", "--engine-logits", workspace / "ref_src.json",
                   "--ref-logits", short)
    assert proc.returncode == 2
    assert "count mismatch" in proc.stderr


def test_reference_rejects_out_of_range_tokens(workspace, tmp_path):
    toks = tmp_path / "toks.txt"
    toks.write_text("1 2 999\n")
    proc = run_cli("reference", "--src", workspace / "model.ffwd",
                   "--map", workspace / "map.json",
                   "--tokens", toks, "--out", tmp_path / "ref.json")
    assert proc.returncode == 2
    assert "lie in" in proc.stderr
