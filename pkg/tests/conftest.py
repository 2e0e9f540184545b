"""Shared fixtures: the desk-scale reverse Duffing pipeline, run once per seed."""

import contextlib
import io
import json
import os
import tempfile
import time
from pathlib import Path

import pytest

from kklcert.cli import main

ROOT = Path(__file__).resolve().parents[1]
DUFFING_CONFIG = ROOT / "configs" / "reverse_duffing.toml"
PIPELINE = ["gen-data", "train", "finetune", "train-inverse", "certify", "certificate",
            "simulate"]

_runs = {}
_workdir = tempfile.TemporaryDirectory(prefix="kklcert-desk-")


def run_cli(*args):
    """Run the CLI in-process; returns ``(exit code, stdout)``."""
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main([str(a) for a in args])
    return code, buf.getvalue()


def duffing_pipeline(seed):
    """Full desk-scale pipeline for one seed; cached for the session.

    Returns a dict with the output directory, per-stage exit codes, wall time
    and the parsed certificate and envelope documents.
    """
    if seed not in _runs:
        out = Path(_workdir.name) / f"seed{seed}"
        t0 = time.perf_counter()
        codes = {}
        for cmd in PIPELINE:
            codes[cmd], _ = run_cli(cmd, "--config", DUFFING_CONFIG, "--seed", seed,
                                    "--out", out, "--threads", os.cpu_count() or 1)
            if codes[cmd] != 0:
                break
        info = {"out": out, "codes": codes, "wall_time": time.perf_counter() - t0}
        for name in ("certificate", "envelope", "certification"):
            p = out / f"{name}.json"
            info[name] = json.loads(p.read_text()) if p.exists() else None
        _runs[seed] = info
    return _runs[seed]


@pytest.fixture(scope="session")
def duffing_seed0():
    return duffing_pipeline(0)
