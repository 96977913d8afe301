import json
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from gliopipe.config import load_config, parse_config
from gliopipe.io import read_manifest
from gliopipe.phantom import PhantomSpec, generate_cohort, generate_phantom
from gliopipe.pipeline import run_pipeline

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.yaml"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def phantom():
    """A full 4-modality 32^3 phantom with a GBM-like tumor."""
    return generate_phantom(PhantomSpec(tumor_radii=(6.0, 5.0, 7.0), grade=1, idh=1, codel=0),
                            np.random.default_rng(0))


@pytest.fixture(scope="session")
def desk_config():
    return load_config(DESK_CONFIG)


def desk_run_config(base_cfg, manifest_path, run_dir, **overrides):
    raw = dict(base_cfg.raw)
    raw.update(manifest=str(manifest_path), run_dir=str(run_dir), **overrides)
    return parse_config(raw, base_cfg.base_dir)


@pytest.fixture(scope="session")
def desk(tmp_path_factory, desk_config):
    """End-to-end desk run: 32 phantoms, 24 train / 8 test, both models trained."""
    root = tmp_path_factory.mktemp("desk")
    cfg = desk_config
    generate_cohort(32, root / "cohort", seed=cfg.seed,
                    missing_label_fractions={"idh": 0.2, "codel": 0.2})
    run_cfg = desk_run_config(cfg, root / "cohort" / "manifest.csv", root / "run")
    run, failures = run_pipeline(run_cfg)
    timings = json.loads((run / "timings.json").read_text())
    return SimpleNamespace(
        root=root, cfg=run_cfg, run=run, failures=failures,
        cohort=read_manifest(root / "cohort" / "manifest.csv"),
        pre=read_manifest(run / "preprocessed" / "manifest.csv"),
        seg_path=run / "segmenter.pt", clf_path=run / "classifier.pt",
        seg_seconds=timings["train_seg"], clf_seconds=timings["train_clf"],
    )


# acceptance results, filled in by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
