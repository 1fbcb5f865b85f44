from types import SimpleNamespace

import numpy as np
import pytest
import torch
import yaml

from ctexperts.cli import main as cli_main
from ctexperts.config import load_config
from ctexperts.ledger import SplitLedger
from ctexperts.pipeline import RunPaths
from ctexperts.synth import generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260825)


def tiny_ledger(per_cell_train: int = 2, per_cell_val: int = 1, n_test: int = 8) -> SplitLedger:
    counts = {}
    for src in range(4):
        for cls in range(2):
            counts[("train", src, cls)] = per_cell_train
            counts[("val", src, cls)] = per_cell_val
    counts[("test", None, None)] = n_test
    return SplitLedger(counts=counts, corrections=())


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small generated dataset shared by storage/prep/pipeline tests."""
    root = tmp_path_factory.mktemp("tiny_dataset")
    generate_dataset(tiny_ledger(), root, master_seed=77, base_inplane=48,
                     excluded_test=1)
    return root


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    """One complete CLI run (synth through evaluate) at toy scale.

    Shared by the pipeline and CLI tests so the expensive training happens
    once per session. scale=0.02 gives 27 train / 8 val / 30 test scans
    (one test scan excluded), small enough for a single CPU core.
    """
    root = tmp_path_factory.mktemp("full_run")
    config = {
        "seed": 404,
        "paths": {"data_root": str(root / "data"),
                  "output_root": str(root / "out")},
        "data": {"scale": 0.02, "base_inplane": 48},
        "prep": {"pool3d": [4, 8, 8], "pool2d": [16, 16]},
        "stage1": {"epochs": 2, "channels": [4, 8]},
        "stage2a": {"epochs": 2, "channels": [6, 12], "embed_dim": 16,
                    "pretrain_steps": 4},
        "stage2b": {"epochs": 2, "n_heads": 2, "ff_dim": 32},
        "stage3": {"epochs": 4},
    }
    config_path = root / "run.yaml"
    config_path.write_text(yaml.safe_dump(config))
    for argv in (["synth"], ["prep"], ["train", "--stage", "all"],
                 ["predict"], ["fuse"], ["evaluate"]):
        rc = cli_main([argv[0], "--config", str(config_path), *argv[1:]])
        assert rc == 0, f"ctexperts {argv[0]} failed during fixture setup"
    cfg = load_config(config_path)
    return SimpleNamespace(root=root, config_path=config_path, cfg=cfg,
                           paths=RunPaths.from_config(cfg))
