from dataclasses import replace

import pytest

from cdrn.derain import DerainConfig
from cdrn.pipeline import desk_config, procedural_dataset
from cdrn.pipeline.config import StageConfig


def make_tiny_config(seed: int = 0, epochs: int = 2):
    """Two 64x64 scenes and a narrow deraining net: a full three-stage run takes about a second."""
    cfg = desk_config(seed)
    return replace(
        cfg,
        derain=DerainConfig(depth=2, base_channels=8),
        data=replace(cfg.data, n_train=2, n_test=1, width=64, height=64),
        stages={
            1: StageConfig(epochs, 3e-4, 1),
            2: StageConfig(epochs, 2e-3, 1),
            3: StageConfig(epochs, 5e-4, 1, None),
        },
    )


@pytest.fixture
def tiny_config():
    return make_tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    return procedural_dataset(make_tiny_config())


ACCEPTANCE = {
    "ac1": "gradient suite",
    "ac2": "SSIM oracle",
    "ac3": "loss identities",
    "ac4": "assignment oracle",
    "ac5": "mAP oracle",
    "ac6": "deraining overfit",
    "ac7": "three-stage smoke",
    "ac8": "ablation toggles",
    "ac9": "determinism",
    "ac10": "checkpoint and resume",
}


def pytest_terminal_summary(terminalreporter):
    outcomes = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance.py::test_ac" not in getattr(rep, "nodeid", ""):
                continue
            ac = rep.nodeid.split("::test_")[1].split("_")[0]
            prev = outcomes.get(ac)
            ok = key == "passed" and (prev is None or prev[0])
            detail = dict(rep.user_properties).get("detail", "") or (prev[1] if prev else "")
            outcomes[ac] = (ok, detail)
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for ac, label in ACCEPTANCE.items():
        if ac in outcomes:
            ok, detail = outcomes[ac]
            terminalreporter.write_line(f"{ac.upper():<5} {'PASS' if ok else 'FAIL'}  {label}: {detail}")
