import json
import os
from pathlib import Path

import pytest

from ttaseg import pretrain
from ttaseg.model import ModelConfig, SegModel, load_checkpoint

REPO_ROOT = Path(__file__).resolve().parents[1]
PINNED = json.loads((REPO_ROOT / "benchmarks" / "pinned.json").read_text())

# reduced geometry for finite-difference sweeps: same structure, far fewer
# trainable scalars
CONFIG16 = ModelConfig(
    image_size=16,
    patch_size=8,
    embed_dim=8,
    encoder_blocks=2,
    attention_heads=2,
    lowres_size=4,
    highres_size=16,
    lora_rank=4,
)


@pytest.fixture()
def model64():
    return SegModel.build(ModelConfig(), seed=7)


@pytest.fixture()
def model16():
    return SegModel.build(CONFIG16, seed=3)


@pytest.fixture(scope="session")
def accept_ckpt(tmp_path_factory):
    """The pinned-config pretrained checkpoint used by measured tests.

    Set TTASEG_TEST_CACHE to a directory to reuse the checkpoint across
    pytest invocations while iterating locally.
    """
    cfg = pretrain.PretrainConfig(**PINNED["pretrain"]["config"])
    cache = os.environ.get("TTASEG_TEST_CACHE")
    if cache:
        path = Path(cache) / "accept.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        if not path.exists():
            pretrain.pretrain(cfg, path)
    else:
        path = tmp_path_factory.mktemp("ckpt") / "accept.ckpt"
        pretrain.pretrain(cfg, path)
    return path


@pytest.fixture(scope="session")
def accept_model(accept_ckpt):
    return load_checkpoint(accept_ckpt)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            name = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_c" in name:
                tag = name.split("::")[-1]
                lines.append((tag, "PASS" if status == "passed" else "FAIL"))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for tag, verdict in sorted(lines):
            terminalreporter.write_line(f"{verdict}  {tag}")
