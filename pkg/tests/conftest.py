import pytest
import torch

from atklab.models import FeatureCNN, FeatureNet, UNet, VaeCodec, VaeNet, VictimModel


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_victim():
    torch.manual_seed(1)
    return VictimModel(UNet(base=8, emb_dim=16), arch={"base": 8, "emb_dim": 16, "in_ch": 3})


@pytest.fixture
def tiny_featnet():
    torch.manual_seed(2)
    return FeatureNet(FeatureCNN(widths=(4, 6, 8)), arch={"widths": (4, 6, 8)})


@pytest.fixture
def tiny_vae():
    torch.manual_seed(3)
    return VaeCodec(VaeNet(base=8), arch={"base": 8, "zc": 4})


@pytest.fixture
def images():
    from atklab.datagen import generate_set, stack

    return stack(generate_set(4, seed=11, size=16))[0]


class OracleVictim:
    """Predicts exactly the noise used by the forward process."""

    def __init__(self, eps, sched):
        self.true_eps = eps
        self.sched = sched

    def eps(self, x_t, t):
        return self.true_eps


def double(model):
    """Float64 copy of a frozen model wrapper, for finite-difference checks."""
    import copy

    m = copy.deepcopy(model)
    for attr in ("unet", "net"):
        if hasattr(m, attr):
            getattr(m, attr).double()
    return m


# --------------------------------------------------------------------------
# acceptance support: trained models (cached) and one verdict line per criterion

import os
from pathlib import Path

CACHE = Path(os.environ.get("ATKLAB_CACHE", Path(__file__).resolve().parent.parent / ".model_cache"))
VERDICTS: dict = {}


@pytest.fixture(scope="session")
def desk():
    from atklab.workbench import load_or_train

    torch.set_num_threads(int(os.environ.get("ATKLAB_THREADS", "1")))
    return load_or_train(CACHE)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS):
        ok, detail = VERDICTS[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
