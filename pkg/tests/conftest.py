import os
import time

import numpy as np
import pytest
from hypothesis import settings

from fusedit.gradcheck import mini_batch, mini_model

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

VARIANTS = ("deep", "shallow-self", "shallow-cross", "deep-cross")

# a fast model for trainer and CLI round trips, as CLI --set flags
TINY = [
    "--set", "llm.num_layers=2", "--set", "llm.hidden=16", "--set", "llm.head_dim=8",
    "--set", "llm.ffn_dim=32", "--set", "dit.num_layers=2", "--set", "dit.hidden=16",
    "--set", "dit.head_dim=8", "--set", "dit.ffn_dim=32", "--set", "image_size=8",
    "--set", "text_len=12", "--set", "timestep_dim=16", "--set", "batch=4",
]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=VARIANTS)
def variant(request):
    return request.param


@pytest.fixture
def mini(variant):
    model = mini_model(variant)
    return model, mini_batch(model)


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """The 2000-step learning run, shared by every test that needs it."""
    from fusedit.presets import BASELINE
    from fusedit.train import Trainer, evaluate, heldout_batches, zero_loss

    run = BASELINE
    held = heldout_batches(run, 512)
    out = tmp_path_factory.mktemp("smoke")
    tr = Trainer(run, out)
    t0 = time.perf_counter()
    tr.fit()
    seconds = time.perf_counter() - t0
    loss, base = evaluate(tr.model, held), zero_loss(held)
    return {
        "run": run,
        "trainer": tr,
        "seconds": seconds,
        "heldout": loss,
        "zero": base,
        "reduction": 1.0 - loss / base,
        "ema_heldout": evaluate(tr.model, held, tr.state.ema),
    }


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
