import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from avasdl.rig import build_default_rig  # noqa: E402
from avasdl.training import Segment  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def rig():
    return build_default_rig()


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory, rig):
    """Three 2-s scenes on disk, shared read-only across tests."""
    from avasdl.sim import generate_corpus

    out = tmp_path_factory.mktemp("corpus")
    return generate_corpus(rig, 3, seed=5, out_dir=out, duration=2.0)


def random_segment(cfg, seed=0, active_frac=0.5, n_cameras=11):
    rng = np.random.default_rng(seed)
    t = cfg.n_frames
    active = rng.random((n_cameras, t)) < active_frac
    x = np.where(active, rng.uniform(0.1, 0.9, (n_cameras, t)), np.nan)
    return Segment(
        scene_id="rand", index=0,
        features=rng.standard_normal((cfg.in_channels, cfg.n_time, cfg.n_freq)).astype(np.float32),
        visual=rng.standard_normal((n_cameras, t, cfg.obs_width)),
        x_target=x, active=active,
    )


_ACCEPTANCE: list[str] = []


@pytest.fixture
def accept():
    """Record one pass/fail line for an acceptance criterion (shown in the terminal summary)."""

    def record(number, title, ok, detail):
        _ACCEPTANCE.append(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("] ")[1].split(".")[0])):
            terminalreporter.write_line(line)
