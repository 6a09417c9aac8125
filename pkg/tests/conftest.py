import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from consolidate.checkpoint import Checkpoint, Entry, Manifest
from consolidate.testbed.tasks import gen_tasks
from consolidate.testbed.train import init_base, train, train_joint

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def toy_manifest(shapes=((3, 2),), heads=True) -> Manifest:
    """Dense chain manifest: one weight/bias pair per shape, last one as head."""
    entries = []
    for d, shape in enumerate(shapes, start=1):
        last = heads and d == len(shapes)
        entries.append(Entry(f"l{d}.weight", tuple(shape), "head_weight" if last else "weight", d))
        entries.append(Entry(f"l{d}.bias", (shape[0],), "head_bias" if last else "bias", d))
    return Manifest(len(shapes), tuple(entries))


def random_checkpoint(manifest: Manifest, seed: int, kind="base", tag="", scale=1.0) -> Checkpoint:
    g = np.random.default_rng(seed)
    tensors = {e.name: scale * g.standard_normal(e.shape) for e in manifest.entries}
    return Checkpoint(manifest, tensors, kind, tag)


@pytest.fixture(scope="session")
def testbed():
    """Seed-42 bundle at similarity 0.3 with base, three full experts and the joint model."""
    bundle = gen_tasks(42, 0.3)
    train_sets = bundle.split("train")
    base = init_base(42, train_sets)
    experts = [train(base, d, seed=42) for d in train_sets]
    joint = train_joint(base, train_sets, seed=42)
    return {"bundle": bundle, "base": base, "experts": experts, "joint": joint}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
