import os
import sys
from pathlib import Path

from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent))

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=300, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


import pytest  # noqa: E402

from unsir.data import SyntheticSpec, generate_synthetic, partition, train_test_split  # noqa: E402
from unsir.models import ModelSpec, build_model, train  # noqa: E402


class Tiny:
    """A 5-class, 1x4x4 blob problem with a trained one-block smallcnn."""

    def __init__(self):
        ds = generate_synthetic(SyntheticSpec(5, (1, 4, 4), 60, 6.0, 1.0), 11)
        self.train, self.test = train_test_split(ds, 0.25, 12)
        self.model = build_model(ModelSpec("smallcnn", (1, 4, 4), 5, channels=(16,), init_seed=13))
        train(self.model, self.train, 8, 8, 0.05, 14)
        self.part = partition(self.train, {0})
        held = partition(self.test, {0})
        self.eval_sets = (held.forget_set, held.retain_set)


@pytest.fixture(scope="session")
def tiny():
    return Tiny()


class Desk:
    """The default desk benchmark: original model trained once per session."""

    def __init__(self):
        from unsir.config import ExperimentConfig
        from unsir import runner

        self.cfg = ExperimentConfig()
        self.bench = runner.load_bench(self.cfg)
        self.model, self.history = runner.original_model(self.cfg, self.bench)
        self.part, self.eval_sets = self.bench.split([0])
        self.ucfg = runner.unsir_config(self.cfg)


@pytest.fixture(scope="session")
def desk():
    return Desk()


@pytest.fixture(scope="session")
def desk_checkpoint(desk, tmp_path_factory):
    from unsir.models import save_checkpoint

    path = tmp_path_factory.mktemp("desk") / "original.ckpt"
    save_checkpoint(desk.model, path)
    return path


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
