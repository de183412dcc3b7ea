import pytest
from hypothesis import given, strategies as st

from unsir import config as C
from unsir.config import ExperimentConfig
from unsir.errors import ConfigError


def test_defaults_round_trip(tmp_path):
    cfg = ExperimentConfig()
    assert C.loads(C.dumps(cfg)) == cfg
    C.save(cfg, tmp_path / "c.txt")
    assert C.load(tmp_path / "c.txt") == cfg


def test_text_form_is_flat():
    text = C.dumps(ExperimentConfig())
    assert "[" not in text.splitlines()[0]
    assert "unsir.noise.lam = 0.1\n" in text
    assert "model.checkpoint" not in text  # None fields are omitted


@given(
    seed=st.integers(0, 2**64 - 1),
    impair_lr=st.floats(1e-6, 1.0),
    lam=st.floats(0.0, 10.0),
    cycles=st.integers(1, 5),
    retain=st.one_of(st.none(), st.floats(0.01, 1.0)),
    forget=st.lists(st.integers(0, 9), min_size=1, max_size=4, unique=True),
    out=st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=20),
)
def test_round_trip_property(seed, impair_lr, lam, cycles, retain, forget, out):
    cfg = ExperimentConfig().replace(**{
        "seed": seed, "output_dir": out, "unsir.impair_lr": impair_lr, "unsir.noise.lam": lam,
        "unsir.cycles": cycles, "unsir.retain_fraction": retain, "forget.classes": forget,
    })
    assert C.loads(C.dumps(cfg)) == cfg


def test_file_values_override_defaults():
    cfg = C.loads('seed = 7\nunsir.cycles = 2\nforget.sequence = [[1, 2], [3]]\nmodel.arch = "mlp"\n')
    assert cfg.seed == 7 and cfg.unsir.cycles == 2 and cfg.model.arch == "mlp"
    assert cfg.forget.sequence == ((1, 2), (3,))
    assert cfg.train == ExperimentConfig().train


@pytest.mark.parametrize("text", [
    "unsir.bogus = 1\n",
    "nonsense = 1\n",
    "unsir.cycles = \"two\"\n",
    "train.lr = true\n",
    "seed = -1\n",
    "model.arch = \"resnet\"\n",
    "dataset.kind = \"idx\"\n",
    "dataset.test_fraction = 1.5\n",
    "baselines.methods = [\"scrub\"]\n",
    "sweep.axis = \"momentum\"\n",
    "workers = 0\n",
    "train.lr = \n",
    "unsir = 3\n",
])
def test_bad_configs_are_rejected(text):
    with pytest.raises(ConfigError):
        C.loads(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        C.load(tmp_path / "absent.txt")


def test_integers_are_accepted_for_floats():
    assert C.loads("train.lr = 1\n").train.lr == 1.0


def test_environment_overrides():
    cfg = ExperimentConfig().with_env({"UNSIR_OUTPUT_DIR": "/tmp/x", "UNSIR_WORKERS": "3"})
    assert cfg.output_dir == "/tmp/x" and cfg.workers == 3
    assert ExperimentConfig().with_env({}) == ExperimentConfig()
    with pytest.raises(ConfigError):
        ExperimentConfig().with_env({"UNSIR_WORKERS": "many"})


@pytest.mark.parametrize("text,expected", [
    ("unsir.cycles=2", ("unsir.cycles", 2)),
    ("train.lr = 0.5", ("train.lr", 0.5)),
    ("forget.classes=[1,2]", ("forget.classes", [1, 2])),
    ("output_dir=runs/a", ("output_dir", "runs/a")),
    ('model.arch="mlp"', ("model.arch", "mlp")),
])
def test_parse_override(text, expected):
    assert C.parse_override(text) == expected


@pytest.mark.parametrize("text", ["cycles", "=3", ""])
def test_malformed_override(text):
    with pytest.raises(ConfigError):
        C.parse_override(text)


def test_replace_leaves_original_alone():
    base = ExperimentConfig()
    changed = base.replace(**{"unsir.noise.steps": 3})
    assert base.unsir.noise.steps == 40 and changed.unsir.noise.steps == 3
