import pytest
from hypothesis import given
from hypothesis import strategies as st

from pgits.config import RunConfig, dump_config, load_config, override, parse_config
from pgits.errors import ConfigError


def test_empty_file_gives_defaults():
    assert parse_config("") == RunConfig()


def test_sections_are_parsed():
    cfg = parse_config("""
[data]
stride = 6
[model]
layers = 2
residual = false
[train]
lr = 1e-3
[split]
test_months = 3, 6
[evaluate]
knn = 3
""")
    assert cfg.data.stride == 6 and cfg.model.layers == 2 and cfg.model.residual is False
    assert cfg.train.lr == 1e-3 and cfg.split.test_months == (3, 6) and cfg.knn == 3


@pytest.mark.parametrize("text", [
    "[model]\nlayerz = 2\n",
    "[nope]\n",
    "[train]\nlr = fast\n",
    "[train]\nalpha = 1.5\n",
    "[evaluate]\nk = 2\n",
    "not an ini",
])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.ini")


@given(st.integers(0, 1000), st.floats(0.0, 0.9), st.floats(0.0, 2.0), st.floats(0.01, 5.0), st.integers(1, 9))
def test_dump_round_trip(seed, alpha, beta, k, knn):
    cfg = override(RunConfig(), seed=seed, alpha=alpha, beta=beta, diffusion_k=k, knn=knn)
    assert parse_config(dump_config(cfg)) == cfg


def test_override_ignores_unset_and_validates():
    assert override(RunConfig(), seed=None, alpha=None) == RunConfig()
    with pytest.raises(ConfigError):
        override(RunConfig(), alpha=2.0)
