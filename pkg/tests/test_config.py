import pytest

from qdmf.config import RunConfig, load_config, parse_config
from qdmf.errors import ConfigurationError


def test_defaults_valid():
    cfg = RunConfig()
    assert (cfg.T, cfg.bits_w, cfg.bits_a, cfg.rank) == (100, 4, 4, 4)


def test_parse_types_and_comments():
    values = parse_config("# run\nT = 50\nsteps=20  # fewer\ntalsq = false\nlr = 1e-3\ndataset = 'a b.csv'\n")
    assert values == {"T": 50, "steps": 20, "talsq": False, "lr": 1e-3, "dataset": "a b.csv"}


@pytest.mark.parametrize("text", ["colour = red", "T = ten", "T 50", "T = 5\nT = 6", "talsq = maybe"])
def test_parse_rejects(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


@pytest.mark.parametrize("changes", [{"bits_w": 3}, {"bits_a": 16}, {"steps": 101},
                                     {"beta_start": 0.2, "beta_end": 0.1}, {"lr": 0.0}, {"rank": -1}])
def test_validation(changes):
    with pytest.raises(ConfigurationError):
        RunConfig(**changes)


def test_overrides_win(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("bits_w = 8\nrank = 2\n")
    cfg = load_config(path, bits_w=4, rank=None)
    assert cfg.bits_w == 4 and cfg.rank == 2


def test_unknown_override_and_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(None, colour="red")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "nope.cfg")


def test_text_round_trip(tmp_path):
    cfg = RunConfig(seed=3, talsq=False, dataset="d.csv")
    path = tmp_path / "dump.cfg"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg


def test_bench_lists():
    cfg = RunConfig(bench_shapes="2x3x4, 5x6x7", bench_bits="4,8")
    assert cfg.shapes() == [(2, 3, 4), (5, 6, 7)] and cfg.bits_list() == [4, 8]
    with pytest.raises(ConfigurationError):
        RunConfig(bench_bits="6")
    with pytest.raises(ConfigurationError):
        RunConfig(bench_shapes="2x3")
