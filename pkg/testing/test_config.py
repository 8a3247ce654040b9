import pytest

import config
from conftest import REPO_ROOT
from lapdae.errors import ConfigError, UsageError
from lapdae.pyramid import RANDOM_LEVEL


@pytest.fixture(autouse=True)
def no_data_dir_env(monkeypatch):
    monkeypatch.delenv(config.DATA_DIR_ENV, raising=False)


def test_defaults_resolve_per_dataset():
    mnist = config.load_run_config()
    assert (mnist.epochs, mnist.flip, mnist.in_channels) == (30, False, 1)
    cifar = config.load_run_config(overrides={"dataset": "cifar10"})
    assert (cifar.epochs, cifar.flip, cifar.in_channels) == (50, True, 3)
    assert mnist.arch().bottleneck_shape(28, 28) == (64, 7, 7)


def test_shipped_configurations_load():
    mnist = config.load_run_config(REPO_ROOT / "configuration.ini")
    assert mnist.dataset == "mnist" and mnist.base_lr == pytest.approx(1e-4)
    cifar = config.load_run_config(REPO_ROOT / "configuration_cifar10.ini")
    assert cifar.dataset == "cifar10" and cifar.flip is True
    assert cifar.layers == ("conv1", "conv2", "conv3", "conv4", "bottleneck")


def test_precedence_base_then_file_then_overrides(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[train]\nseed = 7\nbatch_size = 32\n")
    cfg = config.load_run_config(path, overrides={"batch_size": 16, "epochs": None},
                                 base={"seed": 1, "epochs": 3, "encoder_channels": [8, 8, 16, 16]})
    assert cfg.seed == 7
    assert cfg.batch_size == 16
    assert cfg.epochs == 3
    assert cfg.encoder_channels == (8, 8, 16, 16)


def test_data_dir_falls_back_to_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(config.DATA_DIR_ENV, str(tmp_path))
    assert config.load_run_config().data_dir == str(tmp_path)
    assert config.load_run_config(overrides={"data_dir": "elsewhere"}).data_dir == "elsewhere"


@pytest.mark.parametrize("text,match", [
    ("[training]\nseed = 1\n", "unknown section"),
    ("[train]\nlearning_rate = 1\n", "unknown key 'learning_rate'"),
    ("[train]\nepochs = many\n", "epochs"),
    ("[eval]\nlayers = conv9\n", "layers"),
    ("[train]\nmode = vae\n", "vae"),
    ("[model]\nencoder_strides = 1,2,1\n", "same length"),
    ("[run]\nlog_level = loud\n", "LOUD"),
])
def test_bad_files_raise_config_error(tmp_path, text, match):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ConfigError, match=match) as info:
        config.load_run_config(path)
    assert info.value.exit_code == 3


def test_missing_file_and_unknown_override(tmp_path):
    with pytest.raises(ConfigError):
        config.load_run_config(tmp_path / "absent.ini")
    with pytest.raises(ConfigError):
        config.load_run_config(overrides={"lr": 0.1})


def test_value_parsers():
    assert config.parse_int_list("1, 2,3") == (1, 2, 3)
    assert config.parse_optional_int("all") is None
    assert config.parse_optional_int("12") == 12
    assert config.parse_level("random") == RANDOM_LEVEL
    assert config.parse_level("3") == 3
    assert config.parse_optional_floats("1,0.5") == (1.0, 0.5)
    assert config.parse_log_level("debug") == "DEBUG"
    assert config.parse_log_level("none") is None
    with pytest.raises(ValueError):
        config.parse_bool("maybe")


def test_parse_layers():
    assert config.parse_layers("conv2..conv4") == ("conv2", "conv3", "conv4")
    assert config.parse_layers("pixels, bottleneck, pixels") == ("pixels", "bottleneck")
    with pytest.raises(UsageError):
        config.parse_layers("conv4..conv1")
    with pytest.raises(UsageError):
        config.parse_layers("")


def test_fingerprint_ignores_locations_and_throughput():
    a = config.load_run_config(overrides={"data_dir": "/a", "workers": 1, "runs_dir": "x"})
    b = config.load_run_config(overrides={"data_dir": "/b", "workers": 8, "runs_dir": "y"})
    assert a.fingerprint() == b.fingerprint()
    assert len(a.fingerprint()) == 12
    assert config.load_run_config(overrides={"seed": 1}).fingerprint() != a.fingerprint()


def test_corruption_set_copies():
    cfg = config.load_run_config(overrides={"copies": 3, "sigma": 10.0, "level": 2})
    specs = cfg.corruption_set()
    assert len(specs) == 3
    assert all(s.sigma == 10.0 and s.level == 2 for s in specs)
    assert cfg.train_config().corruptions == specs


def test_write_config_round_trip(tmp_path):
    cfg = config.load_run_config(overrides={"dataset": "cifar10", "subset": 500, "level_sigma_scale": (1.0, 2.0),
                                            "layers": ("conv1", "pixels")})
    path = config.write_config(cfg, tmp_path / "config.ini")
    assert path.read_text().splitlines()[0] == f"# fingerprint = {cfg.fingerprint()}"
    restored = config.load_run_config(path)
    assert restored == cfg


def test_log_level_from_file_and_override(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[run]\nlog_level = debug\n")
    assert config.load_run_config(path).log_level == "DEBUG"
    assert config.load_run_config(path, {"log_level": "WARNING"}).log_level == "WARNING"
    assert config.load_run_config().log_level is None
    assert config.load_run_config(path).fingerprint() == config.load_run_config().fingerprint()
