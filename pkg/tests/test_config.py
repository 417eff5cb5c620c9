import pytest

from gpusched.config import ConfigError, RunConfig, load, read_file


def test_defaults_documented_and_valid():
    cfg = load()
    assert cfg == RunConfig()
    assert cfg.cluster_spec().total_gpus == 64
    assert cfg.hyper().pi_lr == 1e-4


def test_precedence_flags_over_file(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[train]\nepochs = 3\nseed = 5\n[ppo]\npi_lr = 0.001\n")
    cfg = load(p, {"epochs": 7, "seed": None})
    assert cfg.epochs == 7 and cfg.seed == 5 and cfg.pi_lr == 1e-3


def test_snapshot_round_trip(tmp_path):
    cfg = load(None, {"nodes": "2 x P100:4:16:128:VC1", "naive": True, "estimate_noise": "0.5,2",
                      "pi_lr": 3e-4, "gpu_type_mix": "P100:3,V100:1"})
    p = tmp_path / "snap.ini"
    p.write_text(cfg.to_ini())
    assert load(p) == cfg
    assert cfg.gen_config().gpu_type_mix == {"P100": 0.75, "V100": 0.25}


def test_helios_nodes_keyword():
    assert load(None, {"nodes": "helios"}).cluster_spec().total_gpus == 432


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n", "[train]\nepochs = many\n", "[train]\nnot_a_key = 1\n",
    "[trace]\nformat = sacct\n", "no section header\n", "[train]\nepochs = 0\n",
])
def test_bad_files_rejected(tmp_path, text):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load(p)


def test_missing_file():
    with pytest.raises(ConfigError):
        read_file("/nonexistent/run.ini")
