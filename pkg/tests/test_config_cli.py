import json

import numpy as np
import pytest

from mvmilstein.cli import main, run
from mvmilstein.config import ConfigError, config_from_mapping, parse_config, require_for

MINIMAL = """
schema_version = 1
model = "gbm"
T = 1
n = 16
N = 1
M = 10
seed = 7

[model_params]
a = 0.5
nu = 0.3
"""


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_config_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.model == "gbm" and cfg.T == 1.0 and cfg.n == 16 and cfg.seed == 7
    assert cfg.scheme == "milstein" and cfg.mode == "auto" and cfg.K == "auto"
    assert cfg.q == 2.0 and cfg.h_ref is None and cfg.model_params == {"a": 0.5, "nu": 0.3}


def test_h_ref_not_dividing_names_both_fields():
    with pytest.raises(ConfigError) as exc:
        parse_config(MINIMAL.replace("seed = 7", "seed = 7\nh_levels = [0.25]\nh_ref = 0.1"))
    msg = str(exc.value)
    assert "h_ref" in msg and "h_levels[0]" in msg


def test_commutative_with_common_noise_rejected():
    text = """
schema_version = 1
model = "mvou"
mode = "commutative"
[model_params]
kappa = 1.0
sigma = 0.5
sigma0 = 0.2
"""
    with pytest.raises(ConfigError, match="m0=1"):
        parse_config(text)
    assert parse_config(text.replace("sigma0 = 0.2", "sigma0 = 0.0")).mode == "commutative"


def test_all_violations_reported():
    text = MINIMAL.replace("seed = 7", "seed = 7\nspeed = 3\nK = 0\nq = 1.0\nh_levels = [0.3]")
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    v = exc.value.violations
    assert any(s.startswith("speed: unknown key") for s in v)
    assert any(s.startswith("K:") for s in v)
    text = MINIMAL.replace("seed = 7", "seed = 7\nspeed = 3\nq = 1.0\nh_levels = [0.3]")
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    paths = [s.split(":")[0] for s in exc.value.violations]
    assert paths == ["speed", "h_levels[0]", "q"]


@pytest.mark.parametrize("bad,field", [
    ("schema_version = 2", "schema_version"),
    ('scheme = "rk4"', "scheme"),
    ("N = 1.5", "N"),
    ("use_closed_form = 1", "use_closed_form"),
    ("slope_window = [1.2, 0.8]", "slope_window"),
    ("N_levels = [8, 32]\nN_ref = 100", "N_ref"),
    ("T = -1", "T"),
])
def test_field_errors(bad, field):
    key = bad.split(" =")[0]
    text = "\n".join(l for l in MINIMAL.splitlines() if not l.startswith(key + " ="))
    text = text.replace("[model_params]", bad + "\n\n[model_params]")
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert any(v.startswith(field) for v in exc.value.violations)


def test_model_param_errors_and_bad_toml():
    with pytest.raises(ConfigError, match="model_params"):
        parse_config(MINIMAL.replace("nu = 0.3", ""))
    with pytest.raises(ConfigError, match="not valid TOML"):
        parse_config("model = ")


def test_manifest_round_trip(tmp_path):
    cfg = parse_config(MINIMAL.replace("seed = 7", "seed = 7\nh_levels = [0.25, 0.125]\n"
                                       "h_ref = 0.0625\nslope_window = [0.8, 1.2]\nK = 4"))
    assert config_from_mapping(cfg.to_mapping()) == cfg
    assert parse_config(cfg.to_toml()) == cfg
    cfg = config_from_mapping({**cfg.to_mapping(), "out": str(tmp_path)})
    assert run("simulate", cfg, tmp_path) == 0
    man = json.loads((tmp_path / "simulate_manifest.json").read_text())
    again = config_from_mapping(man["config"])
    assert again == cfg and again.to_mapping() == man["config"]


def test_require_for():
    cfg = parse_config(MINIMAL)
    require_for(cfg, "simulate")
    with pytest.raises(ConfigError, match="h_levels"):
        require_for(cfg, "convergence")
    with pytest.raises(ConfigError, match="N_levels"):
        require_for(cfg, "poc")


def read_csv(path):
    lines = path.read_text().splitlines()
    return lines[0].split(","), np.array([[float(v) for v in l.split(",")] for l in lines[1:]])


def test_cli_simulate_zero_model(tmp_path, capsys):
    cfg = write(tmp_path, MINIMAL.replace("a = 0.5", "a = 0.0").replace("nu = 0.3", "nu = 0.0")
                .replace("N = 1", "N = 3\nx0_std = 1.0"))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    header, rows = read_csv(tmp_path / "o" / "trajectory.csv")
    assert header == ["t", "i", "x_1"]
    assert rows.shape == (17 * 3, 3)
    for i in range(3):
        x = rows[rows[:, 1] == i, 2]
        assert np.all(x == x[0])
    assert "simulate" in capsys.readouterr().out


def test_cli_determinism_and_seed_override(tmp_path):
    text = MINIMAL.replace("seed = 7", "seed = 7\nh_levels = [0.25, 0.125, 0.0625]")
    cfg = write(tmp_path, text)
    outs = []
    for name, extra in (("a", []), ("b", ["--workers", "3"]), ("c", ["--seed", "8"])):
        assert main(["convergence", "--config", str(cfg), "--out", str(tmp_path / name)] + extra) == 0
        outs.append((tmp_path / name / "convergence.csv").read_bytes())
    assert outs[0] == outs[1] != outs[2]
    man = json.loads((tmp_path / "c" / "convergence_manifest.json").read_text())
    assert man["config"]["seed"] == 8
    assert (tmp_path / "a" / "convergence_config.toml").exists()


def test_cli_check_failure_record(tmp_path, capsys):
    text = MINIMAL.replace("seed = 7", "seed = 7\nh_levels = [0.25, 0.125, 0.0625]\n"
                           "slope_window = [5.0, 6.0]")
    cfg = write(tmp_path, text)
    out = tmp_path / "o"
    assert main(["convergence", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["convergence", "--config", str(cfg), "--out", str(out), "--check"]) == 1
    record = json.loads((out / "convergence_failure.json").read_text())
    assert record["window"] == [5.0, 6.0] and record["criterion"] == "slope in [5.0, 6.0]"
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1]) == record


def test_cli_config_errors(tmp_path, capsys):
    cfg = write(tmp_path, MINIMAL + "[extra]\nbogus = 1\n")
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert "extra: unknown key" in capsys.readouterr().err
    assert main(["simulate", "--config", str(tmp_path / "missing.toml")]) == 3
    assert main(["convergence", "--config", str(write(tmp_path, MINIMAL, "ok.toml"))]) == 2
    assert main(["simulate", "--config", str(tmp_path / "ok.toml"), "--workers", "0"]) == 2
