# tests/test_cli.py
import pandas as pd
import pytest

from app.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from app.services.assets import ieee33_base_loads
from app.services.grid import ieee33_network


@pytest.fixture
def run_config(tmp_path):
    path = tmp_path / "run.env"
    path.write_text(
        f"OUT_DIR={tmp_path / 'runs'}\n"
        "EPISODES=1\n"
        "ENV_SYNTH_DAYS=2\n"
        "ENV_TRAIN_DAYS=1\n"
        "ENV_EPISODE_LENGTH=2\n"
        "SAC_HIDDEN_SIZE=16\n"
        "SAC_BATCH_SIZE=2\n"
        "SAC_WARMUP_STEPS=0\n"
        "GUARD_HIDDEN_SIZES=16\n"
    )
    return str(path)


def test_synth_writes_dataset(tmp_path, run_config):
    target = tmp_path / "series.csv"
    assert main(["--config", run_config, "synth", str(target)]) == EXIT_OK
    frame = pd.read_csv(target)
    assert len(frame) == 48
    assert frame["split"].tolist().count("train") == 24


def test_synth_ignores_configured_dataset(tmp_path, run_config):
    existing = tmp_path / "existing.csv"
    assert main(["--config", run_config, "synth", str(existing)]) == EXIT_OK

    config = tmp_path / "with_data.env"
    config.write_text(f"ENV_DATA_PATH={existing}\nENV_SYNTH_DAYS=3\nENV_TRAIN_DAYS=2\n")
    target = tmp_path / "fresh.csv"
    assert main(["--config", str(config), "synth", str(target)]) == EXIT_OK
    frame = pd.read_csv(target)
    assert len(frame) == 72
    assert frame["split"].tolist().count("train") == 48


def test_powerflow_command(run_config, capsys):
    assert main(["--config", run_config, "powerflow", "--hour", "3"]) == EXIT_OK
    output = capsys.readouterr().out
    assert "converged=True" in output
    assert output.count("|V| =") == 33


def test_powerflow_from_state_file(tmp_path, run_config, capsys):
    network = ieee33_network()
    load_p, load_q = ieee33_base_loads(network)
    state = tmp_path / "state.csv"
    pd.DataFrame({"bus": range(1, 34), "p_kw": load_p, "q_kvar": load_q}).to_csv(state, index=False)

    assert main(["--config", run_config, "powerflow", str(state)]) == EXIT_OK
    output = capsys.readouterr().out
    assert "converged=True" in output
    assert output.count("|V| =") == 33
    assert "violation:" in output


def test_bad_state_file_is_a_data_error(tmp_path, run_config):
    state = tmp_path / "state.csv"
    state.write_text("bus,p_kw,q_kvar\n40,100,60\n")
    assert main(["--config", run_config, "powerflow", str(state)]) == EXIT_DATA


def test_wrong_ess_count_is_a_config_error(run_config):
    assert main(["--config", run_config, "powerflow", "--ess-kw", "10,20"]) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "nope.env"), "synth", str(tmp_path / "x.csv")]) == EXIT_CONFIG


def test_train_then_plain_baseline(tmp_path, run_config):
    assert main(["--config", run_config, "train", "--screening", "none"]) == EXIT_OK
    assert (tmp_path / "runs" / "none" / "agent.npz").exists()

    assert main(["--config", run_config, "baseline", "sac_plain"]) == EXIT_OK
    assert (tmp_path / "runs" / "evaluation" / "sac_plain_report.json").exists()

    assert main(["--config", run_config, "baseline", "acpf_sac"]) == EXIT_CONFIG
