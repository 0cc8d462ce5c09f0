# tests/conftest.py
import numpy as np
import pandas as pd
import pytest

from app.services import connection
from app.services.assets import DeviceSet, EssUnit, ieee33_base_loads, table_one_devices
from app.services.config import EnvConfig, RunConfig, SacConfig, GuardConfig
from app.services.env import build_profiles, synth_dataset
from app.services.grid import Branch, NetworkModel, ieee33_network


@pytest.fixture(autouse=True)
def registry_db(tmp_path):
    """Every test gets its own SQLite run registry"""
    engine = connection.configure_engine(f"sqlite:///{tmp_path / 'registry.db'}")
    yield engine
    engine.dispose()
    connection.engine = None


@pytest.fixture
def two_bus():
    return NetworkModel(bus_count=2, slack_bus=0, branches=(Branch(0, 1, 0.05, 0.05),))


@pytest.fixture
def small_feeder():
    """Five-bus radial feeder: 1-2-3-4 with a lateral 2-5"""
    branches = (
        Branch(0, 1, 0.02, 0.01),
        Branch(1, 2, 0.03, 0.02),
        Branch(2, 3, 0.04, 0.02),
        Branch(1, 4, 0.03, 0.015),
    )
    return NetworkModel(bus_count=5, slack_bus=0, branches=branches)


@pytest.fixture
def feeder_devices():
    ess = (EssUnit(name="ESS1", bus=3, p_max=200.0, e_capacity=800.0),)
    return DeviceSet(ess=ess)


def flat_profiles(network, devices, hours=48, load_kw=150.0, price=0.1, train_days=1, price_node=None):
    """Constant-load profiles for small feeders (every non-slack bus carries load_kw)"""
    base_p = np.full(network.bus_count, load_kw)
    base_p[network.slack_bus] = 0.0
    base_q = 0.5 * base_p
    timestamps = pd.date_range("2019-09-21", periods=hours, freq="h")
    split = np.array(["train"] * (train_days * 24) + ["test"] * (hours - train_days * 24), dtype=object)
    return build_profiles(
        timestamps=timestamps,
        load_factor=np.ones(hours),
        pv_factor=np.zeros(hours),
        wt_factor=np.zeros(hours),
        price=np.full(hours, price),
        devices=devices,
        base_load_p=base_p,
        base_load_q=base_q,
        split=split,
        price_node=None if price_node is None else np.full(hours, price_node),
    )


@pytest.fixture
def make_profiles():
    return flat_profiles


@pytest.fixture
def feeder_profiles(small_feeder, feeder_devices):
    return flat_profiles(small_feeder, feeder_devices)


@pytest.fixture(scope="session")
def ieee33():
    return ieee33_network()


@pytest.fixture(scope="session")
def devices():
    return table_one_devices()


@pytest.fixture(scope="session")
def base_loads(ieee33):
    return ieee33_base_loads(ieee33)


@pytest.fixture(scope="session")
def profiles(devices, base_loads):
    return synth_dataset(seed=7, days=3, devices=devices, base_loads=base_loads, train_days=2)


@pytest.fixture
def env_config():
    return EnvConfig(synth_days=3, train_days=2, episode_length=24)


@pytest.fixture
def smoke_config(tmp_path):
    """Tiny run: short episodes, small networks, no warmup"""
    return RunConfig(
        run_name="smoke",
        seed=3,
        episodes=1,
        out_dir=str(tmp_path / "runs"),
        env=EnvConfig(synth_days=2, train_days=1, episode_length=2),
        sac=SacConfig(hidden_size=16, batch_size=2, buffer_size=64, warmup_steps=0),
        guard=GuardConfig(hidden_sizes=[16], loss_window=5, batch_size=4, reservoir_size=64),
    )
