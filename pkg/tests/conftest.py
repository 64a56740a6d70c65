import numpy as np
import pytest

from agc_fdia.datagen import generate_dataset, read_dataset
from agc_fdia.plant import DisturbanceSpec, ScenarioConfig, default_system

# acceptance outcomes, printed once at the end of the run
ACCEPTANCE: dict = {}


def quiet_scenario(magnitude=0.0, area=1, start=0.0, ki=None, nonlinear=False, window=60.0, **kw):
    plant_kw = {k: kw.pop(k) for k in ("ace_delay", "deadband_width", "grc_limit", "tie_sync_T12") if k in kw}
    system = default_system(nonlinear_mode=nonlinear, **plant_kw)
    if ki is not None:
        system = system.with_agc_gain(ki)
    return ScenarioConfig(
        system=system,
        disturbance=DisturbanceSpec(area, magnitude, start),
        process_noise_std=kw.pop("process_noise_std", 0.0),
        measurement_noise_std=kw.pop("measurement_noise_std", 0.0),
        window=window,
        **kw,
    )


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """600 samples: enough for the 200-per-class holdout plus a small train/test split."""
    path = tmp_path_factory.mktemp("data") / "small.jsonl"
    generate_dataset(path, n=600, master_seed=11)
    return path


@pytest.fixture(scope="session")
def small_samples(small_dataset):
    return read_dataset(small_dataset)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}")
