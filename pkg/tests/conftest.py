import pytest

from landmarking.sim import SimConfig, simulate

JOINT = SimConfig(n_subjects=200, baseline_hazard=2.0, beta=-0.04, censoring_rate=0.05, max_time=12.0, seed=3)


@pytest.fixture(scope="session")
def joint_subjects():
    return simulate(JOINT)
