import numpy as np
import pytest

from hierfit.simulate import TruthSpec, simulate


@pytest.fixture(scope="session")
def small_table():
    """192-row balanced nested table with known Gaussian truth."""
    spec = TruthSpec(
        n_blocks=2,
        n_plants=2,
        time_points=(30.0, 60.0, 90.0),
        formula="height ~ block + time + tension",
        beta={
            "(Intercept)": [20.0],
            "block": [1.0],
            "time": [0.5],
            "tension": [2.0, 1.0, -1.0],
        },
        sigma2_plot=2.0,
        sigma2_subplot=1.0,
        sigma2_plant=0.5,
        sigma2=1.0,
        seed=5,
    )
    return simulate(spec)


@pytest.fixture(scope="session")
def default_table():
    """Full 1280-row default layout with the complete fixed structure."""
    spec = TruthSpec(
        beta={
            "(Intercept)": [12.0],
            "time": [60.0],
            "I(time^2)": [-8.0],
            "I(time^3)": [1.5],
            "tension": [2.0, 1.0, -1.0],
            "silicate": [0.5, 1.0, 1.5],
        },
        sigma2_plot=25.0,
        sigma2_subplot=16.0,
        sigma2_plant=9.0,
        sigma2=4.0,
        delta=1.0,
        seed=202,
    )
    return simulate(spec)


def columns_from_table(table):
    """Raw string/float columns reproducing a LongTable."""
    cols = {name: f.labels() for name, f in table.factors.items()}
    cols["time"] = list(table.time)
    cols["height"] = list(table.height)
    return cols


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
