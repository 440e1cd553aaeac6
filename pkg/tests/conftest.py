import numpy as np
import pandas as pd
import pytest

from hetbench.dgp import DgpConfig, generate_dataset


@pytest.fixture(scope="session")
def cfg():
    return DgpConfig()


@pytest.fixture(scope="session")
def default_gen(cfg):
    return generate_dataset(cfg)


def toy_frame(n=40, seed=0, n_schools=4):
    """Small valid dataset frame with random covariates."""
    rng = np.random.default_rng(seed)
    school = rng.integers(1, n_schools + 1, n)
    school[:n_schools] = np.arange(1, n_schools + 1)
    xs = rng.normal(size=(n_schools, 5))
    frame = pd.DataFrame({
        "student_id": np.arange(1, n + 1),
        "school_id": school,
        "z": rng.integers(0, 2, n),
        "y": rng.normal(size=n),
        "s3": rng.integers(1, 8, n),
        "c1": rng.integers(1, 16, n),
        "c2": rng.integers(0, 2, n),
        "c3": rng.integers(0, 2, n),
        "xc": rng.integers(0, 5, n_schools)[school - 1],
        "x1": xs[school - 1, 0],
        "x2": xs[school - 1, 1],
        "x3": 1 / (1 + np.exp(-xs[school - 1, 2])),
        "x4": 1 / (1 + np.exp(-xs[school - 1, 3])),
        "x5": np.exp(xs[school - 1, 4]),
    })
    frame.loc[0, "z"], frame.loc[1, "z"] = 0, 1
    return frame
