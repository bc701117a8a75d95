import logging

import numpy as np
import pytest

from gxe.data import EnvironmentTable, GenotypeTable, build_env_vectors
from gxe.simgen import SimConfig, simulate

logging.getLogger("gxe").setLevel(logging.ERROR)


@pytest.fixture(scope="session")
def desk_sim():
    """Default desk simulation (seed 0) and its ground truth."""
    return simulate(SimConfig(seed=0))


@pytest.fixture(scope="session")
def small_sim():
    """A small simulation with a test year of new genotypes and environments."""
    return simulate(SimConfig(seed=1, n_g=30, n_e=10, d_g=60, n_g_test=10, n_e_test=3))


def env_table(n_e: int, seed: int = 0, n_w: int = 11, n_s: int = 20, n_m: int = 2) -> EnvironmentTable:
    rng = np.random.default_rng(seed)
    return EnvironmentTable(
        [f"E{j}" for j in range(n_e)],
        rng.normal(size=(n_e, 140, n_w)),
        rng.normal(size=(n_e, n_s)),
        rng.integers(0, 3, size=(n_e, n_m)).astype(float),
        rng.uniform(-10, 10, size=(n_e, 2)),
    )


def genotype_table(n_g: int, d_g: int, seed: int = 0) -> GenotypeTable:
    rng = np.random.default_rng(seed)
    return GenotypeTable([f"G{i}" for i in range(n_g)], rng.integers(-1, 2, size=(n_g, d_g)))


def with_vectors(d):
    from dataclasses import replace

    env, _ = build_env_vectors(d.environments)
    return replace(d, environments=env)
