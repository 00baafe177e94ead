"""Shared fixtures for zdmix tests."""

import os

import pytest
import yaml
from click.testing import CliRunner

from zdmix import core


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def global_zdmix_dir(tmp_path, monkeypatch):
    """Override the global ~/.zdmix directory to a temp location."""
    fake_global = tmp_path / "fake_home" / ".zdmix"
    fake_global.mkdir(parents=True)
    monkeypatch.setattr(core, "GLOBAL_DIR", fake_global)
    monkeypatch.setattr(core, "GLOBAL_CONFIG", fake_global / "config.yaml")
    return fake_global


@pytest.fixture
def tmp_project(tmp_path, global_zdmix_dir, monkeypatch):
    """Run inside an empty project directory with no WORKERS override."""
    project = tmp_path / "project"
    project.mkdir()
    monkeypatch.chdir(project)
    monkeypatch.delenv("WORKERS", raising=False)
    return project


def write_config(directory, data, name="zdmix.yaml"):
    """Factory: dump a config mapping as YAML and return its path."""
    path = directory / name
    path.write_text(yaml.safe_dump(data, sort_keys=False))
    return path


def small_budget(**overrides):
    """Config fragment with a budget small enough for unit tests."""
    budget = {"trajectories": 4096, "batches": 32}
    budget.update(overrides)
    return {"budget": budget, "seed": int(os.environ.get("ZDMIX_TEST_SEED", "7"))}


# ── Markov models ────────────────────────────────────────────────────────


@pytest.fixture(scope="session")
def w5():
    from zdmix.zd_spectral import preset_model

    return preset_model("w5")


@pytest.fixture(scope="session")
def two_state():
    from zdmix.zd_spectral import preset_model

    return preset_model("two-state")


@pytest.fixture(scope="session")
def lazy_walk():
    from zdmix.zd_spectral import preset_model

    return preset_model("lazy-walk")


@pytest.fixture(scope="session")
def asymmetric():
    from zdmix.zd_spectral import preset_model

    return preset_model("asymmetric")


@pytest.fixture(scope="session")
def iid_line():
    from zdmix.zd_spectral import preset_model

    return preset_model("iid-line")


# ── Billiard tables ──────────────────────────────────────────────────────


@pytest.fixture(scope="session")
def finite_table():
    from zdmix.billiard import build_table

    return build_table({"preset": "finite"})


@pytest.fixture(scope="session")
def infinite_table():
    from zdmix.billiard import build_table

    return build_table({"preset": "infinite"})
