"""Shared fixtures: every test gets its own ledger, output directory and worker count."""

import pytest
from hypothesis import HealthCheck, settings

import database
from config import config

# the run-state fixture below is shared by every generated example
settings.register_profile(
    "bounds",
    suppress_health_check=[HealthCheck.function_scoped_fixture, HealthCheck.too_slow],
)
settings.load_profile("bounds")


@pytest.fixture(autouse=True)
def isolated_run_state(tmp_path, monkeypatch):
    monkeypatch.setattr(database, "_db", database.Database(tmp_path / "runs.db"))
    monkeypatch.setattr(config, "out_dir", str(tmp_path / "out"))
    monkeypatch.setattr(config, "threads", 1)
    yield
