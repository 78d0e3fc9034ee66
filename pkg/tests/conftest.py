# File: tests/conftest.py

"""Pytest-wide configuration hooks and shared fixtures."""

import pytest

from tests.helpers.components import default_config_text


def pytest_configure(config):
    """Register the markers used to split quick tests from long acceptance runs."""
    config.addinivalue_line("markers", "slow: mark test as slow-running")
    config.addinivalue_line("markers", "integration: mark test as integration test")


@pytest.fixture
def config_file(tmp_path):
    """A small TOML experiment configuration in a temporary directory."""
    path = tmp_path / "experiment.toml"
    path.write_text(default_config_text(tmp_path / "results"), encoding="utf-8")
    return path
