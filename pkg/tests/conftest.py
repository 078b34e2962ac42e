from typing import Dict

import pytest

from backend.config import ScenarioConfig, parse_scenario


def scenario_text(**keys) -> str:
    """Scenario document from keyword keys, ``server__p2__mu=400`` -> ``server.p2.mu = 400``"""
    entries: Dict[str, object] = {"topology.proxies": 1, "run.duration": 10, "run.seed": 1}
    for key, value in keys.items():
        entries[key.replace("__", ".")] = value
    lines = []
    for key, value in entries.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def make_scenario(**keys) -> ScenarioConfig:
    return parse_scenario(scenario_text(**keys))


@pytest.fixture
def scenario():
    return make_scenario


@pytest.fixture
def out_dir(tmp_path):
    return str(tmp_path / "out")
