"""
Catalog - controller descriptions and bundled scenario documents from data/
"""

import json
import os
from typing import Dict, List

from .config import ScenarioConfig, load_scenario
from .controllers import CONTROLLERS
from .errors import ConfigError


class ControllerCatalog:
    def __init__(self, data_dir: str = None):
        """Read the controller catalogue; a missing file leaves descriptions empty"""
        self.data_dir = data_dir or os.path.join(os.path.dirname(__file__), "..", "data")
        self.descriptions = self._load_json("controllers.json")

    def _load_json(self, filename: str) -> dict:
        path = os.path.join(self.data_dir, filename)
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        return {}

    def list_controllers(self) -> List[Dict]:
        """Every registered controller with its description and default parameters"""
        entries = []
        for name, cls in CONTROLLERS.items():
            info = self.descriptions.get(name, {})
            entries.append(
                {
                    "name": name,
                    "family": info.get("family", "unknown"),
                    "consulted": info.get("consulted", []),
                    "description": info.get("description", ""),
                    "defaults": cls.params_model().model_dump(),
                }
            )
        return entries

    @property
    def scenario_dir(self) -> str:
        return os.path.join(self.data_dir, "scenarios")

    def list_scenarios(self) -> List[str]:
        if not os.path.isdir(self.scenario_dir):
            return []
        return sorted(name[: -len(".conf")] for name in os.listdir(self.scenario_dir) if name.endswith(".conf"))

    def load_scenario(self, name: str) -> ScenarioConfig:
        if name not in self.list_scenarios():
            raise ConfigError("scenario", f"no bundled scenario named {name!r}")
        return load_scenario(os.path.join(self.scenario_dir, f"{name}.conf"))
