"""
SIP Overload Simulator Backend
"""

from .config import ScenarioConfig, load_scenario, parse_scenario
from .fluid import run_fluid
from .network import SipNetwork, compare, run_scenario

__all__ = ["ScenarioConfig", "load_scenario", "parse_scenario", "SipNetwork", "run_scenario", "compare", "run_fluid"]
