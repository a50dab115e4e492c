from .combat import CombatEnv, RewardParams, SCENARIOS, get_scenario, load_scenarios
from .guess import GuessEnv

__all__ = ["CombatEnv", "GuessEnv", "RewardParams", "SCENARIOS", "get_scenario", "load_scenarios"]
