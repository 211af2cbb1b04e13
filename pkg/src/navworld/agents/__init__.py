"""Navigation agents: scripted baselines, the rule-list learner and its experience memory."""

from .failures import CATEGORIES, FailureConfig, FailureMode, extract_failures
from .features import FEATURES, FeatureTracker
from .memory import MemoryBundle, MemoryStore, env_tags
from .policies import (ExternalPolicy, GreedyPolicy, NullPolicy, OracleBudgetError, OraclePolicy, RuleAgent,
                       greedy_policy, oracle_actions, policy_extensions)
from .rules import Atom, Rule, RuleError, RuleList, expand_directive, rule_policy_act, update_rules
from .synthesizer import TemplateConfig, clutter_tier, distance_band, situation, template_synthesizer

__all__ = [
    "CATEGORIES", "FailureConfig", "FailureMode", "extract_failures", "FEATURES", "FeatureTracker",
    "MemoryBundle", "MemoryStore", "env_tags", "ExternalPolicy", "GreedyPolicy", "NullPolicy",
    "OracleBudgetError", "OraclePolicy", "RuleAgent", "greedy_policy", "oracle_actions", "policy_extensions",
    "Atom", "Rule", "RuleError", "RuleList", "expand_directive", "rule_policy_act", "update_rules",
    "TemplateConfig", "clutter_tier", "distance_band", "situation", "template_synthesizer",
]
