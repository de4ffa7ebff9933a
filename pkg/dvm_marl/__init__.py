"""Distillation with Value Matching for homogeneous multiagent RL.

Centralized-critic MADDPG (discrete) and multiagent soft actor-critic
(continuous) on 2-D particle domains, plus the distillation and value-matching
step that merges homogeneous agents' knowledge between training phases.
"""

__version__ = "0.1.0"
