"""Benchmark framework for insulin-dosing treatment policies.

Volatility-stratified glucose-insulin simulator, risk-index reward, small
RL agents (DQN/PPO) with clinical-prior injection, an LLM policy adapter,
and a bootstrap evaluation protocol.
"""

__version__ = "0.1.0"
