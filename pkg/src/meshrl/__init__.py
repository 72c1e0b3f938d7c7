"""Learned adaptive mesh refinement for 2D finite-element problems.

Mesh elements act as a swarm of agents that decide, step by step, whether to
split; a message-passing network policy trained with PPO against
reference-solution errors produces meshes at a resolution selected by an
element penalty at inference time. Classical error-estimator heuristics and
uniform refinement are included for Pareto-front comparison.
"""

__version__ = "0.1.0"
