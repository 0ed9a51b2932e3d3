"""Graph-conditioned reinforcement learning for analog/RF circuit sizing.

Modules: ``netlist`` (parsing and circuit graphs), ``env`` (evaluators,
rewards, environment), ``tensor`` (reverse-mode autodiff), ``policy``
(GCN/GAT actor-critic), ``ppo`` (training and deployment), ``baselines``
(GA and random search) and ``cli``.
"""

__version__ = "0.1.0"
