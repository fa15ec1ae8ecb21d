"""Target assignment and path finding with a shared-actor MADDPG learner."""

__version__ = "0.1.0"
