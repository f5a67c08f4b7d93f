"""Highway driving with gap options: simulator, trajectory planner, offline Q-learning."""

__version__ = "0.1.0"
