"""Route-choice reward recovery with maximum entropy deep inverse reinforcement learning."""

__version__ = "0.1.0"
