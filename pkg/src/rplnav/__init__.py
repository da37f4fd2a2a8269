"""Role-playing reinforcement learning for companion-aware robot navigation."""

__version__ = "0.1.0"
