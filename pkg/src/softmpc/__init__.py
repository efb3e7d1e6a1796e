"""Priority-driven soft-constrained MPC toolkit for autonomous driving."""

__version__ = "0.1.0"
