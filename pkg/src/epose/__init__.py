"""Maximum-entropy off-policy reinforcement learning for constructive routing."""

from .routing import Kind, ProblemInstance, Solution, generate_instance, tour_length, validate_solution

__all__ = ["Kind", "ProblemInstance", "Solution", "generate_instance", "tour_length", "validate_solution"]
__version__ = "0.1.0"
