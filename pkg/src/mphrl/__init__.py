"""Model-primitive hierarchical lifelong RL on desk-scale surrogate tasks."""

__version__ = "0.1.0"
