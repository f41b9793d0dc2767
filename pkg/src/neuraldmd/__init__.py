"""Neural dynamic mode decomposition with a hand-written differentiable linear-algebra tape."""

__version__ = "0.1.0"
