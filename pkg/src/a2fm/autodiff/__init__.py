"""Minimal reverse-mode differentiation for the toy video models."""
from .graph import (
    OPS,
    Graph,
    GraphError,
    Node,
    NonFiniteError,
    ShapeError,
    backward,
    eval_forward,
    finite_diff,
    max_relative_error,
)

__all__ = [
    "OPS",
    "Graph",
    "GraphError",
    "Node",
    "NonFiniteError",
    "ShapeError",
    "backward",
    "eval_forward",
    "finite_diff",
    "max_relative_error",
]
