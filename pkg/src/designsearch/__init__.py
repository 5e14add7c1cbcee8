"""Design search over a graph of architecture and hyper-parameter choices.

A design space is enumerated into canonical designs, designs one step apart
are joined into a design graph, and a small graph network trained on the
designs explored so far decides which neighbour to evaluate next.
"""
from .space import ConfigurationError, Design, DesignSpace, Dimension, DomainError, DependencyGroup, load_space

__all__ = [
    "ConfigurationError",
    "DependencyGroup",
    "Design",
    "DesignSpace",
    "Dimension",
    "DomainError",
    "load_space",
]
__version__ = "0.1.0"
