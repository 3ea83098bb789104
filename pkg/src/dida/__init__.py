"""Visual difference attention and the differentiable difference-attention loss."""
__version__ = "0.1.0"
