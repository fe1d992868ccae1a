"""liftlab: blueprint DAGs, sparse lifts, gradient flow, and theory checks."""

__version__ = "0.1.0"
