"""Meta-learning over Gaussian distributions of initializations with
certified generalization bounds (PAC-Bayes at the task level, uniform
stability inside each task)."""

__version__ = "0.1.0"
