"""pertmap: synthetic causal-perturbation priors, an in-context
flow-matching transformer, and a distributional evaluation harness."""

__version__ = "0.1.0"
