"""
IWSGD - Importance weighted stochastic gradient descent for networks trained with noise.
"""

__version__ = "0.1.0"
