"""Granger-causal graph discovery from multivariate time series.

Fits one sparse-input recurrent forecaster per variate, compresses the input
projection columns during training until unhelpful variates are exactly
zeroed, and reads the causal graph off the surviving columns.
"""

__version__ = "0.1.0"
