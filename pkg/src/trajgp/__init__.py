"""Deep-kernel GP forecasting and trajectory clustering for irregular
clinical time series."""

__version__ = "0.1.0"
