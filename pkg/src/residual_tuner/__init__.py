"""Learning residual model errors with an unscented-Kalman auto-tuned network."""

__version__ = "0.1.0"
