"""Context-conditioned radar anomaly localization on simulated mmWave scenes."""

__version__ = "0.1.0"
