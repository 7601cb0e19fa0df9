"""Speech emotion recognition from log-Mel segments with time, frequency and fused attention branches."""

__version__ = "0.1.0"
