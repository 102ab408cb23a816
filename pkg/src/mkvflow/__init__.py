"""mkvflow: numerics for distribution-dependent SDEs with singular drifts."""
__version__ = "0.1.0"
