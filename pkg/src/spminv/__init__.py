"""Single-particle battery surrogate and scaling-factor inference."""
__version__ = "0.1.0"
