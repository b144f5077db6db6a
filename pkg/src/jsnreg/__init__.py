"""Two-region rigid registration for quantifying joint space narrowing."""
__version__ = "0.1.0"
