"""Monte Carlo verification of log-Harnack inequalities for degenerate diffusions via coupling by change of measure."""

__version__ = "0.1.0"
