"""Static figures from msboost experiment CSVs.

Two figure kinds mirror the experiment outputs: ``transition_sweep`` plots
the mean log error ratio against heterogeneity with bootstrap bars, a zero
reference line, and dashed transition markers; ``cmse_curve`` plots the
path-conditional error of both strategies against the boosting iteration,
one pair of lines per heterogeneity level. The renderer consumes columns as
written by the harness and computes nothing new.
"""

__version__ = "0.1.0"

from .render import FigureJob, SchemaError, render

__all__ = ["FigureJob", "SchemaError", "render", "__version__"]
