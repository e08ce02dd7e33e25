"""Batch rendering of log-log convergence figures from sweep outputs."""

from .render import PlotJob, SchemaError, build_figure, load_fit, read_points, render_rate_plot

__version__ = "0.1.0"
