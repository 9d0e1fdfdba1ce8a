"""Figure generation from evcosim CSV traces.

Plots never recompute physics; they render the documented CSV outputs of
the co-simulation CLI and embed input-data hashes in the PNG metadata.
"""

from .plots import plot_infeasibility, plot_objective
from .traces import ReservesFrame, TraceFormatError, TraceFrame, read_reserves, read_trace

__version__ = "0.1.0"
