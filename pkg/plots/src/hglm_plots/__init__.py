"""Figure rendering for hglm CSV artifacts (kept independent of the core
package: it reads only the documented CSV schemas)."""

from .render import PlotData, PlotError, PlotSpec, Series, extract_series, render

__all__ = ["PlotData", "PlotError", "PlotSpec", "Series", "extract_series", "render"]
