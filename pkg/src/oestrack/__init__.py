"""Online early stopping for tracking drifting cross-sectional relationships."""
__version__ = "0.1.0"

from .baselines import DTSSGDRegressor, ExpandingWindowRegressor
from .oes import OnlineEarlyStoppingRegressor
from .panel import PanelPreprocessor, PanelSlice, load_panel, write_panel

__all__ = [
    "DTSSGDRegressor",
    "ExpandingWindowRegressor",
    "OnlineEarlyStoppingRegressor",
    "PanelPreprocessor",
    "PanelSlice",
    "__version__",
    "load_panel",
    "write_panel",
]
