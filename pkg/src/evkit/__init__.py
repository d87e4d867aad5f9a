"""Event-camera toolkit: DVS simulation, event frames, datasets and detection evaluation."""

__version__ = "0.1.0"

from .events import Event, EventFormat, EventStream, merge, read_events, slice_events, validate, write_events
from .simulator import LumaFrame, PixelState, SimParams, simulate_video

__all__ = [
    "Event",
    "EventFormat",
    "EventStream",
    "LumaFrame",
    "PixelState",
    "SimParams",
    "merge",
    "read_events",
    "simulate_video",
    "slice_events",
    "validate",
    "write_events",
]
