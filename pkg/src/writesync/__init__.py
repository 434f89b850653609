"""Write+Sync timing channel: media, calibration, codec, strategies, metrics."""

from .calibration import CalibrationError, CalibrationResult, calibrate, classify
from .medium import MediumConfig, SimParams, open_medium
from .protocols import (
    AsyncFree,
    AsyncSlot,
    MultiBit,
    OneShot,
    SingleFile,
    SinglePage,
    Timing,
    run_strategy_sim,
)

__version__ = "0.1.0"
