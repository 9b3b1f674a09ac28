"""Streaming video segmentation with bounded memory, plus a synthetic
billiards world for driving and checking it."""
from .errors import (
    ConfigError,
    GeometryError,
    IndexGapError,
    MissingFrameError,
    NoPromptError,
    StreamSegError,
)
from .frame_store import FrameRecord, FrameStore
from .memory_bank import MemoryBank, init_state
from .propagation import PropagationConfig, PropagationEngine, PropagationStats, PromptBox
from .pipeline import PipelineConfig, run

__all__ = [
    "ConfigError", "GeometryError", "IndexGapError", "MissingFrameError", "NoPromptError", "StreamSegError",
    "FrameRecord", "FrameStore", "MemoryBank", "init_state",
    "PropagationConfig", "PropagationEngine", "PropagationStats", "PromptBox",
    "PipelineConfig", "run",
]
