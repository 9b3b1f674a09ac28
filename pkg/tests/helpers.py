"""Light stand-ins for the detector and segmenter used by engine tests."""
import numpy as np

from streamseg.frame_store import FrameRecord
from streamseg.masks import Mask
from streamseg.propagation import PromptBox

DOT = Mask(0, 0, np.ones((2, 2), dtype=bool))


def make_detector(ids=(1,), only_frames=None):
    def detector(frame: FrameRecord):
        if only_frames is not None and frame.global_idx not in only_frames:
            return []
        return [PromptBox(i, (10.0 * k, 0.0, 10.0 * k + 4, 4.0)) for k, i in enumerate(ids)]
    return detector


def segmenter(frame, prompts, remembered):
    return {i: DOT.translated(3 * k, 0) for k, i in enumerate(sorted(set(prompts) | remembered, key=str))}


def frame_source(n):
    return (FrameRecord(i) for i in range(n))


def oracle_cost(n, k, m=None):
    """Frames visited by a buffered schedule, summed head by head."""
    total = 0
    heads = list(range(k - 1, n, k))
    if n % k:
        heads.append(n - 1)
    for h in heads:
        span = h + 1
        if m is not None:
            span = min(span, m)
        total += span
    return total
