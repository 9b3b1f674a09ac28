"""Exception hierarchy shared by the engine, the post-processor and the CLI."""


class StreamSegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(StreamSegError, ValueError):
    """Invalid or inconsistent configuration, detected before a run starts."""


class IndexGapError(StreamSegError, ValueError):
    pass


class MissingFrameError(StreamSegError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class PreloadFormatError(StreamSegError, ValueError):
    pass


class AlreadyRegisteredError(StreamSegError, ValueError):
    pass


class ShapeError(StreamSegError, ValueError):
    pass


class OrderingError(StreamSegError, ValueError):
    pass


class DuplicatePromptError(StreamSegError, ValueError):
    """Two prompts for the same object id on one frame."""


class NoPromptError(StreamSegError, RuntimeError):
    """Propagation requested while the bank holds no condition frame at all."""


class GeometryError(StreamSegError, ValueError):
    pass
