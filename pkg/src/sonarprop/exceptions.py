"""Exception types raised across the package."""


class RejectedInputError(ValueError):
    """An argument has the wrong shape, range or type for the operation."""


class SamplingExhaustedError(RuntimeError):
    """Rejection sampling ran out of attempts before finding enough windows."""


class AnnotationParseError(ValueError):
    """A record in an annotation or proposal file could not be parsed."""

    def __init__(self, message, index=None):
        self.index = index
        if index is not None:
            message = f"record {index}: {message}"
        super().__init__(message)


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, epoch=None, layer=None, magnitude=None):
        self.epoch = epoch
        self.layer = layer
        self.magnitude = magnitude
        parts = [message]
        if epoch is not None:
            parts.append(f"epoch={epoch}")
        if layer is not None:
            parts.append(f"layer={layer}")
        if magnitude is not None:
            parts.append(f"magnitude={magnitude}")
        super().__init__(", ".join(parts))
