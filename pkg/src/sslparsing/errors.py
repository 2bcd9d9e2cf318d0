"""Exception types raised by the toolkit.

All of them derive from :class:`ParsingError` so callers (and the CLI) can map
domain failures to a single exit status.
"""


class ParsingError(ValueError):
    pass


class TaxonomyError(ParsingError):
    pass


class RasterError(ParsingError):
    pass


class ManifestError(ParsingError):
    pass


class MetricsError(ParsingError):
    pass


class TrainingDiverged(ParsingError):
    def __init__(self, stage: int, epoch: int, value: float):
        super().__init__(f"non-finite loss {value} in stage {stage} epoch {epoch}")
        self.stage = stage
        self.epoch = epoch
