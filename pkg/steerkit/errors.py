class SteerkitError(Exception):
    """Root of every error raised on purpose by steerkit."""


class ConfigurationError(SteerkitError, ValueError):
    pass


class DimensionError(SteerkitError, ValueError):

    def __init__(self, message, axis=None):
        """
        :param message: str
        :param axis: str | int, the offending axis
        """
        super().__init__(message)
        self.axis = axis


class ParseError(SteerkitError, ValueError):

    def __init__(self, message, row=None, column=None):
        """
        :param message: str
        :param row: int, 1-based row number
        :param column: int, 1-based column number
        """
        super().__init__(message)
        self.row = row
        self.column = column


class CorruptWeightsError(SteerkitError):
    pass


class IncompatibleWeightsError(SteerkitError):
    pass


class TrainingError(SteerkitError):

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class DivergedTrainingError(TrainingError):

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class LabelingError(SteerkitError):
    pass


class EpisodeError(SteerkitError):

    def __init__(self, message, sim_time=None):
        super().__init__(message)
        self.sim_time = sim_time


class ProtocolError(SteerkitError):
    pass


class StartupError(SteerkitError):
    pass
