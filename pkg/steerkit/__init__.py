import logging

from .defs import (
    TRAIN,
    EVAL,
    INPUT_SHAPE,
    LAKSNET_PARAMETERS,
    DrivingLogRecord,
    Sample,
    EvalReport,
    EpochMetrics,
    TelemetryMessage,
    SteerCommand,
)
from .errors import (
    SteerkitError,
    ConfigurationError,
    DimensionError,
    ParseError,
    CorruptWeightsError,
    IncompatibleWeightsError,
    TrainingError,
    DivergedTrainingError,
    LabelingError,
    EpisodeError,
    ProtocolError,
    StartupError,
)
from .nn import (
    Network,
    LayerSpec,
    build_laksnet,
    build_pilotnet,
    build_custom,
    build_model,
    count_parameters,
    mse_loss,
)
from .weights import save_weights, load_weights


logging.getLogger(__name__).addHandler(logging.NullHandler())
