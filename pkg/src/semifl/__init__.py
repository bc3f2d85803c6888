"""Semi-supervised federated learning with a labeled server and unlabeled clients."""
from .errors import (ConfigError, DegenerateBatchError, DegenerateStatisticsError, FormatError, NumericError,
                     PartitionError, ProtocolError, ScheduleError, SemiFLError, StructuralError)
from .model import Model, ModelConfig, ParamSet, SbnState
from .protocol import FederatedSetup, ProtocolConfig, RoundRecord, run_semifl

__version__ = "0.1.0"
