"""
Prediction intervals for multivariate forecasts conditioned on feature-wise reconstruction errors.
"""
import logging

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)
logger.addHandler(logging.NullHandler())

from .exceptions import RuePiError, ConfigError, DataError, NumericError
from .conformal import IntervalBatch
from .runconfig import RunConfig

__version__ = '1.0.0'
