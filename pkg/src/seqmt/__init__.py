"""Sequential multiple testing: rules, error metrics, calibration and ESS approximations."""
from .errors import NonUniqueError, NumericError, ResourceError, ValidationError
from .model import (DeterministicDrift, GaussianMeanShift, HypothesisFamily, LlrState, Problem, SignalConfig,
                    advance, family_enumerate, info_numbers, llr_increment, sample_llr_increment)

__version__ = "0.1.0"
