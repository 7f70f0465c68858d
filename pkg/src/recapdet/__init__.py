"""Recaptured-document detection: DCT filter bank, two-branch CNN with
cross-attention and multi-scale fusion, synthetic corpus and metrics."""

from .errors import (ConfigError, CorpusIOError, InputError, NumericError, RecapError, ShapeError,
                     TrainingDivergenceError, UndefinedMetricError, UsageError)
from .filterbank import BandImage, BandMasks, dct2d, filter_bank_preprocess, idct2d, make_band_masks
from .metrics import EvalReport, accuracy, auc, average_precision, eer, hter
from .model import VARIANTS, ModelConfig, RecaptureNet, build_model
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
