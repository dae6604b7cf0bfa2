"""Gradient compression with historical side information for federated learning."""

from .codec import (
    CodecError,
    EncodedGradient,
    NormMode,
    QuantizerParams,
    RawGradient,
    mq_decode,
    mq_encode,
    mqd_decode,
    mqd_encode,
    pack_bins,
    unpack_bins,
)
from .fedsim import Compressor, DivergenceError, ModelState, RoundRecord, RunConfig, run
from .policy import SideInfoState, distance_ratio, select_alpha
from .tasks import RegressionTask, generate_synthetic, load_sparse_text, save_sparse_text
from .transform import RotationSpec, derotate, rotate

__version__ = "0.1.0"
