"""Joint CTC training on paired speech and unpaired multi-domain text.

The package trains a CTC speech recognizer whose acoustic pathway also
consumes pre-upsampled text representations, bridged by an attention-based
modality matching loss, and ships the synthetic-corpus tooling, language
model, decoders and CLI needed to run the full experiment protocol.
"""

from .am3 import Am3Outputs, am3_loss, am3_loss_scaled
from .ctc import CtcTarget, DecodeHypothesis, beam_search, ctc_brute_force, ctc_loss, greedy_decode
from .encoders import EncoderConfig, ModelConfig, ModelParams, encode_speech, encode_text
from .errors import (ConfigError, DataError, FastInjectError, InfeasibleTargetError,
                     NumericError, OovError, ShapeError)
from .recognizer import CtcRecognizer
from .tensor import Tensor, backward, check_gradients
from .text import Lexicon, PhoneSequence, UpsampleConfig, UpsampledPhoneSequence

__version__ = "0.1.0"

__all__ = [
    "Am3Outputs", "am3_loss", "am3_loss_scaled",
    "CtcTarget", "DecodeHypothesis", "beam_search", "ctc_brute_force",
    "ctc_loss", "greedy_decode",
    "EncoderConfig", "ModelConfig", "ModelParams", "encode_speech", "encode_text",
    "ConfigError", "DataError", "FastInjectError", "InfeasibleTargetError",
    "NumericError", "OovError", "ShapeError",
    "CtcRecognizer",
    "Tensor", "backward", "check_gradients",
    "Lexicon", "PhoneSequence", "UpsampleConfig", "UpsampledPhoneSequence",
    "__version__",
]
