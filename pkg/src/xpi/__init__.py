"""Two-party private inference for square-activation mixer networks.

Party 0 (the client) holds an image; party 1 (the server) helps
evaluate a public network over additively secret-shared fixed-point
tensors in Z_{2^64}. All linear layers run locally on shares; the
single nonlinearity, an elementwise square, costs one communication
round per layer using dealer-supplied square correlations.
"""

__version__ = "0.1.0"

from xpi.errors import XpiError
from xpi.kernels import BACKEND
from xpi.model import ModelConfig, PRESETS
from xpi.ring import RingTensor, decode_fixed, encode_fixed

__all__ = [
    "BACKEND",
    "ModelConfig",
    "PRESETS",
    "RingTensor",
    "XpiError",
    "decode_fixed",
    "encode_fixed",
    "__version__",
]
