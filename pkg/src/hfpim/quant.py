"""Symmetric INT8 quantization and offset-binary encoding for crossbar cells."""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

QMAX = 127
QMIN = -128
OFFSET = 128


@dataclass(frozen=True)
class QuantMatrix:
    data: np.ndarray  # int8, shape (rows, cols)
    scale: float

    def __post_init__(self):
        if self.data.dtype != np.int8 or self.data.ndim != 2:
            raise InvalidInput("QuantMatrix data must be a 2-D int8 array")
        if not self.scale > 0:
            raise InvalidInput("scale must be positive")

    @property
    def shape(self):
        return self.data.shape

    def dequantize(self):
        return self.data.astype(np.float64) * self.scale


@dataclass(frozen=True)
class QuantVector:
    """One INT8 vector, or a batch of them stacked along the first axis."""

    data: np.ndarray
    scale: float

    def __post_init__(self):
        if self.data.dtype != np.int8 or self.data.ndim not in (1, 2):
            raise InvalidInput("QuantVector data must be a 1-D or 2-D int8 array")
        if not self.scale > 0:
            raise InvalidInput("scale must be positive")

    def __len__(self):
        return self.data.shape[-1]

    def dequantize(self):
        return self.data.astype(np.float64) * self.scale


def _quantize(a):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidInput("cannot quantize non-finite values")
    peak = float(np.max(np.abs(a))) if a.size else 0.0
    scale = peak / QMAX if peak > 0 else 1.0
    # np.rint rounds half to even
    q = np.clip(np.rint(a / scale), QMIN, QMAX).astype(np.int8)
    return q, scale


def quantize(m):
    """Per-tensor symmetric quantization, ``scale = max|m| / 127``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise InvalidInput(f"expected a 2-D matrix, got shape {m.shape}")
    q, scale = _quantize(m)
    return QuantMatrix(q, scale)


def quantize_vector(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2):
        raise InvalidInput(f"expected a vector or a batch of vectors, got shape {x.shape}")
    q, scale = _quantize(x)
    return QuantVector(q, scale)


@dataclass(frozen=True)
class OffsetMatrix:
    """Unsigned cell words ``w + 128`` of a signed INT8 matrix.

    The crossbar accumulates ``sum_i a_i * (w_ij + 128)``; ``correct`` removes
    the ``128 * sum_i a_i`` bias digitally.
    """

    words: np.ndarray  # uint8
    scale: float
    offset: int = OFFSET

    @property
    def shape(self):
        return self.words.shape

    def correction(self, x_int):
        return self.offset * np.asarray(x_int, dtype=np.int64).sum(axis=-1)

    def correct(self, y_encoded, x_int):
        """Map the raw accumulation back to ``x @ w`` (signed)."""
        return np.asarray(y_encoded) - self.correction(x_int)[..., None]


def offset_encode(q):
    if not isinstance(q, QuantMatrix):
        raise InvalidInput("offset_encode expects a QuantMatrix")
    words = (q.data.astype(np.int16) + OFFSET).astype(np.uint8)
    return OffsetMatrix(words, q.scale)
