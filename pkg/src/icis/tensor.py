"""Dense matrix helpers and seeded randomness.

A "matrix" throughout this package is a 2-D, C-contiguous ``float64`` numpy
array. The helpers here validate shapes at module boundaries and raise the
package's structured errors instead of letting numpy broadcast silently.

Randomness goes through :class:`RngState`, a thin wrapper around numpy's
Philox counter-based bit generator. Philox is chosen over the platform
default because its streams are reproducible across platforms and can be
split into independent sub-streams, which keeps every experiment a pure
function of its seed.
"""

import hashlib

import numpy as np

from .errors import IcisError, ShapeMismatchError, ZeroNormError


def as_matrix(data) -> np.ndarray:
    """Coerce ``data`` to a 2-D float64 C-contiguous array."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatchError("expected a 2-D matrix", left=m.shape, right="(rows, cols)")
    return m


def as_vector(data) -> np.ndarray:
    """Coerce ``data`` to a 1-D float64 array."""
    v = np.ascontiguousarray(data, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatchError("expected a 1-D vector", left=v.shape, right="(n,)")
    return v


def check_finite(m: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise IcisError(f"{what} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul inner dimensions differ", left=a.shape, right=b.shape)
    return a @ b


def transpose(m) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(m).T)


def row_norms(m) -> np.ndarray:
    return np.linalg.norm(as_matrix(m), axis=1)


def row_normalize(m) -> np.ndarray:
    """Scale every row to unit Euclidean norm. Zero rows are an error."""
    m = as_matrix(m)
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0.0):
        raise ZeroNormError(f"cannot normalise zero row(s) at {np.flatnonzero(norms == 0.0).tolist()}")
    return m / norms[:, None]


class RngState:
    """Deterministic random stream backed by the Philox counter generator.

    Identical ``(seed, stream)`` pairs produce identical draw sequences on
    every platform. ``spawn`` derives independent named sub-streams, so one
    top-level seed can drive initialisation, shuffling, and data synthesis
    without their draws interfering.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence((self.seed, self.stream))))

    def spawn(self, label) -> "RngState":
        """Independent stream derived from this state's seed and ``label``."""
        if isinstance(label, str):
            digest = hashlib.sha256(label.encode("utf-8")).digest()
            label = int.from_bytes(digest[:8], "little")
        return RngState(self.seed, (self.stream * 0x9E3779B9 + int(label) + 1) & 0xFFFFFFFFFFFFFFFF)

    def normal(self, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
        return rand_normal(self, rows, cols, std)

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def rand_normal(rng: RngState, rows: int, cols: int, std: float) -> np.ndarray:
    """Matrix of i.i.d. zero-mean Gaussians with the given standard deviation.

    Advances ``rng`` by exactly ``rows * cols`` draws regardless of ``std``,
    so a zero-std call (exact zero matrix) keeps the stream aligned with a
    nonzero-std call of the same shape.
    """
    if std < 0:
        raise IcisError(f"standard deviation must be >= 0, got {std}")
    draws = rng._gen.standard_normal((int(rows), int(cols)))
    return draws * float(std)
