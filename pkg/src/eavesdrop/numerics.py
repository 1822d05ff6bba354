"""Complex linear algebra, seeded random streams and the finite-difference oracle.

Vectors and matrices are plain numpy arrays (``complex128`` / ``float64``);
double precision is used everywhere. Complex quantities are differentiated
through their stacked real representation ``[Re, Im]``.
"""

from __future__ import annotations

import zlib
from collections.abc import Callable

import numpy as np
import numpy.typing as npt
import scipy.linalg

from eavesdrop.errors import InvalidArgumentError, SingularMatrixError

CMatrix = npt.NDArray[np.complex128]
CVector = npt.NDArray[np.complex128]
RArray = npt.NDArray[np.float64]

# Generator pinned for cross-platform reproducibility (numpy PCG64 seeded
# through SeedSequence). Changing it changes every output byte.
ALGORITHM = "PCG64"

_RANK_TOL = 1e-12


def _key_part(part: int | str | float) -> int:
    """Map a key component to the non-negative integer SeedSequence expects."""
    if isinstance(part, bool):
        return int(part)
    if isinstance(part, int):
        return part % (1 << 64)
    # floats (e.g. SNR values) and strings hash through their text form
    return zlib.crc32(repr(part).encode() if isinstance(part, float) else part.encode())


class Rng:
    """Seeded random stream with explicit sub-stream derivation.

    ``Rng(seed).child("trial", 3)`` always yields the same stream for the
    same seed and key path, independent of how many other children were
    derived or in which order, so parallel trials stay reproducible.
    Instances are single-threaded.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if not 0 <= seed < (1 << 64):
            raise InvalidArgumentError(f"Seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.key = key
        sequence = np.random.SeedSequence(seed, spawn_key=key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def child(self, *parts: int | str | float) -> Rng:
        return Rng(self.seed, self.key + tuple(_key_part(p) for p in parts))

    def fingerprint(self) -> int:
        """Stable 63-bit integer identifying this stream (reported as a trial seed)."""
        state = np.random.SeedSequence(self.seed, spawn_key=self.key).generate_state(2)
        return ((int(state[0]) << 32) | int(state[1])) >> 1

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key}, algorithm={ALGORITHM})"


def sample_complex_gaussian(rng: Rng, rows: int, cols: int, variance: float) -> CMatrix:
    """I.i.d. circularly symmetric CN(0, variance) entries."""
    if not variance > 0:
        raise InvalidArgumentError(f"Variance must be positive, got {variance}")
    scale = np.sqrt(variance / 2.0)
    real = rng.generator.standard_normal((rows, cols))
    imag = rng.generator.standard_normal((rows, cols))
    return scale * (real + 1j * imag)


def hermitian(a: np.ndarray) -> np.ndarray:
    return a.conj().T


def solve_least_squares(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return x minimizing ||a x - b||_2 for a tall, full-column-rank ``a``.

    ``b`` may hold several right-hand sides as columns. Solved through an
    economic QR factorization rather than the normal equations.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2:
        raise InvalidArgumentError(f"Expected a matrix, got shape {a.shape}")
    rows, cols = a.shape
    if rows < cols:
        raise InvalidArgumentError(f"Least squares needs rows >= cols, got {rows}x{cols}")
    if b.shape[0] != rows:
        raise InvalidArgumentError(
            f"Right-hand side has {b.shape[0]} rows, matrix has {rows}"
        )
    singular = np.linalg.svd(a, compute_uv=False)
    if singular[0] == 0.0 or singular[-1] / singular[0] < _RANK_TOL:
        ratio = singular[-1] / max(singular[0], 1e-300)
        raise SingularMatrixError(f"Matrix is rank deficient (condition ratio {ratio:.3e})")
    q, r = scipy.linalg.qr(a, mode="economic")
    return scipy.linalg.solve_triangular(r, hermitian(q) @ b)


def finite_diff_gradient(
    f: Callable[[RArray], float],
    x: RArray,
    h: float = 1e-5,
) -> RArray:
    """Central-difference gradient of a scalar field over a real vector."""
    if not h > 0:
        raise InvalidArgumentError(f"Step h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] = flat[i] + h
        upper = f(shifted.reshape(x.shape))
        shifted[i] = flat[i] - h
        lower = f(shifted.reshape(x.shape))
        grad[i] = (upper - lower) / (2.0 * h)
    return grad.reshape(x.shape)


def stack_complex(z: np.ndarray) -> RArray:
    """[Re z; Im z] along a new leading axis."""
    return np.stack([z.real, z.imag]).astype(np.float64)


def unstack_complex(stacked: RArray) -> np.ndarray:
    return stacked[0] + 1j * stacked[1]


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """||actual - expected|| / max(||expected||, ||actual||, tiny)."""
    scale = max(float(np.linalg.norm(expected)), float(np.linalg.norm(actual)), 1e-300)
    return float(np.linalg.norm(np.asarray(actual) - np.asarray(expected))) / scale
