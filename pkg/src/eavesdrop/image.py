"""Image tensors, total variation, reference metrics, toy identity embedding,
synthetic faces and PPM file I/O.

An image is a ``float64`` array of shape ``(3, H, W)`` with nominal range
[0, 1]. Nothing here clips silently: callers use :func:`clip_unit`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np
import numpy.typing as npt
import scipy.linalg
import scipy.ndimage
import scipy.signal

from eavesdrop.errors import InvalidArgumentError, PpmFormatError
from eavesdrop.numerics import Rng

Image = npt.NDArray[np.float64]

CHANNELS = 3
PSNR_CAP_DB = 100.0
TV_SMOOTHING = 1e-6

_LUMA = np.array([0.299, 0.587, 0.114])


def check_image(x: np.ndarray, shape: tuple[int, int] | None = None) -> Image:
    """Validate layout and finiteness; returns the array as float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != CHANNELS:
        raise InvalidArgumentError(f"Image must have shape (3, H, W), got {x.shape}")
    if shape is not None and x.shape[1:] != tuple(shape):
        raise InvalidArgumentError(f"Image is {x.shape[1:]}, expected {tuple(shape)}")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("Image contains non-finite values")
    return x


def clip_unit(x: Image) -> Image:
    """Explicit clip to [0, 1]; always returns a new array."""
    return np.clip(x, 0.0, 1.0)


def grayscale(x: Image) -> npt.NDArray[np.float64]:
    return np.tensordot(_LUMA, x, axes=1)


def _require_same_dims(x: Image, y: Image) -> None:
    if x.shape != y.shape:
        raise InvalidArgumentError(f"Dimension mismatch: {x.shape} vs {y.shape}")


# ── Total variation ──────────────────────────────────────────────────────────


def total_variation(x: Image, mu: float = 0.0) -> float:
    """Anisotropic TV summed over channels.

    With ``mu > 0`` each |d| becomes sqrt(d^2 + mu^2) - mu, the smoothed
    form used by the optimizer (zero on constant images either way).
    """
    dh = np.diff(x, axis=2)
    dv = np.diff(x, axis=1)
    if mu == 0.0:
        return float(np.abs(dh).sum() + np.abs(dv).sum())
    return float(
        (np.sqrt(dh * dh + mu * mu) - mu).sum() + (np.sqrt(dv * dv + mu * mu) - mu).sum()
    )


def total_variation_grad(x: Image, mu: float = TV_SMOOTHING) -> Image:
    """Gradient of the smoothed TV."""
    grad = np.zeros_like(x)
    dh = np.diff(x, axis=2)
    gh = dh / np.sqrt(dh * dh + mu * mu)
    grad[:, :, 1:] += gh
    grad[:, :, :-1] -= gh
    dv = np.diff(x, axis=1)
    gv = dv / np.sqrt(dv * dv + mu * mu)
    grad[:, 1:, :] += gv
    grad[:, :-1, :] -= gv
    return grad


# ── Reference metrics ────────────────────────────────────────────────────────


def psnr(x: Image, y: Image) -> float:
    """PSNR in dB with peak 1.0; identical images report ``PSNR_CAP_DB``."""
    _require_same_dims(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse)))


MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _gaussian_window(size: int = _SSIM_WINDOW, sigma: float = _SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def feasible_scales(height: int, width: int) -> int:
    """Largest scale count (<= 5) with min(H, W) >= 2^(s-1) * window."""
    side = min(height, width)
    scales = 0
    while scales < len(MS_SSIM_WEIGHTS) and side >= (2**scales) * _SSIM_WINDOW:
        scales += 1
    return scales


def _ssim_terms(x: np.ndarray, y: np.ndarray, window: np.ndarray) -> tuple[float, float]:
    """Mean SSIM and mean contrast-structure over all channels (valid filtering)."""
    c1 = _K1**2
    c2 = _K2**2
    ssim_maps = []
    cs_maps = []
    for xc, yc in zip(x, y):
        mu_x = scipy.signal.convolve2d(xc, window, mode="valid")
        mu_y = scipy.signal.convolve2d(yc, window, mode="valid")
        sxx = scipy.signal.convolve2d(xc * xc, window, mode="valid") - mu_x * mu_x
        syy = scipy.signal.convolve2d(yc * yc, window, mode="valid") - mu_y * mu_y
        sxy = scipy.signal.convolve2d(xc * yc, window, mode="valid") - mu_x * mu_y
        cs = (2.0 * sxy + c2) / (sxx + syy + c2)
        luminance = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
        cs_maps.append(cs)
        ssim_maps.append(luminance * cs)
    return float(np.mean(ssim_maps)), float(np.mean(cs_maps))


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2).mean(axis=(2, 4))


def ms_ssim(x: Image, y: Image, scales: int | None = None) -> float:
    """Multi-scale SSIM in [0, 1].

    ``scales=None`` picks the largest feasible count for the image size and
    renormalizes the standard weights over the scales used. An explicit
    infeasible count raises InvalidArgumentError.
    """
    _require_same_dims(x, y)
    feasible = feasible_scales(x.shape[1], x.shape[2])
    if scales is None:
        scales = feasible
    if scales < 1 or scales > feasible:
        raise InvalidArgumentError(
            f"Image {x.shape[1]}x{x.shape[2]} too small for {scales} MS-SSIM scale(s); "
            f"at most {feasible} feasible"
        )
    weights = np.array(MS_SSIM_WEIGHTS[:scales])
    weights /= weights.sum()
    window = _gaussian_window()
    factors = []
    for level in range(scales):
        ssim_val, cs_val = _ssim_terms(x, y, window)
        if level < scales - 1:
            factors.append(max(cs_val, 0.0))
            x, y = _avg_pool2(x), _avg_pool2(y)
        else:
            factors.append(max(ssim_val, 0.0))
    return float(np.prod(np.power(np.array(factors), weights)))


# ── Toy identity embedding ───────────────────────────────────────────────────

EMBED_SIDE = 16


@dataclass(frozen=True)
class ToyEmbedding:
    """Seeded random projection of the centered, downsampled grayscale image.

    A deterministic stand-in for a face-identity network. It makes no claim
    of face-recognition validity; it only gives the success threshold a
    well-defined, phase-free similarity to act on.
    """

    dim: int = 128
    seed: int = 0x5EED

    @cached_property
    def projection(self) -> np.ndarray:
        rng = Rng(self.seed).child("toy-embedding")
        return rng.generator.standard_normal((self.dim, EMBED_SIDE * EMBED_SIDE))


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    degenerate: bool = False

    def __neg__(self) -> Embedding:
        return Embedding(-self.vector, self.degenerate)


def _downsample_gray(x: Image) -> np.ndarray:
    gray = grayscale(x)
    h, w = gray.shape
    if h % EMBED_SIDE == 0 and w % EMBED_SIDE == 0:
        return gray.reshape(EMBED_SIDE, h // EMBED_SIDE, EMBED_SIDE, w // EMBED_SIDE).mean(
            axis=(1, 3)
        )
    return scipy.ndimage.zoom(gray, (EMBED_SIDE / h, EMBED_SIDE / w), order=1)


def embed(x: Image, e: ToyEmbedding) -> Embedding:
    """Unit-norm embedding. Constant images (all-zero included) are degenerate."""
    g = _downsample_gray(x).reshape(-1)
    g = g - g.mean()
    v = e.projection @ g
    norm = float(np.linalg.norm(v))
    if norm < 1e-12:
        return Embedding(np.zeros(e.dim), degenerate=True)
    return Embedding(v / norm)


def cosine_sim(a: Embedding | np.ndarray, b: Embedding | np.ndarray) -> float:
    """Inner product of unit vectors; 0 when either side is degenerate."""
    if isinstance(a, Embedding):
        if a.degenerate:
            return 0.0
        a = a.vector
    if isinstance(b, Embedding):
        if b.degenerate:
            return 0.0
        b = b.vector
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


# ── Synthetic faces ──────────────────────────────────────────────────────────


@dataclass(frozen=True)
class FaceParams:
    """Parameters of one parametric face, in pixel units where positional.

    Ranges (fractions of the image side unless noted):
      background rgb in [0.08, 0.92], gradient amplitude [0, 0.1], any angle;
      head center 0.5 +/- 0.05, semi-axes ry in [0.30, 0.37], rx in [0.22, 0.29];
      skin tone [0.35, 0.85] times (1.0, 0.82, 0.68);
      eyes at dy in [0.15, 0.30]·ry above center, dx in [0.30, 0.45]·rx,
      radius [0.07, 0.10]·W (at least 1 px), darkness [0.03, 0.25];
      mouth at [0.35, 0.50]·ry below center, half-width [0.30, 0.50]·rx,
      curvature [-1, 1] px.
    """

    background: tuple[float, float, float]
    gradient_amplitude: float
    gradient_angle: float
    center: tuple[float, float]
    axes: tuple[float, float]
    skin: tuple[float, float, float]
    eye_offset: tuple[float, float]
    eye_radius: float
    eye_color: tuple[float, float, float]
    mouth_offset: float
    mouth_half_width: float
    mouth_curvature: float
    lip_color: tuple[float, float, float]
    extras: dict = field(default_factory=dict, compare=False)

    @property
    def eye_centers(self) -> tuple[tuple[float, float], tuple[float, float]]:
        cy, cx = self.center
        dy, dx = self.eye_offset
        return (cy - dy, cx - dx), (cy - dy, cx + dx)

    @property
    def background_tone(self) -> str:
        """'light' or 'dark' by background luminance (the rendered corner mean)."""
        return "light" if float(_LUMA @ np.array(self.background)) > 0.5 else "dark"


def draw_face_params(rng: Rng, height: int, width: int) -> FaceParams:
    g = rng.generator
    tone = g.uniform(0.12, 0.88)
    background = tuple(float(np.clip(tone + g.uniform(-0.04, 0.04), 0.08, 0.92)) for _ in range(3))
    ry = g.uniform(0.30, 0.37) * height
    rx = g.uniform(0.22, 0.29) * width
    cy = (0.5 + g.uniform(-0.05, 0.05)) * height
    cx = (0.5 + g.uniform(-0.05, 0.05)) * width
    skin_tone = g.uniform(0.35, 0.85)
    skin = tuple(float(skin_tone * f) for f in (1.0, 0.82, 0.68))
    eye_dark = g.uniform(0.03, 0.25)
    lip = g.uniform(0.25, 0.55)
    return FaceParams(
        background=background,
        gradient_amplitude=float(g.uniform(0.0, 0.1)),
        gradient_angle=float(g.uniform(0.0, 2.0 * np.pi)),
        center=(float(cy), float(cx)),
        axes=(float(ry), float(rx)),
        skin=skin,
        eye_offset=(float(g.uniform(0.15, 0.30) * ry), float(g.uniform(0.30, 0.45) * rx)),
        eye_radius=float(max(1.0, g.uniform(0.07, 0.10) * width)),
        eye_color=(float(eye_dark), float(eye_dark * 0.9), float(eye_dark * 0.8)),
        mouth_offset=float(g.uniform(0.35, 0.50) * ry),
        mouth_half_width=float(g.uniform(0.30, 0.50) * rx),
        mouth_curvature=float(g.uniform(-1.0, 1.0)),
        lip_color=(float(lip + 0.2), float(lip * 0.6), float(lip * 0.6)),
    )


def render_face(params: FaceParams, height: int, width: int) -> Image:
    """Rasterize ``params`` with hard masks evaluated at pixel centers."""
    py, px = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    # Linear gradient centered on the image middle, so the mean over the four
    # corners equals the background color exactly.
    uy = (py - height / 2.0) / height
    ux = (px - width / 2.0) / width
    ramp = params.gradient_amplitude * (
        np.cos(params.gradient_angle) * ux + np.sin(params.gradient_angle) * uy
    )
    img = np.stack([np.full((height, width), c) + ramp for c in params.background])

    cy, cx = params.center
    ry, rx = params.axes
    head = ((py - cy) / ry) ** 2 + ((px - cx) / rx) ** 2 <= 1.0
    for c in range(CHANNELS):
        img[c][head] = params.skin[c]

    for ey, ex in params.eye_centers:
        eye = (py - ey) ** 2 + (px - ex) ** 2 <= params.eye_radius**2
        for c in range(CHANNELS):
            img[c][eye] = params.eye_color[c]

    my = cy + params.mouth_offset
    u = (px - cx) / params.mouth_half_width
    arc_y = my + params.mouth_curvature * (1.0 - u * u)
    mouth = (np.abs(u) <= 1.0) & (np.abs(py - arc_y) <= 0.6)
    for c in range(CHANNELS):
        img[c][mouth] = params.lip_color[c]
    return img


def synth_face(
    rng: Rng, height: int, width: int, params: FaceParams | None = None
) -> Image:
    """Deterministic parametric face; same seed gives a bitwise-identical image."""
    if height < 16 or width < 16:
        raise InvalidArgumentError(f"Faces need at least 16x16 pixels, got {height}x{width}")
    if params is None:
        params = draw_face_params(rng, height, width)
    return render_face(params, height, width)


FACE_PRIOR_SAMPLES = 1024
FACE_PRIOR_SEED = 0xFACE
FACE_PRIOR_LOADING = 1e-3


@dataclass(frozen=True)
class FacePrior:
    """Gaussian fit to the synthetic face distribution.

    ``factor`` satisfies ``factor @ factor.T = cov + loading·I`` over the
    flattened (C, H, W) layout.
    """

    mean: npt.NDArray[np.float64]
    factor: npt.NDArray[np.float64]

    @property
    def covariance(self) -> npt.NDArray[np.float64]:
        return self.factor @ self.factor.T

    def shrink(self, x: Image, noise_variance: float) -> Image:
        """Posterior mean of a face seen through white noise: mu + C (C + s^2 I)^-1 (x - mu).

        The factor columns are orthogonal, so the solve is diagonal in their basis.
        """
        if not noise_variance >= 0:
            raise InvalidArgumentError(f"Noise variance must be >= 0, got {noise_variance}")
        x = np.asarray(x, dtype=np.float64)
        if x.size != self.mean.size:
            raise InvalidArgumentError(f"Image has {x.size} values, prior has {self.mean.size}")
        power = np.sum(self.factor**2, axis=0)
        coeff = self.factor.T @ (x.reshape(-1) - self.mean) / (power + noise_variance)
        return (self.mean + self.factor @ coeff).reshape(x.shape)


@lru_cache(maxsize=4)
def face_prior(height: int, width: int, samples: int = FACE_PRIOR_SAMPLES) -> FacePrior:
    rng = Rng(FACE_PRIOR_SEED)
    faces = np.stack(
        [synth_face(rng.child("face-prior", i), height, width).reshape(-1) for i in range(samples)]
    )
    mean = faces.mean(axis=0)
    cov = np.cov(faces, rowvar=False) + FACE_PRIOR_LOADING * np.eye(faces.shape[1])
    evals, evecs = scipy.linalg.eigh(cov)
    factor = evecs * np.sqrt(np.clip(evals, FACE_PRIOR_LOADING, None))
    return FacePrior(mean, factor)


def noise_image(rng: Rng, height: int, width: int, sigma: float = 0.5) -> Image:
    """Mid-gray Gaussian noise, explicitly clipped to [0, 1]."""
    raw = 0.5 + sigma * rng.generator.standard_normal((CHANNELS, height, width))
    return clip_unit(raw)


# ── PPM (P6) I/O ─────────────────────────────────────────────────────────────

_WHITESPACE = b" \t\n\r\x0b\x0c"


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Read one header token, skipping whitespace and '#' comments."""
    n = len(data)
    while pos < n:
        if data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos : pos + 1] in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos : pos + 1] not in _WHITESPACE and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PpmFormatError("Unexpected end of header", start)
    return data[start:pos], pos


def decode_ppm(data: bytes) -> Image:
    """Parse binary PPM bytes into a (3, H, W) image in [0, 1]."""
    if data[:2] != b"P6":
        raise PpmFormatError(f"Unsupported magic {data[:2]!r}, expected b'P6'", 0)
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        token, end = _next_token(data, pos)
        if not token.isdigit():
            raise PpmFormatError(f"Invalid {name} {token!r}", end - len(token))
        values.append(int(token))
        pos = end
    width, height, maxval = values
    if width < 1 or height < 1:
        raise PpmFormatError(f"Invalid dimensions {width}x{height}", pos)
    if not 1 <= maxval <= 255:
        raise PpmFormatError(f"Only 8-bit PPM is supported, maxval={maxval}", pos)
    if data[pos : pos + 1] not in _WHITESPACE or pos >= len(data):
        raise PpmFormatError("Missing whitespace after maxval", pos)
    pos += 1
    expected = 3 * width * height
    actual = len(data) - pos
    if actual < expected:
        raise PpmFormatError(
            f"Truncated payload: expected {expected} bytes, found {actual}", pos
        )
    raw = np.frombuffer(data, dtype=np.uint8, count=expected, offset=pos)
    return raw.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def encode_ppm(x: Image) -> bytes:
    """Quantize an in-range image to 8-bit binary PPM bytes."""
    x = check_image(x)
    if x.min() < 0.0 or x.max() > 1.0:
        raise InvalidArgumentError(
            f"Image values outside [0, 1] ({x.min():.4f}..{x.max():.4f}); clip explicitly first"
        )
    _, height, width = x.shape
    q = np.rint(x * 255.0).astype(np.uint8)
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    return header + q.transpose(1, 2, 0).tobytes()


def read_image(path: str | Path) -> Image:
    return decode_ppm(Path(path).read_bytes())


def write_image(x: Image, path: str | Path) -> None:
    Path(path).write_bytes(encode_ppm(x))
