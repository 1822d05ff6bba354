"""Differentiable toy semantic encoders, power normalization and Bob's decoder.

Two encoder kinds share one interface:

* ``linear``: ``u = W vec(x)`` with ``W`` complex Gaussian, variance 1/N.
* ``mlp``:    ``u = V tanh(U vec(x))`` with real ``U`` and complex ``V``.

The raw output ``u`` is power-normalized to a codeword ``z`` of average
power one. The normalization is part of the forward map and is
differentiated through in :func:`encode_vjp`.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Literal

import click
import numpy as np
import scipy.linalg

from eavesdrop.errors import DegenerateCodewordError, InvalidArgumentError
from eavesdrop.image import CHANNELS, Image, check_image, clip_unit, face_prior
from eavesdrop.numerics import (
    CMatrix,
    CVector,
    RArray,
    Rng,
    hermitian,
    sample_complex_gaussian,
)

EncoderKind = Literal["linear", "mlp"]
PowerNorm = Literal["global", "per_stream"]

_DEGENERATE_NORM = 1e-30
_MIN_NOISE_VAR = 1e-24


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class EncoderHandle:
    """Glass-box encoder description; weights are derived from ``seed`` on demand.

    Alice and Eve build their copies from the same handle, so the weights are
    byte-identical on both sides.
    """

    kind: EncoderKind
    n_input: int
    n_t: int
    t: int
    seed: int
    hidden: int = 256
    power_norm: PowerNorm = "global"

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "mlp"):
            raise InvalidArgumentError(f"Unknown encoder kind '{self.kind}'")
        if self.power_norm not in ("global", "per_stream"):
            raise InvalidArgumentError(f"Unknown power normalization '{self.power_norm}'")
        if min(self.n_input, self.n_t, self.t, self.hidden) < 1:
            raise InvalidArgumentError("Encoder dimensions must be positive")

    @property
    def length(self) -> int:
        """Codeword length N_t·T."""
        return self.n_t * self.t

    @property
    def bcr(self) -> Fraction:
        return Fraction(self.length, self.n_input)

    @cached_property
    def weights(self) -> dict[str, np.ndarray]:
        rng = Rng(self.seed).child("encoder", self.kind)
        n = self.n_input
        if self.kind == "linear":
            w = sample_complex_gaussian(rng.child("W"), self.length, n, 1.0 / n)
            return {"W": _readonly(w)}
        u = rng.child("U").generator.standard_normal((self.hidden, n)) / np.sqrt(n)
        v = sample_complex_gaussian(rng.child("V"), self.length, self.hidden, 1.0 / self.hidden)
        return {"U": _readonly(u), "V": _readonly(v)}


def solve_block_length(bcr: Fraction | str | float, n_input: int, n_t: int) -> int:
    """T = BCR·N/N_t, rejected unless it is an exact positive integer."""
    ratio = _as_fraction(bcr)
    t = ratio * n_input / n_t
    if t.denominator != 1 or t <= 0:
        raise InvalidArgumentError(
            f"BCR {ratio} with N={n_input}, N_t={n_t} gives non-integer T={t}"
        )
    return int(t)


def _as_fraction(bcr: Fraction | str | float) -> Fraction:
    if isinstance(bcr, Fraction):
        return bcr
    if isinstance(bcr, str):
        return Fraction(bcr)
    return Fraction(bcr).limit_denominator(1_000_000)


def make_encoder(
    kind: EncoderKind,
    image_shape: tuple[int, int],
    n_t: int,
    bcr: Fraction | str | float,
    seed: int,
    *,
    hidden: int = 256,
    power_norm: PowerNorm = "global",
) -> EncoderHandle:
    n_input = CHANNELS * image_shape[0] * image_shape[1]
    t = solve_block_length(bcr, n_input, n_t)
    return EncoderHandle(kind, n_input, n_t, t, seed, hidden=hidden, power_norm=power_norm)


# ── Forward and vector-Jacobian product ──────────────────────────────────────


@dataclass(frozen=True)
class _Forward:
    v: RArray
    u: CVector
    h: RArray | None
    z: CVector


def _raw(enc: EncoderHandle, v: RArray) -> tuple[CVector, RArray | None]:
    w = enc.weights
    if enc.kind == "linear":
        return w["W"] @ v, None
    h = np.tanh(w["U"] @ v)
    return w["V"] @ h, h


def _streams(enc: EncoderHandle) -> list[slice]:
    # Stream i carries z[i], z[i + N_t], ... (column-major transmit layout)
    if enc.power_norm == "global":
        return [slice(None)]
    return [slice(i, None, enc.n_t) for i in range(enc.n_t)]


def _normalize(enc: EncoderHandle, u: CVector) -> CVector:
    z = np.empty_like(u)
    for sl in _streams(enc):
        part = u[sl]
        norm = float(np.linalg.norm(part))
        if norm < _DEGENERATE_NORM:
            raise DegenerateCodewordError(f"Encoder output has norm {norm:.3e}")
        z[sl] = part * np.sqrt(part.size) / norm
    return z


def _forward(enc: EncoderHandle, x: Image) -> _Forward:
    x = check_image(x)
    v = x.reshape(-1)
    if v.size != enc.n_input:
        raise InvalidArgumentError(f"Image has {v.size} samples, encoder expects {enc.n_input}")
    u, h = _raw(enc, v)
    return _Forward(v, u, h, _normalize(enc, u))


def encode(enc: EncoderHandle, x: Image) -> CVector:
    """Power-normalized codeword of length N_t·T."""
    return _forward(enc, x).z


def gain(enc: EncoderHandle, x: Image) -> np.ndarray:
    """Per-stream RMS of the raw output (one entry under global normalization).

    Multiplying a codeword stream by its gain restores the raw encoder output.
    """
    u = _forward(enc, x).u
    return np.array([np.linalg.norm(u[sl]) / np.sqrt(u[sl].size) for sl in _streams(enc)])


def _normalize_vjp(enc: EncoderHandle, u: CVector, g: CVector) -> CVector:
    out = np.empty_like(u)
    for sl in _streams(enc):
        part = u[sl]
        gp = g[sl]
        norm = float(np.linalg.norm(part))
        c = np.sqrt(part.size)
        radial = np.real(np.vdot(part, gp)) / (norm * norm)
        out[sl] = (c / norm) * (gp - part * radial)
    return out


def _backward(enc: EncoderHandle, fwd: _Forward, cotangent: CVector) -> RArray:
    g_u = _normalize_vjp(enc, fwd.u, cotangent)
    w = enc.weights
    if enc.kind == "linear":
        return np.real(hermitian(w["W"]) @ g_u)
    g_h = np.real(hermitian(w["V"]) @ g_u)
    return w["U"].T @ (g_h * (1.0 - fwd.h * fwd.h))


def encode_vjp(enc: EncoderHandle, x: Image, cotangent: CVector) -> Image:
    """Gradient of Re<cotangent, encode(x)> with respect to ``x``.

    The inner product is conjugate-linear in its first argument.
    """
    cotangent = np.asarray(cotangent, dtype=np.complex128)
    if cotangent.shape != (enc.length,):
        raise InvalidArgumentError(
            f"Cotangent has shape {cotangent.shape}, expected ({enc.length},)"
        )
    fwd = _forward(enc, x)
    return _backward(enc, fwd, cotangent).reshape(np.shape(x))


def encode_with_vjp(
    enc: EncoderHandle, x: Image
) -> tuple[CVector, Callable[[CVector], Image]]:
    """Codeword plus a closure computing the VJP at the same point."""
    fwd = _forward(enc, x)
    shape = np.shape(x)

    def vjp(cotangent: CVector) -> Image:
        return _backward(enc, fwd, np.asarray(cotangent, dtype=np.complex128)).reshape(shape)

    return fwd.z, vjp


# ── Transmit layout ──────────────────────────────────────────────────────────


def reshape_codeword(z: CVector, n_t: int, t: int) -> CMatrix:
    """(N_t, T) matrix whose column t is transmit vector s_t."""
    z = np.asarray(z)
    if z.shape != (n_t * t,):
        raise InvalidArgumentError(f"Codeword length {z.size} does not equal N_t·T={n_t * t}")
    return z.reshape(t, n_t).T


def flatten_codeword(s: CMatrix) -> CVector:
    """Inverse of :func:`reshape_codeword`."""
    return np.ascontiguousarray(np.asarray(s).T).reshape(-1)


# ── Legitimate receiver ──────────────────────────────────────────────────────

BOB_MLP_STEPS = 2000
BOB_MLP_LR = 1e-2
BOB_MLP_TOL = 1e-6


@dataclass(frozen=True)
class DecodeResult:
    image: Image
    degenerate: bool = False
    converged: bool = True
    residual: float = 0.0


def _real_system(w: CMatrix) -> np.ndarray:
    return np.vstack([w.real, w.imag])


def bob_decode(
    enc: EncoderHandle,
    z_hat: CVector,
    image_shape: tuple[int, int],
    gain: np.ndarray | float | None = None,
    noise_variance: np.ndarray | float | None = None,
) -> DecodeResult:
    """Reconstruct the source from an equalized codeword.

    ``gain`` is the power-control side information of :func:`gain`. For the
    linear encoder it undoes the normalization; without it the solution is
    rescaled to mean 0.5. ``noise_variance`` is the complex noise variance
    left on each transmit stream after equalization (scalar or one entry
    per antenna). When given with a gain, the linear decode is the LMMSE
    estimate under the synthetic-face prior; otherwise it is the
    minimum-norm solution. The mlp encoder is decoded by inverting the
    forward map, which needs neither.
    """
    z_hat = np.asarray(z_hat, dtype=np.complex128)
    if z_hat.shape != (enc.length,):
        raise InvalidArgumentError(f"Codeword length {z_hat.size}, expected {enc.length}")
    shape = (CHANNELS, *image_shape)
    if float(np.linalg.norm(z_hat)) < _DEGENERATE_NORM:
        return DecodeResult(np.zeros(shape), degenerate=True)
    if enc.kind == "linear":
        return _decode_linear(enc, z_hat, shape, gain, noise_variance)
    return _decode_mlp(enc, z_hat, shape)


def _entry_variance(enc: EncoderHandle, noise_variance: np.ndarray | float) -> np.ndarray:
    """Complex noise variance of every codeword entry (entry j rides antenna j mod N_t)."""
    nv = np.atleast_1d(np.asarray(noise_variance, dtype=np.float64))
    if nv.size not in (1, enc.n_t):
        raise InvalidArgumentError(f"Expected 1 or {enc.n_t} noise variance(s), got {nv.size}")
    if np.any(nv < 0.0) or not np.all(np.isfinite(nv)):
        raise InvalidArgumentError(f"Noise variance must be finite and non-negative, got {nv}")
    return np.resize(nv, enc.length)


def _decode_linear(
    enc: EncoderHandle,
    z_hat: CVector,
    shape: tuple[int, ...],
    gain: np.ndarray | float | None,
    noise_variance: np.ndarray | float | None,
) -> DecodeResult:
    a = _real_system(enc.weights["W"])
    if gain is None:
        b = np.concatenate([z_hat.real, z_hat.imag])
        y, *_ = scipy.linalg.lstsq(a, b)
        residual = float(np.linalg.norm(a @ y - b) ** 2)
        mean = float(np.mean(y))
        x = y * (0.5 / mean) if abs(mean) > 1e-12 else y + 0.5
        return DecodeResult(clip_unit(x.reshape(shape)), residual=residual)

    g = np.atleast_1d(np.asarray(gain, dtype=np.float64))
    streams = _streams(enc)
    if g.size != len(streams):
        raise InvalidArgumentError(f"Expected {len(streams)} gain value(s), got {g.size}")
    u_hat = z_hat.copy()
    scale = np.ones(enc.length)
    for sl, gi in zip(streams, g):
        u_hat[sl] = u_hat[sl] * gi
        scale[sl] = gi
    b = np.concatenate([u_hat.real, u_hat.imag])
    if noise_variance is None or not np.any(_entry_variance(enc, noise_variance) > 0.0):
        # Minimum-norm deviation from mid-gray
        prior = np.full(enc.n_input, 0.5)
        delta, *_ = scipy.linalg.lstsq(a, b - a @ prior)
        x = prior + delta
    else:
        # Whitened LMMSE: x = mu + L y with [D^-1/2 A L; I] y ~ [D^-1/2 (b - A mu); 0]
        per_entry = _entry_variance(enc, noise_variance) * scale**2 / 2.0
        std = np.sqrt(np.maximum(np.concatenate([per_entry, per_entry]), _MIN_NOISE_VAR))
        prior = face_prior(shape[1], shape[2])
        lhs = np.vstack([(a @ prior.factor) / std[:, None], np.eye(enc.n_input)])
        rhs = np.concatenate([(b - a @ prior.mean) / std, np.zeros(enc.n_input)])
        y, *_ = scipy.linalg.lstsq(lhs, rhs)
        x = prior.mean + prior.factor @ y
    residual = float(np.linalg.norm(a @ x - b) ** 2)
    return DecodeResult(clip_unit(x.reshape(shape)), residual=residual)


def _decode_mlp(enc: EncoderHandle, z_hat: CVector, shape: tuple[int, ...]) -> DecodeResult:
    from eavesdrop.inversion import AdamMoments, adam_update

    x = np.full(shape, 0.5)
    moments = AdamMoments.zeros(shape)
    best_x, best_res = x, np.inf
    target = float(np.vdot(z_hat, z_hat).real)
    for _ in range(BOB_MLP_STEPS):
        z, vjp = encode_with_vjp(enc, x)
        err = z - z_hat
        res = float(np.vdot(err, err).real)
        if res < best_res:
            best_x, best_res = x, res
        if res <= BOB_MLP_TOL * target:
            break
        x, moments = adam_update(x, vjp(2.0 * err), moments, BOB_MLP_LR)
    converged = best_res <= BOB_MLP_TOL * target
    if not converged:
        click.echo(
            f"[eavesdrop] bob decoder: budget of {BOB_MLP_STEPS} steps exhausted "
            f"(relative residual {best_res / target:.3e})",
            err=True,
        )
    return DecodeResult(clip_unit(best_x), converged=converged, residual=best_res)
