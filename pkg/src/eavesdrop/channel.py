"""MIMO Rayleigh block fading for the legitimate and wiretap links."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from eavesdrop.errors import InvalidArgumentError
from eavesdrop.numerics import (
    CMatrix,
    CVector,
    Rng,
    hermitian,
    sample_complex_gaussian,
    solve_least_squares,
)
from eavesdrop.semcom import flatten_codeword, reshape_codeword


def noise_variance(snr_db: float) -> float:
    """Transmit-referenced SNR with unit symbol power: sigma^2 = 10^(-snr/10)."""
    return float(10.0 ** (-snr_db / 10.0))


@dataclass(frozen=True)
class ChannelConfig:
    n_t: int
    n_r: int
    n_e: int
    snr_db: float
    eve_snr_db: float | None = None

    def __post_init__(self) -> None:
        if self.n_t < 1:
            raise InvalidArgumentError(f"N_t must be positive, got {self.n_t}")
        if self.n_r < self.n_t:
            raise InvalidArgumentError(
                f"Zero-forcing needs N_r >= N_t, got N_r={self.n_r}, N_t={self.n_t}"
            )
        if self.n_e < 1:
            raise InvalidArgumentError(f"N_e must be at least 1, got {self.n_e}")

    @property
    def bob_noise_variance(self) -> float:
        return noise_variance(self.snr_db)

    @property
    def eve_noise_variance(self) -> float:
        return noise_variance(self.snr_db if self.eve_snr_db is None else self.eve_snr_db)


@dataclass(frozen=True)
class Transmission:
    """One coherence block: channel realizations, noise draws and both receptions.

    Columns index channel uses: ``y[:, t] = h @ s[:, t] + noise_bob[:, t]``.
    """

    h: CMatrix
    g: CMatrix
    s: CMatrix
    noise_bob: CMatrix
    noise_eve: CMatrix
    y: CMatrix
    r: CMatrix


def transmit(z: CVector, cfg: ChannelConfig, rng: Rng) -> Transmission:
    z = np.asarray(z, dtype=np.complex128)
    if z.ndim != 1 or z.size % cfg.n_t != 0:
        raise InvalidArgumentError(f"Codeword length {z.size} is not a multiple of N_t={cfg.n_t}")
    t = z.size // cfg.n_t
    s = reshape_codeword(z, cfg.n_t, t)
    h = sample_complex_gaussian(rng.child("H"), cfg.n_r, cfg.n_t, 1.0)
    g = sample_complex_gaussian(rng.child("G"), cfg.n_e, cfg.n_t, 1.0)
    n = sample_complex_gaussian(rng.child("n"), cfg.n_r, t, cfg.bob_noise_variance)
    w = sample_complex_gaussian(rng.child("w"), cfg.n_e, t, cfg.eve_noise_variance)
    return Transmission(h=h, g=g, s=s, noise_bob=n, noise_eve=w, y=h @ s + n, r=g @ s + w)


def zf_receive(trans: Transmission, h: CMatrix) -> CVector:
    """Zero-forcing equalization of every channel use, flattened to a codeword."""
    s_hat = solve_least_squares(h, trans.y)
    return flatten_codeword(s_hat)


def zf_noise_variance(h: CMatrix, snr_db: float) -> np.ndarray:
    """Per-stream complex noise variance after zero-forcing: sigma^2 [(H^H H)^-1]_ii."""
    gram = hermitian(h) @ h
    return noise_variance(snr_db) * np.real(np.diag(np.linalg.inv(gram)))


def wiretap_forward(g_tilde: CMatrix, s: CMatrix) -> CMatrix:
    """Predicted wiretap observations G̃·s_t for every use (column)."""
    g_tilde = np.asarray(g_tilde)
    s = np.asarray(s)
    if g_tilde.ndim != 2 or s.ndim != 2 or g_tilde.shape[1] != s.shape[0]:
        raise InvalidArgumentError(
            f"Cannot apply channel {g_tilde.shape} to transmit block {s.shape}"
        )
    return g_tilde @ s


def wiretap_vjp(
    g_tilde: CMatrix, s: CMatrix, cotangent: CMatrix
) -> tuple[CMatrix, CMatrix]:
    """Gradients of Re<cotangent, G̃ S> with respect to G̃ and S.

    Complex gradients follow the descent convention: stepping against them
    decreases the real objective to first order.
    """
    return cotangent @ hermitian(s), hermitian(g_tilde) @ cotangent


# ── What the eavesdropper gets ───────────────────────────────────────────────


@dataclass(frozen=True)
class WiretapStatistics:
    """Statistical knowledge of the wiretap link; no realization."""

    n_e: int
    n_t: int
    noise_variance: float
    entry_variance: float = 1.0
    distribution: str = "CN(0, entry_variance)"


@dataclass(frozen=True)
class Interception:
    """Everything Eve observes: the received block and link statistics."""

    r: CMatrix
    t: int
    stats: WiretapStatistics

    def __post_init__(self) -> None:
        if self.r.shape != (self.stats.n_e, self.t):
            raise InvalidArgumentError(
                f"Observation block {self.r.shape} does not match N_e={self.stats.n_e}, T={self.t}"
            )

    @property
    def noise_energy(self) -> float:
        """Expected ||W||^2 over the block; a fit below it is fitting noise."""
        return self.stats.noise_variance * self.stats.n_e * self.t


def intercept(trans: Transmission, cfg: ChannelConfig) -> Interception:
    stats = WiretapStatistics(n_e=cfg.n_e, n_t=cfg.n_t, noise_variance=cfg.eve_noise_variance)
    r = trans.r.copy()
    r.setflags(write=False)
    return Interception(r=r, t=trans.r.shape[1], stats=stats)
