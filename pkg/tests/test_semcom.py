"""Tests for the glass-box encoder, the transmit layout and Bob's decoder."""

from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest

from eavesdrop.channel import ChannelConfig, transmit, zf_noise_variance, zf_receive
from eavesdrop.errors import InvalidArgumentError
from eavesdrop.image import psnr, synth_face
from eavesdrop.numerics import Rng, finite_diff_gradient, sample_complex_gaussian
from eavesdrop.semcom import (
    EncoderHandle,
    bob_decode,
    encode,
    encode_vjp,
    encode_with_vjp,
    flatten_codeword,
    gain,
    make_encoder,
    reshape_codeword,
    solve_block_length,
)

SHAPE = (16, 16)


def _face() -> np.ndarray:
    return synth_face(Rng(11).child("face"), *SHAPE)


# ── Block length ─────────────────────────────────────────────────────────────


class TestBlockLength:
    def test_default_ratio(self):
        # 16x16x3 = 768 inputs, 2 antennas, 1/12 -> 32 uses
        assert solve_block_length("1/12", 768, 2) == 32

    def test_fraction_and_float(self):
        assert solve_block_length(Fraction(1, 2), 768, 2) == 192
        assert solve_block_length(0.25, 768, 2) == 96

    def test_non_integer_rejected(self):
        with pytest.raises(InvalidArgumentError, match="non-integer"):
            solve_block_length("1/7", 768, 2)


# ── Encoder ──────────────────────────────────────────────────────────────────


class TestEncoder:
    def test_weights_reproducible_from_seed(self):
        a = make_encoder("linear", SHAPE, 2, "1/12", seed=5)
        b = make_encoder("linear", SHAPE, 2, "1/12", seed=5)
        assert a == b
        assert np.array_equal(a.weights["W"], b.weights["W"])
        assert not a.weights["W"].flags.writeable

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgumentError, match="kind"):
            EncoderHandle("conv", 768, 2, 32, seed=0)  # type: ignore[arg-type]

    @pytest.mark.parametrize("kind", ["linear", "mlp"])
    def test_global_power_normalization(self, kind: str):
        enc = make_encoder(kind, SHAPE, 2, "1/12", seed=1, hidden=64)
        z = encode(enc, _face())
        assert z.shape == (enc.length,)
        assert np.mean(np.abs(z) ** 2) == pytest.approx(1.0)

    def test_per_stream_normalization(self):
        enc = make_encoder("linear", SHAPE, 2, "1/12", seed=1, power_norm="per_stream")
        s = reshape_codeword(encode(enc, _face()), enc.n_t, enc.t)
        # each antenna row carries unit average power
        assert np.allclose(np.mean(np.abs(s) ** 2, axis=1), 1.0)
        assert gain(enc, _face()).shape == (2,)

    @pytest.mark.parametrize("kind", ["linear", "mlp"])
    def test_vjp_matches_finite_differences(self, kind: str):
        enc = make_encoder(kind, (4, 4), 2, "1/2", seed=3, hidden=16)
        x = Rng(0).generator.uniform(0.0, 1.0, (3, 4, 4))
        c = sample_complex_gaussian(Rng(1), enc.length, 1, 1.0)[:, 0]

        def f(v: np.ndarray) -> float:
            return float(np.real(np.vdot(c, encode(enc, v))))

        fd = finite_diff_gradient(f, x)
        assert np.allclose(encode_vjp(enc, x, c), fd, atol=1e-7)
        _, vjp = encode_with_vjp(enc, x)
        assert np.array_equal(vjp(c), encode_vjp(enc, x, c))

    def test_vjp_cotangent_shape(self):
        enc = make_encoder("linear", (4, 4), 2, "1/2", seed=3)
        with pytest.raises(InvalidArgumentError, match="Cotangent"):
            encode_vjp(enc, np.zeros((3, 4, 4)), np.zeros(3, dtype=complex))


# ── Transmit layout ──────────────────────────────────────────────────────────


class TestCodewordLayout:
    def test_columns_are_channel_uses(self):
        z = np.arange(6) + 0j
        s = reshape_codeword(z, 2, 3)
        assert s.shape == (2, 3)
        assert np.array_equal(s[:, 0], [0, 1])
        assert np.array_equal(flatten_codeword(s), z)

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError, match="N_t"):
            reshape_codeword(np.zeros(5, dtype=complex), 2, 3)


# ── Bob ──────────────────────────────────────────────────────────────────────


class TestBobDecode:
    def test_noiseless_linear_with_gain_recovers_source(self):
        """At BCR 1/2 the real system is square, so the decode is exact."""
        enc = make_encoder("linear", SHAPE, 2, "1/2", seed=7)
        x = _face()
        result = bob_decode(enc, encode(enc, x), SHAPE, gain(enc, x))
        assert not result.degenerate
        assert psnr(x, result.image) > 50.0

    def test_through_channel_at_high_snr(self):
        enc = make_encoder("linear", SHAPE, 2, "1/2", seed=7)
        x = _face()
        trans = transmit(encode(enc, x), ChannelConfig(2, 2, 2, 300.0), Rng(4).child("channel"))
        result = bob_decode(enc, zf_receive(trans, trans.h), SHAPE, gain(enc, x))
        assert psnr(x, result.image) > 50.0

    def test_lmmse_at_20db(self):
        enc = make_encoder("linear", SHAPE, 2, "1/2", seed=7)
        lmmse, min_norm = [], []
        for seed in range(6):
            x = synth_face(Rng(seed).child("face"), *SHAPE)
            trans = transmit(encode(enc, x), ChannelConfig(2, 2, 2, 20.0), Rng(seed).child("ch"))
            z_hat = zf_receive(trans, trans.h)
            nv = zf_noise_variance(trans.h, 20.0)
            lmmse.append(psnr(x, bob_decode(enc, z_hat, SHAPE, gain(enc, x), nv).image))
            min_norm.append(psnr(x, bob_decode(enc, z_hat, SHAPE, gain(enc, x)).image))
        assert np.mean(lmmse) >= 20.0
        assert np.mean(lmmse) > np.mean(min_norm)

    def test_lmmse_is_exact_without_noise(self):
        enc = make_encoder("linear", SHAPE, 2, "1/2", seed=7)
        x = _face()
        result = bob_decode(enc, encode(enc, x), SHAPE, gain(enc, x), 1e-30)
        assert psnr(x, result.image) > 50.0

    def test_residual_is_against_gain_corrected_system(self):
        # Underdetermined but consistent: the minimum-norm solve fits exactly
        enc = make_encoder("linear", SHAPE, 2, "1/12", seed=7)
        x = _face()
        z = encode(enc, x)
        result = bob_decode(enc, z, SHAPE, gain(enc, x))
        assert result.residual < 1e-9 * float(np.vdot(z, z).real)

    def test_wrong_noise_variance_count(self):
        enc = make_encoder("linear", SHAPE, 2, "1/2", seed=7)
        with pytest.raises(InvalidArgumentError, match="noise variance"):
            bob_decode(enc, encode(enc, _face()), SHAPE, gain(enc, _face()), np.ones(3))

    def test_zero_codeword_is_degenerate(self):
        enc = make_encoder("linear", SHAPE, 2, "1/12", seed=7)
        result = bob_decode(enc, np.zeros(enc.length, dtype=complex), SHAPE)
        assert result.degenerate
        assert np.all(result.image == 0.0)

    def test_without_gain_output_in_range(self):
        enc = make_encoder("linear", SHAPE, 2, "1/12", seed=7)
        result = bob_decode(enc, encode(enc, _face()), SHAPE)
        assert result.image.shape == (3, *SHAPE)
        assert result.image.min() >= 0.0 and result.image.max() <= 1.0

    def test_wrong_gain_count(self):
        enc = make_encoder("linear", SHAPE, 2, "1/12", seed=7)
        with pytest.raises(InvalidArgumentError, match="gain"):
            bob_decode(enc, encode(enc, _face()), SHAPE, np.ones(3))

    def test_wrong_length(self):
        enc = make_encoder("linear", SHAPE, 2, "1/12", seed=7)
        with pytest.raises(InvalidArgumentError, match="Codeword length"):
            bob_decode(enc, np.ones(3, dtype=complex), SHAPE)
