"""Array responses, DFT beam codebook, multipath channels and average rates.

Conventions: half-wavelength ULA, elevation ignored.  The codebook stores
unit-norm steering vectors; the beamformer actually applied in the rate
expression ``|g_q^T c|`` is the complex conjugate of a codebook row, so a
beam aimed at the channel's direction attains ``|g^T c| = sqrt(N_A) |gamma|``.
Beam indices exposed by this module are 1-based.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class BeamCodebook:
    num_antennas: int
    num_beams: int
    weights: np.ndarray  # (num_beams, num_antennas) complex, unit-norm rows

    @property
    def beamformers(self) -> np.ndarray:
        """Vectors applied as ``g^T c`` (conjugated rows)."""
        return np.conj(self.weights)

    def beamformer(self, index: int) -> np.ndarray:
        if not 1 <= index <= self.num_beams:
            raise IndexError(f"beam index {index} outside 1..{self.num_beams}")
        return np.conj(self.weights[index - 1])

    def design_sines(self) -> np.ndarray:
        i = np.arange(1, self.num_beams + 1)
        return -1.0 + (2.0 * i - 1.0) / self.num_beams


@dataclass(frozen=True)
class PathSpec:
    gain: complex
    azimuth_rad: float
    elevation_rad: float = 0.0
    delay_s: float = 0.0


@dataclass(frozen=True)
class ChannelState:
    subcarrier_vectors: np.ndarray  # (Q, N_A) complex
    paths: tuple[PathSpec, ...] = field(default_factory=tuple)

    @property
    def num_subcarriers(self) -> int:
        return self.subcarrier_vectors.shape[0]

    @property
    def num_antennas(self) -> int:
        return self.subcarrier_vectors.shape[1]


@dataclass(frozen=True)
class RateParams:
    symbol_power: float = 1.0
    noise_variance: float = 0.1
    num_subcarriers: int = 16

    def __post_init__(self):
        if self.symbol_power <= 0 or self.noise_variance <= 0 or self.num_subcarriers < 1:
            raise ValueError("rate parameters must be strictly positive")

    @property
    def snr(self) -> float:
        return self.symbol_power / self.noise_variance


def array_response(azimuth_rad: float, elevation_rad: float, num_antennas: int) -> np.ndarray:
    """Steering vector ``exp(j*pi*n*sin(az))`` for n = 0..N_A-1."""
    if not -np.pi / 2 < azimuth_rad < np.pi / 2:
        raise ValueError(f"azimuth {azimuth_rad} outside (-pi/2, pi/2)")
    if num_antennas < 1:
        raise ValueError("num_antennas must be positive")
    n = np.arange(num_antennas)
    return np.exp(1j * np.pi * n * np.sin(azimuth_rad))


def _steering_from_sine(sines: np.ndarray, num_antennas: int) -> np.ndarray:
    n = np.arange(num_antennas)
    return np.exp(1j * np.pi * np.outer(sines, n))


def build_codebook(num_antennas: int, num_beams: int) -> BeamCodebook:
    """Oversampled DFT codebook on the grid ``sin(theta_i) = -1 + (2i-1)/L``."""
    if num_antennas < 1 or num_beams < 1:
        raise ValueError("num_antennas and num_beams must be positive")
    i = np.arange(1, num_beams + 1)
    sines = -1.0 + (2.0 * i - 1.0) / num_beams
    weights = _steering_from_sine(sines, num_antennas) / np.sqrt(num_antennas)
    weights.setflags(write=False)
    return BeamCodebook(num_antennas, num_beams, weights)


def synthesize_channel(
    los: PathSpec,
    nlos: list[PathSpec] | tuple[PathSpec, ...],
    num_subcarriers: int,
    num_antennas: int,
    subcarrier_spacing_hz: float = 10e6,
) -> ChannelState:
    """Per-subcarrier path sum with delay phase ``exp(-j 2 pi q tau_p df)``.

    The first path is the line-of-sight path and must be strictly stronger
    than every NLOS path.
    """
    if los is None:
        raise ValueError("channel needs at least one path")
    if num_subcarriers < 1:
        raise ValueError("num_subcarriers must be positive")
    nlos = tuple(nlos)
    for p in nlos:
        if not abs(los.gain) > abs(p.gain):
            raise ValueError("LOS gain must dominate every NLOS gain")
    paths = (los,) + nlos
    q = np.arange(num_subcarriers)
    g = np.zeros((num_subcarriers, num_antennas), dtype=complex)
    for p in paths:
        a = array_response(p.azimuth_rad, p.elevation_rad, num_antennas)
        phase = np.exp(-2j * np.pi * q * p.delay_s * subcarrier_spacing_hz)
        g += p.gain * np.outer(phase, a)
    g.setflags(write=False)
    return ChannelState(g, paths)


def _rates_for(g: np.ndarray, beams: np.ndarray, snr: float) -> np.ndarray:
    # g: (Q, N), beams: (B, N) -> (B,)
    resp = g @ beams.T
    return np.mean(np.log2(1.0 + snr * np.abs(resp) ** 2), axis=0)


def average_rate(channel: ChannelState, beam: np.ndarray, params: RateParams) -> float:
    """Mean over subcarriers of ``log2(1 + P_s/sigma^2 |g_q^T beam|^2)``."""
    beam = np.asarray(beam)
    if beam.ndim != 1 or beam.shape[0] != channel.num_antennas:
        raise ValueError(
            f"beam length {beam.shape} does not match {channel.num_antennas} antennas"
        )
    return float(_rates_for(channel.subcarrier_vectors, beam[None, :], params.snr)[0])


def codebook_rates(channel: ChannelState, codebook: BeamCodebook, params: RateParams) -> np.ndarray:
    """Average rate of every codebook beam, shape (L,), position i-1 for beam i."""
    if codebook.num_antennas != channel.num_antennas:
        raise ValueError("codebook and channel antenna counts differ")
    return _rates_for(channel.subcarrier_vectors, codebook.beamformers, params.snr)


def optimal_beam_index(channel: ChannelState, codebook: BeamCodebook, params: RateParams) -> int:
    # np.argmax returns the first maximum: lowest-index tie-break
    return int(np.argmax(codebook_rates(channel, codebook, params))) + 1


def rate_gap(
    channel: ChannelState, chosen_beam_index: int, codebook: BeamCodebook, params: RateParams
) -> tuple[float, float, float]:
    """Return ``(optimal rate, chosen rate, optimal - chosen)``."""
    if not 1 <= chosen_beam_index <= codebook.num_beams:
        raise IndexError(f"beam index {chosen_beam_index} outside 1..{codebook.num_beams}")
    rates = codebook_rates(channel, codebook, params)
    best = float(rates.max())
    chosen = float(rates[chosen_beam_index - 1])
    return best, chosen, max(best - chosen, 0.0)
