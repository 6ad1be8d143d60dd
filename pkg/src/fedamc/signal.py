"""Synthetic modulated I/Q frames at a controlled SNR.

Every frame is built as ``x = s + e``: a pulse-shaped (or continuous-phase)
clean waveform ``s`` plus an additive noise waveform ``e`` scaled so that the
time-averaged power ratio hits the requested SNR exactly.  Frames are 2 x L
real matrices (row 0 in-phase, row 1 quadrature).
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateInputError,
    InfiniteSNRError,
    LengthError,
)

SNR_GRID: tuple[int, ...] = tuple(range(-20, 19, 2))
FRAME_LENGTH = 128
SAMPLES_PER_SYMBOL = 8
ROLLOFF = 0.35
RRC_SPAN = 8
GFSK_BT = 0.35
FSK_MOD_INDEX = 0.5


class ModulationScheme(enum.IntEnum):
    """Digital schemes; the integer value is the class label."""

    BPSK = 0
    QPSK = 1
    PSK8 = 2
    PAM4 = 3
    QAM16 = 4
    QAM64 = 5
    CPFSK = 6
    GFSK = 7

    @property
    def bits_per_symbol(self) -> int:
        return _BITS_PER_SYMBOL[self]

    @property
    def is_linear(self) -> bool:
        return self not in (ModulationScheme.CPFSK, ModulationScheme.GFSK)

    @classmethod
    def parse(cls, name: str | int) -> "ModulationScheme":
        if isinstance(name, (int, np.integer)):
            return cls(int(name))
        key = name.strip().upper().replace("-", "")
        aliases = {"8PSK": "PSK8", "16QAM": "QAM16", "64QAM": "QAM64", "4PAM": "PAM4"}
        key = aliases.get(key, key)
        try:
            return cls[key]
        except KeyError:
            raise ConfigurationError(f"unknown modulation scheme {name!r}") from None


_BITS_PER_SYMBOL = {
    ModulationScheme.BPSK: 1,
    ModulationScheme.QPSK: 2,
    ModulationScheme.PSK8: 3,
    ModulationScheme.PAM4: 2,
    ModulationScheme.QAM16: 4,
    ModulationScheme.QAM64: 6,
    ModulationScheme.CPFSK: 1,
    ModulationScheme.GFSK: 1,
}


def _gray(k: np.ndarray) -> np.ndarray:
    return k ^ (k >> 1)


def _gray_pam_levels(bits_per_axis: int) -> np.ndarray:
    """Unnormalized PAM levels indexed by the Gray-coded bit value."""
    m = 1 << bits_per_axis
    k = np.arange(m)
    levels = np.empty(m)
    levels[_gray(k)] = 2 * k - (m - 1)
    return levels


def _build_tables() -> dict[ModulationScheme, np.ndarray]:
    tables = {}
    tables[ModulationScheme.BPSK] = np.array([1.0 + 0j, -1.0 + 0j])
    # QPSK: independent Gray bit per rail
    rail = np.array([1.0, -1.0])
    tables[ModulationScheme.QPSK] = np.array(
        [rail[v >> 1] + 1j * rail[v & 1] for v in range(4)]
    ) / np.sqrt(2.0)
    psk8 = np.empty(8, dtype=complex)
    k = np.arange(8)
    psk8[_gray(k)] = np.exp(2j * np.pi * k / 8)
    tables[ModulationScheme.PSK8] = psk8
    pam4 = _gray_pam_levels(2)
    tables[ModulationScheme.PAM4] = (pam4 / np.sqrt(np.mean(pam4**2))).astype(complex)
    for scheme, per_axis in ((ModulationScheme.QAM16, 2), (ModulationScheme.QAM64, 3)):
        levels = _gray_pam_levels(per_axis)
        m = 1 << per_axis
        pts = np.array([levels[v >> per_axis] + 1j * levels[v & (m - 1)] for v in range(m * m)])
        tables[scheme] = pts / np.sqrt(np.mean(np.abs(pts) ** 2))
    return tables


CONSTELLATIONS = _build_tables()


def map_symbols(bits: Sequence[int] | np.ndarray, scheme: ModulationScheme) -> np.ndarray:
    """Map a bit sequence to constellation symbols (MSB-first within a symbol).

    For the continuous-phase schemes the result is the real +/-1 frequency
    symbol sequence, bit 0 -> +1.
    """
    scheme = ModulationScheme(scheme)
    bits = np.asarray(bits, dtype=np.int64).ravel()
    bps = scheme.bits_per_symbol
    if bits.size % bps:
        raise LengthError(
            f"{bits.size} bits is not a multiple of {bps} bits/symbol for {scheme.name}"
        )
    if not scheme.is_linear:
        return 1.0 - 2.0 * bits.astype(float)
    weights = 1 << np.arange(bps - 1, -1, -1)
    values = bits.reshape(-1, bps) @ weights
    return CONSTELLATIONS[scheme][values]


def rrc_taps(sps: int, rolloff: float, span: int = RRC_SPAN) -> np.ndarray:
    """Root-raised-cosine taps, ``span * sps + 1`` long, unit energy."""
    return _rrc_taps(int(sps), float(rolloff), int(span)).copy()


@functools.lru_cache(maxsize=32)
def _rrc_taps(sps: int, rolloff: float, span: int) -> np.ndarray:
    if sps < 2:
        raise ConfigurationError(f"samples per symbol must be >= 2, got {sps}")
    if not 0.0 <= rolloff <= 1.0:
        raise ConfigurationError(f"rolloff must lie in [0, 1], got {rolloff}")
    n = np.arange(-(span * sps) // 2, span * sps // 2 + 1)
    t = n / sps
    beta = rolloff
    h = np.empty(t.size)
    for i, ti in enumerate(t):
        if ti == 0.0:
            h[i] = 1.0 - beta + 4.0 * beta / np.pi
        elif beta > 0 and np.isclose(abs(ti), 1.0 / (4.0 * beta)):
            h[i] = (beta / np.sqrt(2.0)) * (
                (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta))
                + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta))
            )
        else:
            num = np.sin(np.pi * ti * (1 - beta)) + 4 * beta * ti * np.cos(np.pi * ti * (1 + beta))
            h[i] = num / (np.pi * ti * (1 - (4 * beta * ti) ** 2))
    return h / np.sqrt(np.sum(h**2))


def pulse_shape(
    symbols: np.ndarray, sps: int = SAMPLES_PER_SYMBOL, rolloff: float = ROLLOFF
) -> np.ndarray:
    """Zero-stuff ``symbols`` by ``sps`` and filter with RRC taps.

    The output is aligned to the filter delay and truncated to
    ``len(symbols) * sps`` samples.
    """
    taps = rrc_taps(sps, rolloff)
    symbols = np.asarray(symbols)
    up = np.zeros(symbols.size * sps, dtype=np.result_type(symbols, float))
    up[::sps] = symbols
    full = np.convolve(up, taps)
    delay = (taps.size - 1) // 2
    return full[delay : delay + up.size]


def _gaussian_taps(sps: int, bt: float, span: int = 4) -> np.ndarray:
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    h = np.exp(-2.0 * (np.pi * bt * t) ** 2 / np.log(2.0))
    return h / h.sum()


def fsk_waveform(
    freq_symbols: np.ndarray,
    sps: int = SAMPLES_PER_SYMBOL,
    mod_index: float = FSK_MOD_INDEX,
    gaussian_bt: float | None = None,
) -> np.ndarray:
    """Continuous-phase FSK; Gaussian frequency smoothing when ``gaussian_bt`` is set."""
    freq = np.repeat(np.asarray(freq_symbols, dtype=float), sps)
    if gaussian_bt is not None:
        freq = np.convolve(freq, _gaussian_taps(sps, gaussian_bt), mode="same")
    dphi = np.pi * mod_index * freq / sps
    dphi[0] = 0.0
    return np.exp(1j * np.cumsum(dphi))


# -- noise ------------------------------------------------------------------


class NoiseKind(enum.Enum):
    AWGN = "awgn"
    SINUSOIDAL_MIX = "sinusoidal_mix"


@dataclass(frozen=True)
class NoiseModel:
    """AWGN, or a sum of tones ``A sin(w t + phi)`` (w in rad/sample)."""

    kind: NoiseKind = NoiseKind.AWGN
    components: tuple[tuple[float, float, float], ...] = ()

    def waveform(self, length: int, rng: np.random.Generator) -> np.ndarray:
        """Unscaled complex noise waveform of ``length`` samples."""
        if self.kind is NoiseKind.AWGN:
            return rng.standard_normal(length) + 1j * rng.standard_normal(length)
        t = np.arange(length)
        out = np.zeros(length, dtype=complex)
        for amp, omega, phase in self.components:
            out += amp * (np.sin(omega * t + phase) + 1j * np.cos(omega * t + phase))
        return out


AWGN = NoiseModel()


@dataclass(frozen=True)
class ImpairmentSpec:
    max_phase_offset: float = 2.0 * np.pi
    max_cfo: float = 0.01
    enabled: bool = True

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if not self.enabled:
            return x
        phase = rng.uniform(0.0, self.max_phase_offset)
        cfo = rng.uniform(-self.max_cfo, self.max_cfo)
        n = np.arange(x.size)
        return x * np.exp(1j * (phase + 2.0 * np.pi * cfo * n))


NO_IMPAIRMENTS = ImpairmentSpec(enabled=False)


# -- frames -----------------------------------------------------------------


def to_iq(x: np.ndarray) -> np.ndarray:
    """Complex vector -> 2 x L real matrix."""
    return np.stack([x.real, x.imag]).astype(float)


def to_complex(iq: np.ndarray) -> np.ndarray:
    iq = np.asarray(iq)
    if np.iscomplexobj(iq):
        return iq
    return iq[0] + 1j * iq[1]


def power(x: np.ndarray) -> float:
    """Mean power per (complex) sample.

    Complex input and 2 x L I/Q matrices give ``mean(|x|^2)``; any other real
    array gives ``mean(x^2)``.
    """
    x = np.asarray(x)
    if np.iscomplexobj(x):
        return float(np.mean(np.abs(x) ** 2))
    if x.ndim == 2 and x.shape[0] == 2:
        return float(np.sum(x.astype(float) ** 2) / x.shape[1])
    return float(np.mean(x.astype(float) ** 2))


def measure_snr(signal: np.ndarray, noise: np.ndarray) -> float:
    """``10 log10(P_signal / P_noise)`` over the frame interval."""
    signal = np.asarray(signal)
    noise = np.asarray(noise)
    if signal.shape != noise.shape:
        raise LengthError(f"signal shape {signal.shape} != noise shape {noise.shape}")
    p_noise = power(noise)
    if p_noise == 0.0:
        raise InfiniteSNRError("noise power is zero; SNR is infinite")
    return 10.0 * np.log10(power(signal) / p_noise)


def noise_for_snr(
    signal: np.ndarray,
    target_snr_db: float,
    rng: np.random.Generator,
    model: NoiseModel = AWGN,
) -> np.ndarray:
    """Noise shaped like ``signal`` whose empirical power gives ``target_snr_db``.

    The drawn waveform is rescaled to the exact target power, so the measured
    SNR matches the target up to floating point error on every frame.
    """
    signal = np.asarray(signal)
    p_signal = power(signal)
    if p_signal == 0.0:
        raise DegenerateInputError("signal has zero power")
    if np.iscomplexobj(signal):
        raw = model.waveform(signal.size, rng).reshape(signal.shape)
    elif signal.ndim == 2 and signal.shape[0] == 2:
        raw = to_iq(model.waveform(signal.shape[1], rng))
    else:
        raw = model.waveform(signal.size, rng).real.reshape(signal.shape)
    p_raw = power(raw)
    if p_raw == 0.0:
        raise DegenerateInputError("noise model produced an all-zero waveform")
    p_target = p_signal / 10.0 ** (target_snr_db / 10.0)
    return raw * np.sqrt(p_target / p_raw)


def awgn_for_snr(signal: np.ndarray, target_snr_db: float, rng: np.random.Generator) -> np.ndarray:
    return noise_for_snr(signal, target_snr_db, rng, AWGN)


@dataclass(frozen=True)
class SignalFrame:
    iq: np.ndarray
    label: int
    snr_db: int
    clean: np.ndarray | None = field(default=None, compare=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SignalFrame):
            return NotImplemented
        return (
            self.label == other.label
            and self.snr_db == other.snr_db
            and np.array_equal(self.iq, other.iq)
        )

    __hash__ = None  # type: ignore[assignment]


def normalize_frame(frame: SignalFrame) -> SignalFrame:
    p = power(frame.iq)
    if p == 0.0:
        raise DegenerateInputError("cannot normalize an all-zero frame")
    scale = 1.0 / np.sqrt(p)
    clean = None if frame.clean is None else frame.clean * scale
    return replace(frame, iq=frame.iq * scale, clean=clean)


def clean_waveform(
    scheme: ModulationScheme,
    rng: np.random.Generator,
    length: int = FRAME_LENGTH,
    sps: int = SAMPLES_PER_SYMBOL,
) -> np.ndarray:
    scheme = ModulationScheme(scheme)
    n_sym = length // sps
    if n_sym * sps != length:
        raise ConfigurationError(f"frame length {length} is not a multiple of sps={sps}")
    bits = rng.integers(0, 2, size=n_sym * scheme.bits_per_symbol)
    symbols = map_symbols(bits, scheme)
    if scheme is ModulationScheme.CPFSK:
        return fsk_waveform(symbols, sps)
    if scheme is ModulationScheme.GFSK:
        return fsk_waveform(symbols, sps, gaussian_bt=GFSK_BT)
    return pulse_shape(symbols, sps, ROLLOFF)


def synthesize_frame(
    scheme: ModulationScheme,
    snr_db: int,
    impair: ImpairmentSpec,
    rng: np.random.Generator,
    *,
    length: int = FRAME_LENGTH,
    noise: NoiseModel = AWGN,
) -> SignalFrame:
    """One labeled frame: clean waveform, impairments, noise, then normalization."""
    if snr_db not in SNR_GRID:
        raise ConfigurationError(f"SNR {snr_db} dB is not on the grid {SNR_GRID[0]}..{SNR_GRID[-1]} step 2")
    scheme = ModulationScheme(scheme)
    clean = impair.apply(clean_waveform(scheme, rng, length), rng)
    eps = noise_for_snr(clean, snr_db, rng, noise)
    frame = SignalFrame(
        iq=to_iq(clean + eps), label=int(scheme), snr_db=int(snr_db), clean=to_iq(clean)
    )
    return normalize_frame(frame)


def frame_rng(seed: int, scheme: int, snr_db: int, index: int) -> np.random.Generator:
    """Independent stream per (master seed, scheme, SNR, frame index)."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed), int(scheme), int(snr_db) + 128, int(index)])
    )
