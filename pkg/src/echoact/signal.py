"""FMCW chirp synthesis, range arithmetic, and FIR bandpass filtering."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import oaconvolve

from .errors import ConfigError, DataError

SPEED_OF_SOUND = 343.0  # m/s, dry air at 20 C
SAMPLE_RATE = 50_000.0
SWEEP_SAMPLES = 600

LEFT_BAND = (18_000.0, 21_500.0)
RIGHT_BAND = (21_500.0, 24_500.0)
DEFAULT_TAPS = 255


@dataclass(frozen=True)
class PhysicalConstants:
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        if not self.speed_of_sound > 0:
            raise ConfigError("speed of sound must be positive")


@dataclass(frozen=True)
class ChirpConfig:
    """Linear up-chirp occupying one sweep period of ``n_samples``."""

    f_start: float = LEFT_BAND[0]
    f_end: float = LEFT_BAND[1]
    n_samples: int = SWEEP_SAMPLES
    sample_rate: float = SAMPLE_RATE
    amplitude: float = 1.0

    def validate(self) -> None:
        nyq = self.sample_rate / 2
        if int(self.n_samples) != self.n_samples or self.n_samples <= 0:
            raise ConfigError(f"n_samples must be a positive integer, got {self.n_samples}")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        # f_start == f_end is accepted: a degenerate zero-bandwidth sweep is a pure tone
        if not (0 < self.f_start <= self.f_end < nyq):
            raise ConfigError(
                f"need 0 < f_start <= f_end < Nyquist ({nyq:g} Hz), "
                f"got {self.f_start:g}..{self.f_end:g}"
            )
        if not 0.0 <= self.amplitude <= 1.0:
            raise ConfigError("amplitude must lie in [0, 1]")

    @property
    def bandwidth(self) -> float:
        return self.f_end - self.f_start

    @property
    def sweep_period(self) -> float:
        return self.n_samples / self.sample_rate

    @property
    def band(self) -> tuple[float, float]:
        return (self.f_start, self.f_end)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: float = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError("waveform samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FilterKernel:
    taps: np.ndarray
    band: tuple[float, float]
    sample_rate: float = SAMPLE_RATE
    group_delay: int = field(init=False)

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.size % 2 == 0:
            raise ConfigError("filter kernels must have an odd number of taps")
        self.group_delay = (self.taps.size - 1) // 2


def sweep_period(n_samples: int = SWEEP_SAMPLES, sample_rate: float = SAMPLE_RATE) -> float:
    return n_samples / sample_rate


def range_resolution(
    sample_rate: float = SAMPLE_RATE, speed_of_sound: float = SPEED_OF_SOUND, lag_step: float = 1.0
) -> float:
    """Round-trip range covered by ``lag_step`` samples of correlation lag, in metres."""
    return speed_of_sound * lag_step / (2.0 * sample_rate)


def max_range(
    n_samples: int = SWEEP_SAMPLES, sample_rate: float = SAMPLE_RATE, speed_of_sound: float = SPEED_OF_SOUND
) -> float:
    return n_samples * range_resolution(sample_rate, speed_of_sound)


def lag_to_distance(lag, sample_rate: float = SAMPLE_RATE, speed_of_sound: float = SPEED_OF_SOUND):
    return np.asarray(lag) * speed_of_sound / (2.0 * sample_rate)


def distance_to_lag(distance, sample_rate: float = SAMPLE_RATE, speed_of_sound: float = SPEED_OF_SOUND):
    """Fractional round-trip delay in samples for a reflector at ``distance`` metres."""
    return 2.0 * np.asarray(distance) * sample_rate / speed_of_sound


def generate_chirp(cfg: ChirpConfig) -> Waveform:
    """Synthesize one sweep of a continuous-phase linear chirp with zero initial phase.

    The instantaneous frequency is ``f_start`` at sample 0 and rises linearly,
    reaching ``f_end`` one sample past the end of the sweep so that tiling the
    sweep back to back gives an uninterrupted emission.
    """
    cfg.validate()
    n = int(cfg.n_samples)
    t = np.arange(n) / cfg.sample_rate
    rate = cfg.bandwidth / cfg.sweep_period
    phase = 2.0 * np.pi * (cfg.f_start * t + 0.5 * rate * t * t)
    return Waveform(cfg.amplitude * np.cos(phase), cfg.sample_rate)


def design_bandpass(
    low: float, high: float, sample_rate: float = SAMPLE_RATE, n_taps: int = DEFAULT_TAPS
) -> FilterKernel:
    """Blackman-windowed sinc bandpass with cutoffs at the band edges.

    Taps are scaled so the gain at the band centre is exactly 0 dB.
    """
    if n_taps <= 0 or n_taps % 2 == 0:
        raise ConfigError(f"n_taps must be a positive odd integer, got {n_taps}")
    if not (0 < low < high < sample_rate / 2):
        raise ConfigError(f"invalid band {low:g}..{high:g} Hz for sample rate {sample_rate:g}")
    m = np.arange(n_taps) - (n_taps - 1) / 2
    fl, fh = low / sample_rate, high / sample_rate
    taps = 2 * fh * np.sinc(2 * fh * m) - 2 * fl * np.sinc(2 * fl * m)
    taps *= np.blackman(n_taps) if n_taps > 1 else 1.0
    centre_gain = np.abs(frequency_response(taps, [(low + high) / 2], sample_rate))[0]
    return FilterKernel(taps / centre_gain, (low, high), sample_rate)


def frequency_response(taps, freqs, sample_rate: float = SAMPLE_RATE) -> np.ndarray:
    """Complex DTFT of ``taps`` evaluated at ``freqs`` (Hz)."""
    taps = np.asarray(taps, dtype=np.float64)
    w = 2 * np.pi * np.asarray(freqs, dtype=np.float64)[:, None] / sample_rate
    return np.exp(-1j * w * np.arange(taps.size)[None, :]) @ taps


def apply_filter(kernel: FilterKernel, signal: Waveform) -> Waveform:
    """Filter ``signal`` and remove the kernel's group delay (same-length output)."""
    if not np.isclose(kernel.sample_rate, signal.sample_rate):
        raise DataError(
            f"sample-rate mismatch: kernel {kernel.sample_rate:g} Hz, signal {signal.sample_rate:g} Hz"
        )
    return Waveform(filter_samples(kernel.taps, signal.samples), signal.sample_rate)


def filter_samples(taps: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x.size == 0:
        return x.copy()
    full = oaconvolve(x, taps, mode="full", axes=-1)
    delay = (taps.size - 1) // 2
    return full[..., delay : delay + x.shape[-1]]


def default_chirps(
    left_band: tuple[float, float] = LEFT_BAND,
    right_band: tuple[float, float] = RIGHT_BAND,
    n_samples: int = SWEEP_SAMPLES,
    sample_rate: float = SAMPLE_RATE,
    amplitude: float = 1.0,
) -> tuple[ChirpConfig, ChirpConfig]:
    return (
        ChirpConfig(left_band[0], left_band[1], n_samples, sample_rate, amplitude),
        ChirpConfig(right_band[0], right_band[1], n_samples, sample_rate, amplitude),
    )
