"""Echo frames, four-path echo profiles, acoustic flow and model windows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window, hilbert

from .channel import MicStreams
from .errors import DataError
from .signal import (
    DEFAULT_TAPS,
    LEFT_BAND,
    RIGHT_BAND,
    SAMPLE_RATE,
    SWEEP_SAMPLES,
    FilterKernel,
    Waveform,
    design_bandpass,
    filter_samples,
)

CHANNELS = ("TL->RL", "TL->RR", "TR->RL", "TR->RR")
WINDOW_LAGS = 295
WINDOW_FRAMES = 166
HOP_FRAMES = 83
FACE_LAGS = 50
PROFILE_DETECTOR = "analytic"
PROFILE_TAPER = "hann"


@dataclass
class EchoFrame:
    values: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise DataError("echo frame contains non-finite values")


@dataclass
class EchoProfile:
    """Per-path correlation frames shaped ``(channel, lag, frame)``.

    ``data`` is complex for analytic profiles (envelope = magnitude, carrier
    phase kept so motion shows up in the flow) and real otherwise.
    """

    data: np.ndarray
    frame_rate: float = SAMPLE_RATE / SWEEP_SAMPLES

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] < 1:
            raise DataError(f"echo profile must be (channels, lags, frames>=1), got {self.data.shape}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[2]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)


@dataclass
class FlowWindow:
    data: np.ndarray
    start_time: float = 0.0
    frame_rate: float = SAMPLE_RATE / SWEEP_SAMPLES

    @property
    def duration(self) -> float:
        return self.data.shape[-1] / self.frame_rate


def compute_echo_frame(tx_chirp: Waveform, rx_segment: Waveform) -> EchoFrame:
    """``values[lag] = |sum_i tx[i] * rx[(i + lag) mod L]|`` for ``lag < N``.

    ``L`` is the segment length.  Segments of at least ``2N - 1`` samples never
    wrap, so this is the plain linear correlation; a single-sweep segment
    (``L == N``) gives the circular correlation that matches a periodic
    emission.  Computed in the frequency domain.
    """
    n = len(tx_chirp)
    if n == 0 or len(rx_segment) < n:
        raise DataError(f"rx segment ({len(rx_segment)}) shorter than the chirp ({n})")
    return EchoFrame(np.abs(_fast_xcorr(tx_chirp.samples, rx_segment.samples[None, :])[0]))


def _fast_xcorr(tx: np.ndarray, segments: np.ndarray, detector: str = "real",
                    taper: str | None = None) -> np.ndarray:
    """Raw correlation for lags ``[0, N)`` of every row of ``segments``.

    Rows longer than ``2N - 1`` samples give the linear correlation; shorter
    rows wrap.  Real for the ``real`` detector, complex for ``analytic``.
    """
    n = tx.size
    length = segments.shape[-1]
    ref = reference_signal(tx, detector, taper)
    if detector == "real":
        spec_tx = np.conj(np.fft.rfft(ref, length))
        corr = np.fft.irfft(np.fft.rfft(segments, axis=-1) * spec_tx, length, axis=-1)
    else:
        spec_tx = np.conj(np.fft.fft(ref, length))
        corr = np.fft.ifft(np.fft.fft(segments, axis=-1) * spec_tx, axis=-1)
    return corr[..., :n]


def reference_signal(tx: np.ndarray, detector: str = "real", taper: str | None = None) -> np.ndarray:
    """Correlation reference for a sweep.

    ``real`` is the sweep itself.  ``analytic`` is its analytic signal (one
    period of a periodic emission), so the correlation magnitude is the echo
    envelope without the carrier ripple that moves the real-valued peak by a
    few lags.  ``taper`` names a scipy window applied across the sweep to
    lower range sidelobes at the cost of a wider mainlobe.
    """
    tx = np.asarray(tx, dtype=np.float64)
    if detector == "real":
        ref = tx
    elif detector == "analytic":
        ref = hilbert(tx)
    else:
        raise DataError(f"unknown detector {detector!r}; expected real or analytic")
    if taper:
        ref = ref * get_window(taper, tx.size, fftbins=False)
    return ref


def default_kernels(sample_rate: float = SAMPLE_RATE, n_taps: int = DEFAULT_TAPS):
    return (
        design_bandpass(*LEFT_BAND, sample_rate=sample_rate, n_taps=n_taps),
        design_bandpass(*RIGHT_BAND, sample_rate=sample_rate, n_taps=n_taps),
    )


def _filter_periodic_edges(taps: np.ndarray, x: np.ndarray, n: int) -> np.ndarray:
    """Filter ``x`` plus one trailing sweep, treating the emission as periodic at both ends.

    The first sweep is repeated before the stream and the last one twice
    after it, so the filter sees a continuous emission instead of zeros and
    the final frame has the samples its linear correlation reaches into.
    """
    padded = np.concatenate([x[:n], x, x[-n:], x[-n:]])
    return filter_samples(taps, padded)[n : n + x.size + n]


def compute_echo_profile(
    tx_left: Waveform,
    tx_right: Waveform,
    mics: MicStreams,
    kernels: tuple[FilterKernel, FilterKernel] | None = None,
    normalize: bool = False,
    detector: str = PROFILE_DETECTOR,
    taper: str | None = PROFILE_TAPER,
) -> EchoProfile:
    """Band-filter each microphone and correlate every sweep against both chirps.

    Channel order is TL->RL, TL->RR, TR->RL, TR->RR.  Frame ``f`` is the linear
    correlation of the reference with the ``2N`` samples starting at sweep
    ``f``, so an echo of that sweep is captured whole even while its delay
    drifts.  The default reference is the Hann-tapered analytic chirp and the
    frames are complex; ``detector="real", taper=None`` gives the plain
    ``|sum tx * rx|`` frames of :func:`compute_echo_frame`.  With ``normalize``
    every frame of every channel is divided by its largest magnitude.
    """
    n = len(tx_left)
    if len(tx_right) != n:
        raise DataError("transmit chirps must have equal length")
    if len(mics.left) != len(mics.right):
        raise DataError("microphone streams must have equal length")
    n_frames = len(mics.left) // n
    if n_frames < 1:
        raise DataError(f"streams shorter than one sweep ({len(mics.left)} < {n} samples)")
    kl, kr = kernels if kernels is not None else default_kernels(mics.left.sample_rate)
    for k in (kl, kr):
        if not np.isclose(k.sample_rate, mics.left.sample_rate):
            raise DataError("filter and stream sample rates differ")

    used = n_frames * n
    out = np.empty((4, n, n_frames), dtype=np.float64 if detector == "real" else np.complex128)
    mic_samples = (mics.left.samples[:used], mics.right.samples[:used])
    starts = np.arange(n_frames)[:, None] * n + np.arange(2 * n)[None, :]
    for c, (kernel, tx, mic) in enumerate(
        [(kl, tx_left, 0), (kl, tx_left, 1), (kr, tx_right, 0), (kr, tx_right, 1)]
    ):
        filtered = _filter_periodic_edges(kernel.taps, mic_samples[mic], n)
        corr = _fast_xcorr(tx.samples, filtered[starts], detector, taper).T
        out[c] = np.abs(corr) if detector == "real" else corr
    if normalize:
        peak = np.abs(out).max(axis=1, keepdims=True)
        out = np.divide(out, peak, out=np.zeros_like(out), where=peak > 0)
    return EchoProfile(out, mics.left.sample_rate / n)


def acoustic_flow(profile: EchoProfile) -> EchoProfile:
    """Absolute difference of consecutive echo frames (``F - 1`` frames out).

    On complex profiles this is the magnitude of the complex difference, so a
    reflector that only shifts its carrier phase still registers while
    static echoes cancel exactly.
    """
    if profile.n_frames < 2:
        raise DataError("acoustic flow needs at least two echo frames")
    return EchoProfile(np.abs(np.diff(profile.data, axis=2)), profile.frame_rate)


def extract_windows(
    flow: EchoProfile,
    lag_crop: int = WINDOW_LAGS,
    win_frames: int = WINDOW_FRAMES,
    hop_frames: int = HOP_FRAMES,
) -> list[FlowWindow]:
    if hop_frames < 1 or win_frames < 1:
        raise DataError("window and hop lengths must be positive")
    if flow.n_frames < win_frames:
        raise DataError(f"flow has {flow.n_frames} frames, a window needs {win_frames}")
    if flow.data.shape[1] < lag_crop:
        raise DataError(f"flow has only {flow.data.shape[1]} lags, crop needs {lag_crop}")
    count = (flow.n_frames - win_frames) // hop_frames + 1
    out = []
    for i in range(count):
        s = i * hop_frames
        block = np.ascontiguousarray(flow.data[:, :lag_crop, s : s + win_frames], dtype=np.float32)
        out.append(FlowWindow(block, s / flow.frame_rate, flow.frame_rate))
    return out


def crop_region(window: FlowWindow | np.ndarray, region: str, face_lags: int = FACE_LAGS):
    """Zero the lags outside ``region`` ('face' = first ``face_lags`` rows, 'body' = the rest, 'full')."""
    data = window.data if isinstance(window, FlowWindow) else np.asarray(window)
    out = data.copy()
    if region == "face":
        out[..., face_lags:, :] = 0
    elif region == "body":
        out[..., :face_lags, :] = 0
    elif region != "full":
        raise DataError(f"unknown region {region!r}; expected face, body or full")
    if isinstance(window, FlowWindow):
        return FlowWindow(out, window.start_time, window.frame_rate)
    return out


def find_sweep_offset(tx_chirp: Waveform, rx: Waveform, n_sweeps: int = 2) -> int:
    """Sample offset that puts the strongest echo in the first ``n_sweeps`` sweeps at lag 0."""
    n = len(tx_chirp)
    span = n * n_sweeps
    if len(rx) < span:
        raise DataError(f"need {span} samples to find sweep alignment")
    env = np.abs(_fast_xcorr(tx_chirp.samples, rx.samples[None, :span], "analytic")[0])
    return int(np.argmax(env))


def align_streams(mics: MicStreams, offset: int) -> MicStreams:
    left = Waveform(mics.left.samples[offset:], mics.left.sample_rate)
    right = Waveform(mics.right.samples[offset:], mics.right.sample_rate)
    return MicStreams(left, right, [])


def profile_from_streams(tx_left, tx_right, mics, kernels=None, normalize=False, **detector):
    """Echo profile followed by acoustic flow."""
    return acoustic_flow(compute_echo_profile(tx_left, tx_right, mics, kernels, normalize, **detector))
