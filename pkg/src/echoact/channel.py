"""Moving-reflector acoustic channel used as the ground-truth oracle.

Each microphone stream is the sum, over reflectors and over both
transmitters, of the periodic transmit signal delayed by the round-trip
time ``2 d(t) / C``, scaled by reflectivity, inverse-square spreading and a
per-path gain.  Noise and interference tones are added last.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, ClassVar

import numpy as np

from .errors import ConfigError, DataError
from .signal import SPEED_OF_SOUND, Waveform, distance_to_lag, max_range

SPREADING_FLOOR_M = 0.05
INTERP_TAPS = 8
OVERSAMPLE = 16
PATHS = ("TL->RL", "TL->RR", "TR->RL", "TR->RR")


# --------------------------------------------------------------------------
# trajectories


class Trajectory:
    """Distance (m) as a function of time (s); subclasses are parametric and serializable."""

    kind: ClassVar[str] = ""
    registry: ClassVar[dict[str, type["Trajectory"]]] = {}

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        Trajectory.registry[cls.kind] = cls

    def __call__(self, t: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict[str, str]:
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, tuple):
                out[k] = ",".join(repr(float(x)) for x in v)
            else:
                out[k] = repr(float(v))
        return out

    @classmethod
    def from_params(cls, kind: str, params: dict[str, str]) -> "Trajectory":
        try:
            sub = cls.registry[kind]
        except KeyError:
            raise DataError(f"unknown trajectory kind {kind!r}") from None
        kw = {}
        for f in fields(sub):
            name = f.name
            if name not in params:
                raise DataError(f"trajectory {kind!r} missing parameter {name!r}")
            raw = params[name]
            if "tuple" in str(f.type):
                kw[name] = tuple(float(x) for x in raw.split(",") if x.strip())
            else:
                kw[name] = float(raw)
        return sub(**kw)


@dataclass(frozen=True)
class Static(Trajectory):
    kind: ClassVar[str] = "static"
    distance: float

    def __call__(self, t):
        return np.full(np.shape(t), self.distance, dtype=np.float64)


@dataclass(frozen=True)
class Sine(Trajectory):
    kind: ClassVar[str] = "sine"
    center: float
    amplitude: float
    freq_hz: float
    phase: float = 0.0

    def __call__(self, t):
        return self.center + self.amplitude * np.sin(2 * np.pi * self.freq_hz * np.asarray(t) + self.phase)


@dataclass(frozen=True)
class SumOfSines(Trajectory):
    kind: ClassVar[str] = "sines"
    center: float
    amplitudes: tuple[float, ...]
    freqs_hz: tuple[float, ...]
    phases: tuple[float, ...]

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        d = np.full(t.shape, self.center)
        for a, f, p in zip(self.amplitudes, self.freqs_hz, self.phases):
            d = d + a * np.sin(2 * np.pi * f * t + p)
        return d


@dataclass(frozen=True)
class Lift(Trajectory):
    """Raised-cosine excursion from ``rest`` to ``peak`` and back, repeating every ``period`` s."""

    kind: ClassVar[str] = "lift"
    rest: float
    peak: float
    period: float
    duty: float = 0.6
    offset: float = 0.0

    def __call__(self, t):
        ph = np.mod(np.asarray(t, dtype=np.float64) - self.offset, self.period) / self.period
        inside = ph < self.duty
        shape = np.where(inside, 0.5 - 0.5 * np.cos(2 * np.pi * ph / self.duty), 0.0)
        return self.rest + (self.peak - self.rest) * shape


@dataclass(frozen=True)
class Jerks(Trajectory):
    """Gaussian displacement pulses of ``depth`` metres centred at ``times``."""

    kind: ClassVar[str] = "jerks"
    base: float
    depth: float
    width: float
    times: tuple[float, ...]

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        d = np.full(t.shape, self.base)
        for tc in self.times:
            d = d + self.depth * np.exp(-0.5 * ((t - tc) / self.width) ** 2)
        return d


# --------------------------------------------------------------------------
# scene


@dataclass
class Reflector:
    trajectory: Callable[[np.ndarray], np.ndarray]
    reflectivity: float = 1.0
    label: str = "reflector"
    path_gains: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.reflectivity <= 1.0:
            raise ConfigError(f"reflectivity must lie in [0, 1], got {self.reflectivity}")
        if len(self.path_gains) != 4:
            raise ConfigError("path_gains needs one gain per transmission path (4)")
        self.path_gains = tuple(float(g) for g in self.path_gains)


@dataclass
class Scene:
    reflectors: list[Reflector] = field(default_factory=list)
    duration: float = 1.0
    snr_db: float | None = None
    interference: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.duration > 0:
            raise ConfigError("scene duration must be positive")


@dataclass(frozen=True)
class TruthEntry:
    sweep: int
    label: str
    lags: tuple[int, int, int, int]
    clamped: bool = False


@dataclass
class MicStreams:
    left: Waveform
    right: Waveform
    truth: list[TruthEntry]

    def __post_init__(self):
        if len(self.left) != len(self.right):
            raise DataError("microphone streams must have equal length")

    def as_array(self) -> np.ndarray:
        return np.stack([self.left.samples, self.right.samples])


def spreading_gain(d: np.ndarray) -> np.ndarray:
    """Inverse-square amplitude loss, normalised to 1 at the floor distance."""
    return (SPREADING_FLOOR_M / np.maximum(d, SPREADING_FLOOR_M)) ** 2


def _interp_kernel(z: np.ndarray) -> np.ndarray:
    half = INTERP_TAPS / 2
    win = 0.42 + 0.5 * np.cos(np.pi * z / half) + 0.08 * np.cos(2 * np.pi * z / half)
    return np.where(np.abs(z) < half, np.sinc(z) * win, 0.0)


def _oversample_periodic(x: np.ndarray, factor: int) -> np.ndarray:
    """Band-limited periodic interpolation of one period onto a ``factor``-times finer grid."""
    n = x.size
    spec = np.fft.rfft(x)
    m = n * factor
    big = np.zeros(m // 2 + 1, dtype=complex)
    big[: spec.size] = spec
    if n % 2 == 0:
        # split the Nyquist bin so the result stays real and exact at the original samples
        big[n // 2] *= 0.5
    return np.fft.irfft(big, m) * factor


def delayed_periodic(period: np.ndarray, n_out: int, delay: np.ndarray) -> np.ndarray:
    """Samples ``x(n - delay[n])`` of the periodic signal whose one period is ``period``.

    Fractional delays use an 8-tap Blackman-windowed sinc applied on a
    16x oversampled copy of the period, which keeps the interpolation accurate
    for content close to the Nyquist frequency.
    """
    fine = _oversample_periodic(np.asarray(period, dtype=np.float64), OVERSAMPLE)
    p = fine.size
    u = (np.arange(n_out) - np.asarray(delay, dtype=np.float64)) * OVERSAMPLE
    base = np.floor(u).astype(np.int64)
    frac = u - base
    out = np.zeros(n_out)
    for j in range(-INTERP_TAPS // 2 + 1, INTERP_TAPS // 2 + 1):
        out += fine[np.mod(base + j, p)] * _interp_kernel(frac - j)
    return out


def simulate(
    tx_left: Waveform,
    tx_right: Waveform,
    scene: Scene,
    seed: int = 0,
    speed_of_sound: float = SPEED_OF_SOUND,
) -> MicStreams:
    """Render both microphone streams for ``scene``.

    Transmit waveforms are one period of a continuous, back-to-back emission
    that started before t = 0, so static scenes are exactly periodic from the
    first sample.  ``scene.snr_db`` is measured against the mean transmit
    power; ``None`` disables noise.
    """
    if not math.isclose(tx_left.sample_rate, tx_right.sample_rate):
        raise DataError("transmit waveforms must share a sample rate")
    if len(tx_left) != len(tx_right) or len(tx_left) == 0:
        raise DataError("transmit waveforms must be non-empty and of equal length")
    fs = tx_left.sample_rate
    n_sweep = len(tx_left)
    n = int(round(scene.duration * fs))
    rmax = max_range(n_sweep, fs, speed_of_sound)
    t = np.arange(n) / fs
    rng = np.random.default_rng(seed)

    left = np.zeros(n)
    right = np.zeros(n)
    for refl in scene.reflectors:
        d = np.asarray(refl.trajectory(t), dtype=np.float64)
        if np.any(~np.isfinite(d)) or np.any(d <= 0):
            raise DataError(f"reflector {refl.label!r} has non-positive or non-finite distance")
        if np.any(d > rmax * (1 + 1e-9)):
            raise DataError(f"reflector {refl.label!r} exceeds the maximum range {rmax:.4f} m")
        delay = distance_to_lag(d, fs, speed_of_sound)
        gain = refl.reflectivity * spreading_gain(d)
        g = refl.path_gains
        for k, tx in enumerate((tx_left, tx_right)):
            echo = gain * delayed_periodic(tx.samples, n, delay)
            left += g[2 * k] * echo
            right += g[2 * k + 1] * echo

    for freq, amp in scene.interference:
        tone = amp * np.sin(2 * np.pi * freq * t)
        left += tone
        right += tone

    if scene.snr_db is not None and n:
        p_ref = 0.5 * (np.mean(tx_left.samples**2) + np.mean(tx_right.samples**2))
        sigma = math.sqrt(p_ref / 10 ** (scene.snr_db / 10))
        left += sigma * rng.standard_normal(n)
        right += sigma * rng.standard_normal(n)

    truth = ground_truth(scene, n // n_sweep, n_sweep, fs, speed_of_sound)
    return MicStreams(Waveform(left, fs), Waveform(right, fs), truth)


def ground_truth(scene: Scene, n_sweeps: int, n_sweep: int, fs: float, speed_of_sound: float = SPEED_OF_SOUND):
    """Rounded lag of every reflector at the midpoint of each sweep, clamped to ``[0, n_sweep)``."""
    truth = []
    t_mid = (np.arange(n_sweeps) * n_sweep + n_sweep / 2) / fs
    for refl in scene.reflectors:
        lags = np.rint(distance_to_lag(refl.trajectory(t_mid), fs, speed_of_sound)).astype(int)
        for k, lag in enumerate(lags):
            clamped = lag >= n_sweep
            lag = min(int(lag), n_sweep - 1)
            truth.append(TruthEntry(k, refl.label, (lag,) * 4, bool(clamped)))
    truth.sort(key=lambda e: e.sweep)
    return truth


# --------------------------------------------------------------------------
# scene and truth files


def dump_scene(scene: Scene) -> str:
    lines = ["[scene]", f"duration={scene.duration!r}"]
    lines.append(f"snr_db={'none' if scene.snr_db is None else repr(float(scene.snr_db))}")
    if scene.interference:
        lines.append("interference=" + ",".join(f"{f!r}:{a!r}" for f, a in scene.interference))
    for r in scene.reflectors:
        if not isinstance(r.trajectory, Trajectory):
            raise DataError(f"reflector {r.label!r} has a non-serializable trajectory")
        lines += [
            "",
            "[reflector]",
            f"label={r.label}",
            f"reflectivity={r.reflectivity!r}",
            "path_gains=" + ",".join(repr(g) for g in r.path_gains),
            f"trajectory={r.trajectory.kind}",
        ]
        lines += [f"{k}={v}" for k, v in r.trajectory.params().items()]
    return "\n".join(lines) + "\n"


def parse_scene(text: str) -> Scene:
    sections: list[tuple[str, dict[str, str]]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            sections.append((line[1:-1].strip(), {}))
            continue
        if "=" not in line or not sections:
            raise DataError(f"scene line {lineno}: expected key=value inside a section")
        k, v = line.split("=", 1)
        sections[-1][1][k.strip()] = v.strip()

    head = [s for name, s in sections if name == "scene"]
    if len(head) != 1:
        raise DataError("scene file needs exactly one [scene] section")
    h = head[0]
    snr = h.get("snr_db", "none")
    interference = []
    if h.get("interference"):
        for item in h["interference"].split(","):
            f, a = item.split(":")
            interference.append((float(f), float(a)))
    reflectors = []
    for name, s in sections:
        if name == "scene":
            continue
        if name != "reflector":
            raise DataError(f"unknown scene section [{name}]")
        s = dict(s)
        label = s.pop("label", "reflector")
        refl = float(s.pop("reflectivity", "1.0"))
        gains = tuple(float(x) for x in s.pop("path_gains", "1,1,1,1").split(","))
        kind = s.pop("trajectory")
        reflectors.append(Reflector(Trajectory.from_params(kind, s), refl, label, gains))
    return Scene(
        reflectors,
        float(h.get("duration", "1.0")),
        None if snr.lower() == "none" else float(snr),
        interference,
    )


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(dump_scene(scene))


def load_scene(path: str | Path) -> Scene:
    return parse_scene(Path(path).read_text())


def write_truth_csv(truth: list[TruthEntry], path: str | Path, meta: dict | None = None) -> None:
    """One row per sweep and reflector; ``meta`` goes into leading ``# key=value`` lines."""
    with open(path, "w", newline="") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(["sweep_index", "label", "lag"])
        for e in truth:
            w.writerow([e.sweep, e.label, e.lags[0]])


def read_truth_csv(path: str | Path) -> list[TruthEntry]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    return [TruthEntry(int(r["sweep_index"]), r["label"], (int(r["lag"]),) * 4) for r in rows]
