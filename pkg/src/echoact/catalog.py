"""Parametric motion scripts standing in for recorded activities.

Face-band scripts (chew, brush-face) only move reflectors closer than
~17 cm, body-band scripts (walk-sway, wipe-arm, null) only move reflectors
beyond it, and drink-lift / cough-jerk span both.  That split is what makes
the face/body crop ablation informative.
"""

from __future__ import annotations

import numpy as np

from .channel import Jerks, Lift, Reflector, Scene, Sine, Static, SumOfSines
from .errors import ConfigError

CLASS_NAMES = (
    "static",
    "chew",
    "drink-lift",
    "walk-sway",
    "brush-face",
    "wipe-arm",
    "cough-jerk",
    "null",
)
NULL_CLASS = "null"
DEFAULT_SNR_DB = 45.0
SNR_JITTER_DB = 2.0  # per-scene noise-floor variation


def _gains(rng, side: str = "centre") -> tuple[float, float, float, float]:
    # path order: TL->RL, TL->RR, TR->RL, TR->RR
    base = {"centre": (1.0, 1.0, 1.0, 1.0), "right": (0.7, 0.85, 0.85, 1.0)}[side]
    return tuple(float(b * rng.uniform(0.9, 1.1)) for b in base)


def _torso(rng) -> Reflector:
    return Reflector(Static(rng.uniform(0.45, 0.55)), rng.uniform(0.7, 0.9), "torso", _gains(rng))


def _face(rng) -> Reflector:
    return Reflector(Static(rng.uniform(0.10, 0.13)), rng.uniform(0.3, 0.4), "face", _gains(rng))


def _resting_hand(rng) -> Reflector:
    return Reflector(Static(rng.uniform(0.65, 0.8)), rng.uniform(0.4, 0.6), "hand", _gains(rng, "right"))


def _phase(rng) -> float:
    return float(rng.uniform(0, 2 * np.pi))


def _static(rng, duration):
    return [_torso(rng), _face(rng), _resting_hand(rng)]


def _chew(rng, duration):
    jaw = Sine(rng.uniform(0.09, 0.095), rng.uniform(0.006, 0.009), rng.uniform(1.5, 3.0), _phase(rng))
    return [_torso(rng), _resting_hand(rng), Reflector(jaw, rng.uniform(0.015, 0.025), "jaw", _gains(rng))]


def _drink_lift(rng, duration):
    # rests stay under 1 s so every 2 s window contains part of a lift
    period = rng.uniform(2.5, 3.5)
    lift = Lift(rng.uniform(0.55, 0.65), rng.uniform(0.14, 0.18), period, rng.uniform(0.75, 0.9), rng.uniform(0, period))
    return [_torso(rng), _face(rng), Reflector(lift, rng.uniform(0.5, 0.6), "hand", _gains(rng, "right"))]


def _walk_sway(rng, duration):
    f = rng.uniform(1.6, 2.0)
    torso = Sine(rng.uniform(0.45, 0.55), rng.uniform(0.02, 0.035), f, _phase(rng))
    arm = Sine(rng.uniform(0.65, 0.75), rng.uniform(0.08, 0.12), f / 2, _phase(rng))
    return [
        Reflector(torso, rng.uniform(0.7, 0.9), "torso", _gains(rng)),
        _face(rng),
        Reflector(arm, rng.uniform(0.5, 0.6), "arm", _gains(rng, "right")),
    ]


def _brush_face(rng, duration):
    brush = Sine(rng.uniform(0.065, 0.075), rng.uniform(0.008, 0.012), rng.uniform(4.0, 6.0), _phase(rng))
    return [_torso(rng), _face(rng), _resting_hand(rng),
            Reflector(brush, rng.uniform(0.003, 0.005), "brush", _gains(rng, "right"))]


def _wipe_arm(rng, duration):
    arm = Sine(rng.uniform(0.47, 0.52), rng.uniform(0.08, 0.10), rng.uniform(1.1, 1.5), _phase(rng))
    return [_torso(rng), _face(rng), Reflector(arm, rng.uniform(0.55, 0.65), "arm", _gains(rng, "right"))]


def _cough_jerk(rng, duration):
    times = []
    t = rng.uniform(0.0, 0.5)
    while t < duration:
        times.append(float(t))
        t += rng.uniform(0.7, 1.3)
    width = rng.uniform(0.05, 0.08)
    face = Jerks(rng.uniform(0.10, 0.13), -rng.uniform(0.015, 0.025), width, tuple(times))
    torso = Jerks(rng.uniform(0.45, 0.55), rng.uniform(0.02, 0.03), width, tuple(times))
    return [
        Reflector(face, rng.uniform(0.3, 0.4), "face", _gains(rng)),
        Reflector(torso, rng.uniform(0.7, 0.9), "torso", _gains(rng)),
        _resting_hand(rng),
    ]


def _null(rng, duration):
    wander = SumOfSines(
        rng.uniform(0.5, 0.6),
        tuple(rng.uniform(0.02, 0.05, 3)),
        tuple(rng.uniform(0.15, 0.8, 3)),
        tuple(rng.uniform(0, 2 * np.pi, 3)),
    )
    return [_torso(rng), _face(rng), Reflector(wander, rng.uniform(0.4, 0.6), "object", _gains(rng, "right"))]


_SCRIPTS = dict(zip(CLASS_NAMES, (
    _static, _chew, _drink_lift, _walk_sway, _brush_face, _wipe_arm, _cough_jerk, _null,
)))


def class_name(class_id: int | str) -> str:
    if isinstance(class_id, str):
        if class_id not in _SCRIPTS:
            raise ConfigError(f"unknown activity class {class_id!r}")
        return class_id
    if isinstance(class_id, (int, np.integer)) and 0 <= class_id < len(CLASS_NAMES):
        return CLASS_NAMES[int(class_id)]
    if hasattr(class_id, "name"):
        return class_name(class_id.name)
    raise ConfigError(f"unknown activity class {class_id!r}")


def synth_activity_scene(
    class_id: int | str, duration: float, seed: int, snr_db: float | None = DEFAULT_SNR_DB
) -> Scene:
    """Scene for one catalog class with amplitude, phase and rate jittered by ``seed``.

    The noise floor also varies by up to ``SNR_JITTER_DB`` around ``snr_db``
    so that absolute noise power carries no class information.
    """
    name = class_name(class_id)
    rng = np.random.default_rng([seed, CLASS_NAMES.index(name)])
    reflectors = _SCRIPTS[name](rng, duration)
    if snr_db is not None:
        snr_db = float(snr_db + rng.uniform(-SNR_JITTER_DB, SNR_JITTER_DB))
    return Scene(reflectors, float(duration), snr_db)
