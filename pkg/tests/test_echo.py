import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from echoact.channel import MicStreams, Reflector, Scene, Static, simulate
from echoact.echo import (
    FACE_LAGS,
    HOP_FRAMES,
    WINDOW_FRAMES,
    WINDOW_LAGS,
    EchoFrame,
    EchoProfile,
    FlowWindow,
    _filter_periodic_edges,
    acoustic_flow,
    align_streams,
    compute_echo_frame,
    compute_echo_profile,
    crop_region,
    default_kernels,
    extract_windows,
    find_sweep_offset,
    reference_signal,
)
from echoact.errors import DataError
from echoact.signal import Waveform, distance_to_lag

N = 600


def direct_frame(tx, rx):
    """Oracle: the time-domain sum, wrapping only if the segment is too short to hold every lag."""
    n, length = tx.size, rx.size
    return np.array([abs(sum(tx[i] * rx[(i + lag) % length] for i in range(n))) for lag in range(n)])


def direct_complex_frame(ref, rx, lags):
    return np.array([np.sum(np.conj(ref) * rx[lag : lag + ref.size]) for lag in lags])


def static_streams(chirps, distance, seconds=0.06, snr_db=None, gains=(1.0, 1.0, 1.0, 1.0), **extra):
    tl, tr = chirps
    scene = Scene([Reflector(Static(distance), 1.0, "r", gains)], seconds, snr_db, **extra)
    return simulate(tl, tr, scene, seed=1)


# ------------------------------------------------------------------ echo frames


def test_frame_matches_direct_sum_on_random_pairs(rng):
    for _ in range(5):
        tx = rng.standard_normal(N)
        rx = rng.standard_normal(N)
        got = compute_echo_frame(Waveform(tx), Waveform(rx)).values
        want = direct_frame(tx, rx)
        assert np.max(np.abs(got - want)) <= 1e-9 * np.max(want)


def test_long_segment_is_linear_correlation(rng):
    tx = rng.standard_normal(N)
    rx = rng.standard_normal(2 * N - 1)
    got = compute_echo_frame(Waveform(tx), Waveform(rx)).values
    want = np.abs(np.correlate(rx, tx, mode="valid")[:N])
    assert np.allclose(got, want, rtol=0, atol=1e-9 * want.max())


def test_delayed_copy_peaks_at_delay(chirps):
    tx = chirps[0]
    frame = compute_echo_frame(tx, Waveform(np.roll(tx.samples, 100)))
    assert int(np.argmax(frame.values)) == 100


def test_zero_rx_gives_zero_frame(chirps):
    frame = compute_echo_frame(chirps[0], Waveform(np.zeros(N)))
    assert np.all(frame.values == 0)


def test_frame_rejects_short_segment(chirps):
    with pytest.raises(DataError):
        compute_echo_frame(chirps[0], Waveform(np.zeros(N - 1)))


def test_frame_rejects_non_finite():
    with pytest.raises(DataError):
        EchoFrame(np.array([0.0, np.nan]))


def test_reference_signal_modes(chirps):
    tx = chirps[0].samples
    assert np.array_equal(reference_signal(tx), tx)
    analytic = reference_signal(tx, "analytic")
    assert np.allclose(analytic.real, tx, atol=1e-9)
    assert np.iscomplexobj(analytic)
    tapered = reference_signal(tx, "analytic", "hann")
    assert abs(tapered[0]) < 1e-12 and abs(tapered[-1]) < 1e-12
    with pytest.raises(DataError):
        reference_signal(tx, "bogus")


# ---------------------------------------------------------------- echo profiles


def test_profile_shape_and_frame_rate(chirps):
    mics = static_streams(chirps, 0.4, seconds=0.05)
    profile = compute_echo_profile(*chirps, mics)
    assert profile.data.shape == (4, N, len(mics.left) // N)
    assert profile.frame_rate == pytest.approx(50_000 / 600)
    assert np.iscomplexobj(profile.data)


def test_profile_matches_direct_complex_sum(chirps, rng):
    tl, tr = chirps
    mics = MicStreams(Waveform(rng.standard_normal(3 * N)), Waveform(rng.standard_normal(3 * N)), [])
    profile = compute_echo_profile(tl, tr, mics)
    kl, kr = default_kernels()
    lags = [0, 1, 57, 299, 599]
    for c, (k, tx, mic) in enumerate([(kl, tl, mics.left), (kl, tl, mics.right),
                                      (kr, tr, mics.left), (kr, tr, mics.right)]):
        filtered = _filter_periodic_edges(k.taps, mic.samples, N)
        ref = reference_signal(tx.samples, "analytic", "hann")
        for f in range(3):
            want = direct_complex_frame(ref, filtered[f * N :], lags)
            got = profile.data[c, lags, f]
            assert np.max(np.abs(got - want)) <= 1e-9 * np.max(np.abs(want))


def test_real_profile_is_echo_frame_of_filtered_stream(chirps):
    tl, tr = chirps
    mics = static_streams(chirps, 0.6, seconds=0.036, snr_db=40.0)
    profile = compute_echo_profile(tl, tr, mics, detector="real", taper=None)
    assert not np.iscomplexobj(profile.data)
    kl, _ = default_kernels()
    filtered = _filter_periodic_edges(kl.taps, mics.right.samples, N)
    frame = compute_echo_frame(tl, Waveform(filtered[N : 3 * N]))
    assert np.allclose(profile.data[1, :, 1], frame.values, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("distance", [0.12, 0.343, 0.77, 1.31, 1.9])
def test_profile_argmax_tracks_static_distance(chirps, distance):
    mics = static_streams(chirps, distance)
    truth = distance_to_lag(distance)
    peaks = compute_echo_profile(*chirps, mics).magnitude.argmax(axis=1)
    assert np.all(np.abs(peaks - truth) <= 1)


def test_channel_order_follows_path_gains(chirps):
    for path in range(4):
        gains = tuple(1.0 if p == path else 0.0 for p in range(4))
        energy = compute_echo_profile(*chirps, static_streams(chirps, 0.5, gains=gains)).magnitude.max(axis=(1, 2))
        assert int(np.argmax(energy)) == path
        assert energy[path] > 20 * np.delete(energy, path).max()


def test_static_scene_flow_is_negligible(chirps):
    tl, tr = chirps
    scene = Scene([Reflector(Static(d), r, str(d)) for d, r in ((0.1, 0.4), (0.5, 0.8), (0.9, 0.5))], 0.3, None)
    profile = compute_echo_profile(tl, tr, simulate(tl, tr, scene))
    flow = acoustic_flow(profile)
    assert flow.data.max() <= 1e-4 * profile.magnitude.max()


def test_interference_tone_keeps_argmax(chirps):
    base = static_streams(chirps, 0.7, seconds=0.12)
    echo_amp = np.abs(base.left.samples).max()
    noisy = static_streams(chirps, 0.7, seconds=0.12, interference=((5000.0, 10 * echo_amp),))
    a = compute_echo_profile(*chirps, base).magnitude.argmax(axis=1)
    b = compute_echo_profile(*chirps, noisy).magnitude.argmax(axis=1)
    assert np.array_equal(a, b)


def test_normalized_profile_frames_peak_at_one(chirps):
    profile = compute_echo_profile(*chirps, static_streams(chirps, 0.3), normalize=True)
    assert np.allclose(profile.magnitude.max(axis=1), 1.0)


def test_profile_errors(chirps):
    tl, tr = chirps
    short = MicStreams(Waveform(np.zeros(N - 1)), Waveform(np.zeros(N - 1)), [])
    with pytest.raises(DataError):
        compute_echo_profile(tl, tr, short)
    with pytest.raises(DataError):
        MicStreams(Waveform(np.zeros(N)), Waveform(np.zeros(2 * N)), [])
    with pytest.raises(DataError):
        compute_echo_profile(tl, Waveform(tr.samples[:-1]), static_streams(chirps, 0.3))
    with pytest.raises(DataError):
        EchoProfile(np.zeros((4, N)))


# ----------------------------------------------------------------- acoustic flow


def test_flow_of_constant_profile_is_zero():
    flow = acoustic_flow(EchoProfile(np.full((4, 10, 6), 3.5)))
    assert flow.data.shape == (4, 10, 5)
    assert np.all(flow.data == 0)


def test_flow_of_one_lag_step_has_two_dominant_lags():
    data = np.zeros((1, 40, 4))
    data[0, 20, :2] = 1.0
    data[0, 21, 2:] = 1.0
    flow = acoustic_flow(EchoProfile(data)).data[0]
    assert set(np.flatnonzero(flow[:, 1])) == {20, 21}
    assert np.all(flow[:, 0] == 0) and np.all(flow[:, 2] == 0)


def test_flow_needs_two_frames():
    with pytest.raises(DataError):
        acoustic_flow(EchoProfile(np.zeros((4, 10, 1))))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 6, 5), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (2, 6, 1), elements=st.floats(-1e3, 1e3)))
def test_flow_ignores_time_constant_offsets(data, offset):
    a = acoustic_flow(EchoProfile(data)).data
    b = acoustic_flow(EchoProfile(data + offset)).data
    assert np.allclose(a, b, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(2, 8), st.integers(1, 5))
def test_remount_shift_only_changes_flow_at_the_boundary(shift, before, after):
    frame = np.random.default_rng(shift).random((4, 60))
    data = np.concatenate([np.repeat(frame[..., None], before, axis=2),
                           np.repeat(np.roll(frame, shift, axis=1)[..., None], after, axis=2)], axis=2)
    flow = acoustic_flow(EchoProfile(data)).data
    moving = np.flatnonzero(flow.max(axis=(0, 1)) > 0)
    assert list(moving) == [before - 1]


def test_complex_flow_sees_pure_phase_rotation():
    data = np.ones((1, 3, 2), dtype=complex)
    data[..., 1] = 1j
    flow = acoustic_flow(EchoProfile(data)).data
    assert np.allclose(flow, np.sqrt(2))


# ----------------------------------------------------------------------- windows


def test_window_count_and_shapes():
    frames = 500
    flow = EchoProfile(np.random.default_rng(0).random((4, N, frames)))
    windows = extract_windows(flow)
    assert len(windows) == (frames - WINDOW_FRAMES) // HOP_FRAMES + 1
    for i, w in enumerate(windows):
        assert w.data.shape == (4, WINDOW_LAGS, WINDOW_FRAMES)
        assert w.data.dtype == np.float32
        assert w.start_time == pytest.approx(i * HOP_FRAMES / flow.frame_rate)
        assert np.array_equal(w.data, flow.data[:, :WINDOW_LAGS, i * HOP_FRAMES : i * HOP_FRAMES + WINDOW_FRAMES]
                              .astype(np.float32))
    assert windows[0].duration == pytest.approx(WINDOW_FRAMES * 0.012)


def test_window_errors():
    with pytest.raises(DataError):
        extract_windows(EchoProfile(np.zeros((4, N, WINDOW_FRAMES - 1))))
    with pytest.raises(DataError):
        extract_windows(EchoProfile(np.zeros((4, 100, WINDOW_FRAMES))))
    with pytest.raises(DataError):
        extract_windows(EchoProfile(np.zeros((4, N, WINDOW_FRAMES))), hop_frames=0)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (4, 80, 3), elements=st.floats(0, 10, width=32)))
def test_face_and_body_crops_partition_the_window(data):
    face = crop_region(data, "face")
    body = crop_region(data, "body")
    assert np.array_equal(face + body, data)
    assert np.all(face[:, FACE_LAGS:] == 0) and np.all(body[:, :FACE_LAGS] == 0)
    assert np.array_equal(crop_region(data, "full"), data)


def test_crop_keeps_window_metadata():
    w = FlowWindow(np.ones((4, 80, 3), np.float32), 2.5)
    out = crop_region(w, "body")
    assert isinstance(out, FlowWindow) and out.start_time == 2.5
    assert out.data[:, :FACE_LAGS].sum() == 0
    assert w.data.sum() == 4 * 80 * 3
    with pytest.raises(DataError):
        crop_region(w, "hands")


# --------------------------------------------------------------------- alignment


def test_sweep_offset_recovers_leading_delay(chirps):
    tl = chirps[0]
    rx = np.roll(np.tile(tl.samples, 4), 137)
    assert find_sweep_offset(tl, Waveform(rx)) == 137
    mics = MicStreams(Waveform(rx), Waveform(rx), [])
    aligned = align_streams(mics, 137)
    assert len(aligned.left) == rx.size - 137
    assert find_sweep_offset(tl, aligned.left) == 0


def test_sweep_offset_needs_two_sweeps(chirps):
    with pytest.raises(DataError):
        find_sweep_offset(chirps[0], Waveform(np.zeros(N + 5)))
