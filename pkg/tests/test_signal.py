import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from smartglove.schema import SAMPLE_RATE_HZ
from smartglove.signal import (
    BaselineCorrector,
    ChannelMismatchError,
    ChannelStats,
    ConfigurationError,
    FrameStream,
    QuaternionNormError,
    RestCalibrationError,
    TapDetector,
    baseline_correct,
    baseline_correct_stream,
    denormalize,
    detect_taps,
    downsample_hold,
    euler_xyz_from_quat,
    make_windows,
    normalize,
    quat_from_axis_angle,
    quat_from_euler_xyz,
    quat_mul,
    relative_wrist_angles,
    rest_value,
    select_color,
    touch_flags,
    window_count,
)


# ---------------------------------------------------------------- baseline

def test_baseline_constant_is_zero():
    x = np.full((1000, 3), 2.718281828)
    assert np.array_equal(baseline_correct(x, 400), np.zeros_like(x))


@pytest.mark.parametrize("a", [1.0, 0.37, -2.5e-3])
def test_baseline_ramp_closed_form(a):
    n = 400
    t = np.arange(1200)
    out = baseline_correct(a * t, n)
    assert np.allclose(out[n - 1:], a * (n - 1) / 2, rtol=0, atol=1e-9)
    # warmup: mean of a*0..a*t is a*t/2
    assert np.allclose(out[: n - 1], a * t[: n - 1] / 2, rtol=0, atol=1e-9)


def test_baseline_window_spans_twenty_seconds():
    assert 400 / SAMPLE_RATE_HZ == 20.0


def test_baseline_empty_and_bad_n():
    assert baseline_correct(np.zeros((0, 25))).shape == (0, 25)
    with pytest.raises(ConfigurationError):
        baseline_correct(np.zeros(5), 0)


def test_baseline_matches_direct_definition():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(300, 2))
    n = 37
    ref = np.array([x[t] - x[max(0, t - n + 1):t + 1].mean(axis=0) for t in range(len(x))])
    assert np.allclose(baseline_correct(x, n, chunk=17), ref, atol=1e-12)


@given(st.floats(-100, 100), st.integers(1, 30))
@settings(max_examples=40, deadline=None)
def test_baseline_shift_equivariant(c, n):
    x = np.random.default_rng(n).normal(size=(80, 2))
    a = baseline_correct(x, n)
    b = baseline_correct(x + c, n)
    assert np.allclose(a[n - 1:], b[n - 1:], atol=1e-9)


def test_baseline_streaming_matches_batch():
    x = np.random.default_rng(1).normal(size=(120, 3))
    bc = BaselineCorrector(25)
    online = np.array([bc.push(row) for row in x])
    assert np.allclose(online, baseline_correct(x, 25), atol=1e-12)


def test_baseline_stream_passes_quaternions():
    rng = np.random.default_rng(2)
    q = quat_from_axis_angle(rng.normal(size=(10, 3)), rng.uniform(0, 90, 10))
    fs = FrameStream(np.arange(10) * 50, rng.normal(size=(10, 25)), q, q[::-1].copy())
    out = baseline_correct_stream(fs, 4)
    assert np.array_equal(out.quat_hand, fs.quat_hand) and np.array_equal(out.quat_forearm, fs.quat_forearm)


# ---------------------------------------------------------------- wrist angles

IDENT = np.array([1.0, 0.0, 0.0, 0.0])


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def test_wrist_identity():
    q = quat_from_axis_angle([0.3, -1, 2], 47)
    w = relative_wrist_angles(q, q)
    assert (w.flex, w.abd, w.sup) == pytest.approx((0, 0, 0), abs=1e-12)


def test_wrist_identity_random_1000():
    q = _random_quats(np.random.default_rng(0), 1000)
    assert np.abs(relative_wrist_angles(q, q)).max() < 1e-9


def test_wrist_flex_30():
    w = relative_wrist_angles(quat_from_axis_angle([1, 0, 0], 30), IDENT)
    assert (w.flex, w.abd, w.sup) == pytest.approx((30, 0, 0), abs=1e-12)


def test_wrist_flex_composition_adds():
    base = quat_from_euler_xyz(20.0, 10.0, -15.0)
    qh = quat_mul(quat_from_axis_angle([1, 0, 0], 10), base)
    a = relative_wrist_angles(base, IDENT)
    b = relative_wrist_angles(qh, IDENT)
    assert b.flex - a.flex == pytest.approx(10.0, abs=1e-9)
    assert b.abd == pytest.approx(a.abd, abs=1e-9) and b.sup == pytest.approx(a.sup, abs=1e-9)


def test_wrist_relative_to_moving_forearm():
    rng = np.random.default_rng(3)
    qf = _random_quats(rng, 50)
    ang = np.column_stack([rng.uniform(-70, 80, 50), rng.uniform(-25, 35, 50), rng.uniform(-85, 90, 50)])
    qh = quat_mul(qf, quat_from_euler_xyz(ang[:, 0], ang[:, 1], ang[:, 2]))
    assert np.allclose(relative_wrist_angles(qh, qf), ang, atol=1e-9)


def test_euler_matches_scipy_intrinsic_xyz():
    q = _random_quats(np.random.default_rng(4), 500)
    ours = euler_xyz_from_quat(q)
    ref = Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_euler("XYZ", degrees=True)
    # away from gimbal lock the two conventions must coincide
    ok = np.abs(ref[:, 1]) < 85
    assert np.allclose(ours[ok], ref[ok], atol=1e-8)


def test_wrist_rejects_non_unit():
    with pytest.raises(QuaternionNormError):
        relative_wrist_angles(np.array([1.01, 0, 0, 0]), IDENT)
    relative_wrist_angles(np.array([1.0005, 0, 0, 0]), IDENT)  # within 1e-3


@given(st.floats(-80, 80), st.floats(-80, 80), st.floats(-170, 170))
@settings(max_examples=100)
def test_wrist_angles_in_range(a, b, c):
    w = relative_wrist_angles(quat_from_euler_xyz(a, b, c), IDENT)
    assert all(-180 <= v <= 180 for v in (w.flex, w.abd, w.sup))
    assert (w.flex, w.abd, w.sup) == pytest.approx((a, b, c), abs=1e-7)


# ---------------------------------------------------------------- downsample

def test_downsample_identity_at_20hz():
    t = np.arange(10) * 50
    v = np.arange(10.0)
    ticks, held = downsample_hold(t, v, 20)
    assert np.array_equal(ticks, t) and np.array_equal(held, v)


def test_downsample_100hz_selects_tick_sample():
    t = np.arange(50) * 10
    v = np.arange(50.0)
    ticks, held = downsample_hold(t, v, 100)
    assert held[list(ticks).index(50)] == v[5]


def test_downsample_before_first_sample_repeats_earliest():
    _, held = downsample_hold(np.array([30, 40, 50]), np.array([1.0, 2.0, 3.0]), 100, ticks_ms=[0, 50])
    assert list(held) == [1.0, 3.0]


def test_downsample_rate_too_low():
    with pytest.raises(ConfigurationError):
        downsample_hold([0, 100], [0, 1], 10)


# ---------------------------------------------------------------- windows

@pytest.mark.parametrize("n,stride,expected", [(40, 1, 1), (45, 5, 2), (39, 1, 0), (41, 1, 2), (100, 1, 61)])
def test_window_count(n, stride, expected):
    f = np.zeros((n, 28))
    assert window_count(n, 40, stride) == expected
    assert len(make_windows(f, length=40, stride=stride)) == expected


def test_window_labels_are_final_frame():
    f = np.arange(60 * 28, dtype=float).reshape(60, 28)
    y = np.arange(60)
    w, lab = make_windows(f, y, 40, 3)
    assert list(lab) == [39 + 3 * k for k in range(len(w))]
    assert w.shape[1:] == (40, 28)


@given(st.integers(1, 90), st.integers(1, 20), st.integers(1, 7))
@settings(max_examples=60, deadline=None)
def test_windows_are_exact_slices(n, length, stride):
    f = np.random.default_rng(n).normal(size=(n, 3))
    w = make_windows(f, length=length, stride=stride)
    assert len(w) == (0 if n < length else (n - length) // stride + 1)
    for k in range(len(w)):
        assert np.array_equal(w[k], f[k * stride:k * stride + length])


def test_bad_stride():
    with pytest.raises(ConfigurationError):
        make_windows(np.zeros((50, 2)), stride=0)


# ---------------------------------------------------------------- normalization

def test_normalize_examples():
    rng = np.random.default_rng(0)
    x = rng.normal(3, 2, size=(500, 4))
    s = ChannelStats.fit(x)
    assert np.allclose(normalize(s.mean[None], s), 0, atol=0)
    v = s.mean.copy()
    v[2] += s.std[2]
    assert normalize(v, s)[2] == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(denormalize(normalize(x, s), s), x, atol=1e-12)


def test_normalize_channel_mismatch():
    s = ChannelStats(np.zeros(28), np.ones(28))
    with pytest.raises(ChannelMismatchError):
        normalize(np.zeros((40, 25)), s)


def test_degenerate_channel_flagged(caplog):
    x = np.random.default_rng(0).normal(size=(100, 3))
    x[:, 1] = 5.0
    s = ChannelStats.fit(x)
    assert s.std[1] == 1.0 and s.degenerate[1] and not s.degenerate[0]
    assert "zero variance" in caplog.text
    assert np.all(normalize(x, s)[:, 1] == 0.0)


# ---------------------------------------------------------------- taps

def _brute_force_taps(f):
    return [t for t in range(3, len(f)) if (f[t - 3], f[t - 2], f[t - 1], f[t]) == (0, 0, 1, 1)]


def test_no_taps_on_constant():
    assert detect_taps(np.full(100, 0.3), 0.3) == []


def test_tap_pattern_fires_once():
    rest = 1.0
    s = np.array([1, 1, 1, 1, 1.5, 1.5, 1.5, 1, 1])  # f = 0 0 0 0 1 1 1 0 0
    ev = detect_taps(s, rest, 0.04, finger_index=3)
    assert [(e.finger_index, e.timestamp_ms) for e in ev] == [(3, 5 * 50)]


def test_single_sample_spike_ignored():
    s = np.array([1, 1, 1, 1, 1.5, 1, 1, 1.0])
    assert detect_taps(s, 1.0) == []


def test_no_taps_before_t3():
    s = np.array([1.5, 1.5, 1.5, 1.5, 1.5])
    assert touch_flags(s, 1.0).tolist() == [1] * 5
    assert detect_taps(s, 1.0) == []


def test_threshold_boundary_inclusive():
    # (S/S0 - 1)^2 == threshold exactly -> touching
    assert touch_flags(np.array([1.5]), 1.0, 0.25).tolist() == [1]
    assert touch_flags(np.array([1.49]), 1.0, 0.25).tolist() == [0]


def test_rest_calibration_error():
    with pytest.raises(RestCalibrationError):
        detect_taps(np.ones(10), 0.0)
    with pytest.raises(ConfigurationError):
        detect_taps(np.ones(10), 1.0, threshold=0.0)


def test_rest_value_averages_ten_seconds():
    s = np.concatenate([np.full(200, 2.0), np.full(50, 9.0)])
    assert rest_value(s) == 2.0


@given(st.lists(st.integers(0, 1), min_size=0, max_size=200))
@settings(max_examples=200)
def test_taps_equal_brute_force(bits):
    f = np.array(bits, dtype=float)
    series = 1.0 + 0.5 * f  # f=1 -> relative change 0.5, squared 0.25 >= 0.04
    ev = detect_taps(series, 1.0, 0.04, timestamps_ms=np.arange(len(f)))
    assert [e.timestamp_ms for e in ev] == _brute_force_taps(bits)


def test_streaming_detector_matches_batch():
    rng = np.random.default_rng(5)
    s = 1.0 + 0.5 * (rng.random((300, 2)) < 0.3)
    det = TapDetector([1.0, 1.0], [6, 7])
    online = [e for t in range(300) for e in det.push(s[t], t)]
    batch = detect_taps(s[:, 0], 1.0, finger_index=6, timestamps_ms=np.arange(300)) \
        + detect_taps(s[:, 1], 1.0, finger_index=7, timestamps_ms=np.arange(300))
    key = lambda e: (e.timestamp_ms, e.finger_index)  # noqa: E731
    assert sorted(online, key=key) == sorted(batch, key=key)


# ---------------------------------------------------------------- color

@pytest.mark.parametrize("flags,color", [
    ((1, 1, 0, 0, 0), "purple"),
    ((1, 0, 1, 0, 0), "red"),
    ((1, 0, 0, 1, 0), "blue"),
    ((1, 0, 0, 0, 1), "green"),
    ((0, 0, 0, 0, 0), "none"),
    ((0, 1, 1, 1, 1), "none"),
    ((1, 0, 0, 0, 0), "none"),
    ((1, 1, 1, 0, 0), "purple"),
    ((1, 0, 1, 1, 1), "red"),
])
def test_select_color(flags, color):
    assert select_color(*flags) == color
