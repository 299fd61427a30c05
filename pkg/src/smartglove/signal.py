"""Frame-level preprocessing: baseline correction, wrist angles, windowing,
normalization and fingertip tap/touch detection."""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .schema import FRAME_PERIOD_MS, N_INPUT_CHANNELS, N_SENSORS, SAMPLE_RATE_HZ, WINDOW_LENGTH

log = logging.getLogger(__name__)

BASELINE_WINDOW = 400  # 20 s at 20 Hz
DEFAULT_TAP_THRESHOLD = 0.04
REST_SECONDS = 10.0


class ConfigurationError(ValueError):
    pass


class QuaternionNormError(ValueError):
    pass


class RestCalibrationError(ValueError):
    pass


class ChannelMismatchError(ValueError):
    pass


@dataclass
class SensorFrame:
    timestamp_ms: int
    hsy: np.ndarray
    quat_hand: np.ndarray
    quat_forearm: np.ndarray

    def validate(self, tol=1e-6):
        if len(self.hsy) != N_SENSORS or not np.all(np.isfinite(self.hsy)):
            raise ValueError("hsy must hold 25 finite readings")
        for q in (self.quat_hand, self.quat_forearm):
            if len(q) != 4 or abs(np.linalg.norm(q) - 1.0) > tol:
                raise QuaternionNormError(f"quaternion {q} is not unit norm")


@dataclass
class FrameStream:
    """Column-oriented run of frames.

    t_ms (N,), hsy (N, 25), quat_hand (N, 4), quat_forearm (N, 4).
    """

    t_ms: np.ndarray
    hsy: np.ndarray
    quat_hand: np.ndarray
    quat_forearm: np.ndarray

    def __len__(self):
        return len(self.t_ms)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return SensorFrame(int(self.t_ms[idx]), self.hsy[idx], self.quat_hand[idx], self.quat_forearm[idx])
        return FrameStream(self.t_ms[idx], self.hsy[idx], self.quat_hand[idx], self.quat_forearm[idx])

    @classmethod
    def from_frames(cls, frames):
        frames = list(frames)
        if not frames:
            return cls.empty()
        return cls(
            np.array([f.timestamp_ms for f in frames], dtype=np.int64),
            np.array([f.hsy for f in frames], dtype=np.float64),
            np.array([f.quat_hand for f in frames], dtype=np.float64),
            np.array([f.quat_forearm for f in frames], dtype=np.float64),
        )

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, np.int64), np.zeros((0, N_SENSORS)), np.zeros((0, 4)), np.zeros((0, 4)))

    def validate(self):
        if np.any(np.diff(self.t_ms) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.hsy)):
            raise ValueError("non-finite strain reading")
        check_unit_quaternions(self.quat_hand, 1e-6)
        check_unit_quaternions(self.quat_forearm, 1e-6)


@dataclass
class WristAngles:
    flex: float
    abd: float
    sup: float

    def as_array(self):
        return np.array([self.flex, self.abd, self.sup])


@dataclass
class TapEvent:
    finger_index: int
    timestamp_ms: int


# ---------------------------------------------------------------- baseline

def baseline_correct(values, n=BASELINE_WINDOW, chunk=2048):
    """Subtract the causal rolling mean over the last ``min(t+1, n)`` samples.

    ``values`` is (N,) or (N, C).  The mean is taken of differences to the
    current sample, so a constant stretch of input gives exactly zero.
    """
    if n < 1:
        raise ConfigurationError("baseline window must be >= 1")
    x = np.asarray(values, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    N = x.shape[0]
    out = np.zeros_like(x)
    if N == 0:
        return out[:, 0] if squeeze else out
    warm = min(n - 1, N)
    for t in range(warm):
        out[t] = -np.mean(x[: t + 1] - x[t], axis=0)
    if N >= n:
        # windows[k] covers samples k .. k+n-1 and ends at t = k+n-1
        win = sliding_window_view(x, n, axis=0)  # (N-n+1, C, n)
        for k0 in range(0, win.shape[0], chunk):
            w = win[k0:k0 + chunk]
            cur = x[k0 + n - 1:k0 + n - 1 + w.shape[0], :, None]
            out[k0 + n - 1:k0 + n - 1 + w.shape[0]] = -np.mean(w - cur, axis=2)
    out += 0.0  # -0.0 -> 0.0
    return out[:, 0] if squeeze else out


def baseline_correct_stream(stream: FrameStream, n=BASELINE_WINDOW) -> FrameStream:
    """Baseline-correct the strain channels; quaternions pass through."""
    return FrameStream(stream.t_ms.copy(), baseline_correct(stream.hsy, n),
                       stream.quat_hand.copy(), stream.quat_forearm.copy())


class BaselineCorrector:
    """Incremental form of :func:`baseline_correct` for live streams."""

    def __init__(self, n=BASELINE_WINDOW):
        if n < 1:
            raise ConfigurationError("baseline window must be >= 1")
        self.buf = deque(maxlen=n)

    def push(self, sample):
        sample = np.asarray(sample, dtype=np.float64)
        self.buf.append(sample)
        hist = np.array(self.buf)
        return -np.mean(hist - sample, axis=0) + 0.0


# ---------------------------------------------------------------- quaternions

def check_unit_quaternions(q, tol=1e-3):
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1)
    bad = np.abs(norms - 1.0) > tol
    if np.any(bad):
        raise QuaternionNormError(
            f"{int(np.count_nonzero(bad))} quaternion(s) deviate from unit norm by more than {tol}"
        )
    return q


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a, b):
    """Hamilton product, (w, x, y, z) order, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_from_axis_angle(axis, angle_deg):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = np.deg2rad(np.asarray(angle_deg, dtype=np.float64)) / 2.0
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def quat_from_euler_xyz(flex, abd, sup):
    """Quaternion of the intrinsic X-Y-Z rotation Rx(flex) Ry(abd) Rz(sup), degrees."""
    qx = quat_from_axis_angle([1.0, 0.0, 0.0], flex)
    qy = quat_from_axis_angle([0.0, 1.0, 0.0], abd)
    qz = quat_from_axis_angle([0.0, 0.0, 1.0], sup)
    return quat_mul(quat_mul(qx, qy), qz)


def euler_xyz_from_quat(q):
    """Intrinsic X-Y-Z Euler angles in degrees, shape (..., 3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r00 = 1.0 - 2.0 * (y * y + z * z)
    r01 = 2.0 * (x * y - w * z)
    r02 = 2.0 * (x * z + w * y)
    r12 = 2.0 * (y * z - w * x)
    r22 = 1.0 - 2.0 * (x * x + y * y)
    flex = np.arctan2(-r12, r22)
    abd = np.arctan2(r02, np.hypot(r12, r22))
    sup = np.arctan2(-r01, r00)
    return np.rad2deg(np.stack([flex, abd, sup], axis=-1))


def relative_wrist_angles(quat_hand, quat_forearm):
    """Wrist (flex, abd, sup) of the hand IMU relative to the forearm IMU.

    Accepts single quaternions (returns :class:`WristAngles`) or stacked
    (N, 4) arrays (returns an (N, 3) array).
    """
    qh = check_unit_quaternions(quat_hand)
    qf = check_unit_quaternions(quat_forearm)
    ang = euler_xyz_from_quat(quat_mul(quat_conj(qf), qh))
    if ang.ndim == 1:
        return WristAngles(*map(float, ang))
    return ang


# ---------------------------------------------------------------- alignment

def downsample_hold(times_ms, values, source_rate_hz, target_rate_hz=SAMPLE_RATE_HZ, ticks_ms=None):
    """Zero-order hold of a faster IMU stream onto 20 Hz ticks.

    Each tick takes the latest sample at or before it; ticks before the first
    sample repeat the earliest sample.  Ticks default to a regular grid
    starting at the first sample time.  Returns ``(ticks_ms, held_values)``.
    """
    if source_rate_hz < target_rate_hz:
        raise ConfigurationError(
            f"IMU rate {source_rate_hz} Hz is below the {target_rate_hz} Hz frame rate"
        )
    times_ms = np.asarray(times_ms)
    values = np.asarray(values)
    if len(times_ms) == 0:
        raise ConfigurationError("empty IMU stream")
    if ticks_ms is None:
        period = 1000.0 / target_rate_hz
        n = int(np.floor((times_ms[-1] - times_ms[0]) / period)) + 1
        ticks_ms = times_ms[0] + np.round(np.arange(n) * period).astype(np.int64)
    ticks_ms = np.asarray(ticks_ms)
    idx = np.searchsorted(times_ms, ticks_ms, side="right") - 1
    idx = np.clip(idx, 0, len(times_ms) - 1)
    return ticks_ms, values[idx]


# ---------------------------------------------------------------- features, windows

def frame_features(stream: FrameStream):
    """(N, 28) input channels: 25 strain readings then IMU wrist angles."""
    wrist = relative_wrist_angles(stream.quat_hand, stream.quat_forearm)
    if len(stream) == 0:
        wrist = np.zeros((0, 3))
    return np.concatenate([stream.hsy, wrist.reshape(-1, 3)], axis=1)


def window_count(n_frames, length=WINDOW_LENGTH, stride=1):
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    return 0 if n_frames < length else (n_frames - length) // stride + 1


def make_windows(features, labels=None, length=WINDOW_LENGTH, stride=1):
    """Sliding windows over (N, C) frame features.

    Returns a read-only view of shape (M, length, C), plus the (M, ...) labels
    of each window's final frame when ``labels`` is given.
    """
    features = np.asarray(features)
    M = window_count(len(features), length, stride)
    C = features.shape[1] if features.ndim == 2 else 0
    if M == 0:
        wins = np.zeros((0, length, C), dtype=features.dtype)
        return wins if labels is None else (wins, np.asarray(labels)[:0])
    wins = sliding_window_view(features, length, axis=0)[::stride][:M]
    wins = np.swapaxes(wins, 1, 2)
    if labels is None:
        return wins
    ends = np.arange(M) * stride + length - 1
    return wins, np.asarray(labels)[ends]


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.mean), dtype=bool)
        self.degenerate = np.asarray(self.degenerate, dtype=bool)
        if np.any(self.std <= 0):
            raise ValueError("ChannelStats.std must be positive")

    @property
    def channels(self):
        return len(self.mean)

    @classmethod
    def fit(cls, features):
        x = np.asarray(features, dtype=np.float64).reshape(-1, np.shape(features)[-1])
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        degenerate = ~(std > 0)
        if np.any(degenerate):
            log.warning("channels %s have zero variance; left unscaled", np.flatnonzero(degenerate).tolist())
            std = np.where(degenerate, 1.0, std)
        return cls(mean, std, degenerate)


def _check_channels(x, stats):
    if np.shape(x)[-1] != stats.channels:
        raise ChannelMismatchError(f"window has {np.shape(x)[-1]} channels, stats have {stats.channels}")


def normalize(window, stats: ChannelStats):
    _check_channels(window, stats)
    return (np.asarray(window) - stats.mean) / stats.std


def denormalize(window, stats: ChannelStats):
    _check_channels(window, stats)
    return np.asarray(window) * stats.std + stats.mean


# ---------------------------------------------------------------- taps

def rest_value(series, rate_hz=SAMPLE_RATE_HZ, seconds=REST_SECONDS):
    """Rest reading S(0): the mean over the initial rest period."""
    series = np.asarray(series, dtype=np.float64)
    n = max(1, int(round(rate_hz * seconds)))
    return series[:n].mean(axis=0)


def touch_flags(series, rest, threshold=DEFAULT_TAP_THRESHOLD):
    """f(t) = 1 where the squared relative change from rest reaches the threshold."""
    if threshold <= 0:
        raise ConfigurationError("tap threshold must be positive")
    rest = np.asarray(rest, dtype=np.float64)
    if np.any(rest == 0):
        raise RestCalibrationError("rest value S(0) is zero")
    rel = np.asarray(series, dtype=np.float64) / rest - 1.0
    return (rel * rel >= threshold).astype(np.int8)


def rising_edges(flags):
    """Indices t with flags[t-3..t] == 0, 0, 1, 1."""
    f = np.asarray(flags, dtype=np.int8)
    if len(f) < 4:
        return np.zeros(0, dtype=np.int64)
    hit = (f[:-3] == 0) & (f[1:-2] == 0) & (f[2:-1] == 1) & (f[3:] == 1)
    return np.flatnonzero(hit) + 3


def detect_taps(series, rest, threshold=DEFAULT_TAP_THRESHOLD, finger_index=1, timestamps_ms=None):
    """Debounced taps on one fingertip channel.

    ``rest`` is S(0); pass ``rest_value(series)`` when a rest period leads the
    recording.  Returns time-ordered :class:`TapEvent` records.
    """
    flags = touch_flags(series, rest, threshold)
    idx = rising_edges(flags)
    if timestamps_ms is None:
        timestamps_ms = np.arange(len(flags)) * FRAME_PERIOD_MS
    return [TapEvent(int(finger_index), int(timestamps_ms[i])) for i in idx]


class TapDetector:
    """Streaming tap detector over one or more fingertip channels."""

    def __init__(self, rest, finger_indices, threshold=DEFAULT_TAP_THRESHOLD):
        self.rest = np.atleast_1d(np.asarray(rest, dtype=np.float64))
        if np.any(self.rest == 0):
            raise RestCalibrationError("rest value S(0) is zero")
        if threshold <= 0:
            raise ConfigurationError("tap threshold must be positive")
        self.fingers = list(finger_indices)
        if len(self.fingers) != len(self.rest):
            raise ValueError("one rest value per finger required")
        self.threshold = threshold
        self.history = deque(maxlen=4)

    def push(self, readings, timestamp_ms):
        rel = np.atleast_1d(np.asarray(readings, dtype=np.float64)) / self.rest - 1.0
        self.history.append(rel * rel >= self.threshold)
        if len(self.history) < 4:
            return []
        f3, f2, f1, f0 = self.history
        fire = ~f3 & ~f2 & f1 & f0
        return [TapEvent(self.fingers[k], int(timestamp_ms)) for k in np.flatnonzero(fire)]


COLOR_BY_FINGER = (("index", "purple"), ("middle", "red"), ("ring", "blue"), ("pinky", "green"))


def select_color(thumb, index=0, middle=0, ring=0, pinky=0):
    """Pinch color: the thumb touching a finger picks that finger's color.

    Simultaneous contacts resolve by index > middle > ring > pinky.
    """
    if not thumb:
        return "none"
    touching = {"index": index, "middle": middle, "ring": ring, "pinky": pinky}
    for finger, color in COLOR_BY_FINGER:
        if touching[finger]:
            return color
    return "none"


__all__ = [
    "BASELINE_WINDOW", "DEFAULT_TAP_THRESHOLD", "N_INPUT_CHANNELS", "WINDOW_LENGTH",
    "BaselineCorrector", "ChannelMismatchError", "ChannelStats", "ConfigurationError",
    "FrameStream", "QuaternionNormError", "RestCalibrationError", "SensorFrame", "TapDetector",
    "TapEvent", "WristAngles", "baseline_correct", "baseline_correct_stream", "denormalize",
    "detect_taps", "downsample_hold", "euler_xyz_from_quat", "frame_features", "make_windows",
    "normalize", "quat_conj", "quat_from_axis_angle", "quat_from_euler_xyz", "quat_mul",
    "relative_wrist_angles", "rest_value", "rising_edges", "select_color", "touch_flags",
    "window_count",
]
