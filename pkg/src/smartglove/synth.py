"""Synthetic glove world and the canonical dataset file format.

Kinematic joint trajectories are pushed through a coupling matrix and a
piecewise-linear yarn gauge to produce strain readings; wrist IMU
quaternions are synthesized from the wrist angles.  The generator doubles as
the ground-truth oracle for training and evaluation tests.
"""
from __future__ import annotations

import io
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .schema import (
    FINGERS,
    FRAME_PERIOD_MS,
    JOINT_NAMES,
    N_JOINTS,
    N_SENSORS,
    SAMPLE_RATE_HZ,
    SENSOR_NAMES,
    TIP_CHANNEL,
)
from .signal import FrameStream, quat_from_axis_angle, quat_from_euler_xyz, quat_mul

log = logging.getLogger(__name__)

STRAIN_MIN = 0.005
STRAIN_MAX = 155.0
STRAIN_PER_DEGREE = 0.3

# Modeling defaults, degrees: (low, high) per joint.
DEFAULT_LIMITS = np.array(
    [[0, 90], [-20, 20], [0, 110], [0, 80]] * 4
    + [[0, 90], [-20, 20], [0, 80]]
    + [[-70, 80], [-25, 35], [-85, 90]],
    dtype=np.float64,
)


# ---------------------------------------------------------------- sensor models

@dataclass
class GaugeModel:
    """Monotone piecewise-linear strain (%) -> dR/R0 map for one yarn."""

    knots: np.ndarray = field(default_factory=lambda: np.array([0.0, 20.0, STRAIN_MAX]))
    responses: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.5, 1.85]))
    floor: float = STRAIN_MIN
    drift_per_s: float = 0.0
    noise_std: float = 0.0

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=np.float64)
        self.responses = np.asarray(self.responses, dtype=np.float64)
        if self.knots[0] != 0.0 or self.knots[-1] != STRAIN_MAX:
            raise ValueError("gauge domain must be [0, 155] % strain")
        if self.responses[0] != 0.0:
            raise ValueError("gauge response at zero strain must be 0")
        if np.any(np.diff(self.knots) <= 0) or np.any(np.diff(self.responses) <= 0):
            raise ValueError("gauge map must be strictly increasing")
        if self.floor != STRAIN_MIN:
            raise ValueError("sensitivity floor is fixed at 0.005 % strain")

    def response(self, strain):
        return np.interp(strain, self.knots, self.responses)

    def slope_max(self):
        return float(np.max(np.diff(self.responses) / np.diff(self.knots)))

    def scaled(self, gain):
        return GaugeModel(self.knots.copy(), self.responses * gain, self.floor, self.drift_per_s, self.noise_std)


def default_gauges(n=N_SENSORS, noise_std=0.002, drift_per_s=0.0, gain_jitter=0.0, seed=0):
    rng = np.random.default_rng(seed)
    base = GaugeModel(noise_std=noise_std, drift_per_s=drift_per_s)
    if gain_jitter == 0.0:
        return [base] * n
    return [base.scaled(1.0 + gain_jitter * rng.uniform(-1, 1)) for _ in range(n)]


def _s(name):
    return SENSOR_NAMES.index(name)


def _j(name):
    return JOINT_NAMES.index(name)


def default_coupling():
    """25 x 22 joint-angle -> strain coupling (dimensionless weights).

    Each yarn follows its own joint with weight 1 and picks up smaller
    contributions from anatomically adjacent joints, which gives the sensor
    set some redundancy.
    """
    C = np.zeros((N_SENSORS, N_JOINTS))
    for f in FINGERS:
        C[_s(f"{f}_mcp"), _j(f"{f}_mcp_flex")] = 1.0
        C[_s(f"{f}_mcp"), _j(f"{f}_mcp_abd")] = 0.15
        C[_s(f"{f}_mcp"), _j(f"{f}_pip_flex")] = 0.1
        C[_s(f"{f}_pip"), _j(f"{f}_pip_flex")] = 1.0
        C[_s(f"{f}_pip"), _j(f"{f}_mcp_flex")] = 0.1
        C[_s(f"{f}_pip"), _j(f"{f}_dip_flex")] = 0.2
        C[_s(f"{f}_dip"), _j(f"{f}_dip_flex")] = 1.0
        C[_s(f"{f}_dip"), _j(f"{f}_pip_flex")] = 0.2
        C[_s(f"tip_{f}"), _j(f"{f}_dip_flex")] = 0.5
        C[_s(f"tip_{f}"), _j(f"{f}_pip_flex")] = 0.3
    C[_s("thumb_mcp"), _j("thumb_mcp_flex")] = 1.0
    C[_s("thumb_mcp"), _j("thumb_mcp_abd")] = 0.2
    C[_s("thumb_ip"), _j("thumb_ip_flex")] = 1.0
    C[_s("thumb_ip"), _j("thumb_mcp_flex")] = 0.1
    C[_s("thumb_cmc"), _j("thumb_mcp_abd")] = 1.0
    C[_s("thumb_cmc"), _j("thumb_mcp_flex")] = 0.2
    C[_s("tip_thumb"), _j("thumb_ip_flex")] = 0.5
    C[_s("tip_thumb"), _j("thumb_mcp_flex")] = 0.3
    webs = [("web_pinky_ring", "pinky", "ring"), ("web_ring_middle", "ring", "middle"),
            ("web_middle_index", "middle", "index")]
    for web, a, b in webs:
        C[_s(web), _j(f"{a}_mcp_abd")] = 0.6
        C[_s(web), _j(f"{b}_mcp_abd")] = 0.6
        C[_s(web), _j(f"{a}_mcp_flex")] = 0.1
        C[_s(web), _j(f"{b}_mcp_flex")] = 0.1
    C[_s("web_index_thumb"), _j("index_mcp_abd")] = 0.6
    C[_s("web_index_thumb"), _j("thumb_mcp_abd")] = 0.6
    C[_s("palm"), [_j(f"{f}_mcp_flex") for f in FINGERS]] = 0.2
    C[_s("palm"), _j("thumb_mcp_flex")] = 0.2
    return C


@dataclass
class CouplingMatrix:
    weights: np.ndarray = field(default_factory=default_coupling)
    strain_per_degree: float = STRAIN_PER_DEGREE
    # Joint angle at which the yarn over it is unstretched; the glove is
    # pre-tensioned so the full anatomical range maps to non-negative strain.
    rest_angle: np.ndarray = field(default_factory=lambda: DEFAULT_LIMITS[:, 0].copy())

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (N_SENSORS, N_JOINTS):
            raise ValueError("coupling must be 25 x 22")
        if np.any(self.weights < 0):
            raise ValueError("coupling weights must be nonnegative")

    def joint_strain(self, angles):
        return self.strain_per_degree * np.maximum(np.asarray(angles) - self.rest_angle, 0.0)

    def strain(self, angles):
        return self.joint_strain(angles) @ self.weights.T


# ---------------------------------------------------------------- trajectories

def generate_trajectory(seed, duration_s, smoothness=2.0, limits=None, rate_hz=SAMPLE_RATE_HZ,
                        max_components=5):
    """Band-limited random joint trajectories, (N, 22) degrees at ``rate_hz``.

    Each joint is a sum of at most five sinusoids with random phases and
    frequencies up to ``2 / smoothness`` Hz (never above 2 Hz), centred in
    its range and clipped to the limits.
    """
    if duration_s < 2:
        raise ValueError("duration must be at least 2 s")
    limits = DEFAULT_LIMITS if limits is None else np.asarray(limits, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * rate_hz))
    t = np.arange(n) / rate_hz
    f_max = min(2.0, 2.0 / smoothness) if np.isfinite(smoothness) else 0.0
    centre = limits.mean(axis=1)
    half = (limits[:, 1] - limits[:, 0]) / 2.0
    out = np.empty((n, limits.shape[0]))
    for j in range(limits.shape[0]):
        k = int(rng.integers(1, max_components + 1))
        freq = rng.uniform(0.1, 1.0, size=k) * f_max
        phase = rng.uniform(0, 2 * np.pi, size=k)
        amp = rng.uniform(0.3, 1.0, size=k)
        amp /= amp.sum()
        wave = (amp[:, None] * np.sin(2 * np.pi * freq[:, None] * t[None, :] + phase[:, None])).sum(0)
        out[:, j] = centre[j] + 1.1 * half[j] * wave
    return np.clip(out, limits[:, 0], limits[:, 1])


def hold_poses(poses, hold_s, rate_hz=SAMPLE_RATE_HZ, jitter_std=0.0, seed=0, limits=None):
    """Concatenate static holds of each pose with slow per-joint jitter."""
    limits = DEFAULT_LIMITS if limits is None else limits
    rng = np.random.default_rng(seed)
    n = int(round(hold_s * rate_hz))
    t = np.arange(n) / rate_hz
    segs = []
    for pose in np.atleast_2d(poses):
        wobble = np.sin(2 * np.pi * rng.uniform(0.05, 0.3, N_JOINTS)[None, :] * t[:, None]
                        + rng.uniform(0, 2 * np.pi, N_JOINTS)[None, :])
        offset = rng.normal(0.0, jitter_std, N_JOINTS)
        segs.append(pose[None, :] + offset + 0.5 * jitter_std * wobble)
    return np.clip(np.concatenate(segs, axis=0), limits[:, 0], limits[:, 1])


# ---------------------------------------------------------------- sensor simulation

@dataclass
class SimulationResult:
    frames: FrameStream
    angles: np.ndarray
    clipped: int = 0


def _small_rotation(rng, n, std_deg):
    axis = rng.normal(size=(n, 3))
    ang = rng.normal(0.0, std_deg, size=n)
    return quat_from_axis_angle(axis, ang)


def simulate_sensors(trajectory, gauges=None, coupling=None, seed=0, quat_noise_deg=0.5,
                     t0_ms=0, forearm_motion=True):
    """Strain readings and IMU quaternions for a joint-angle trajectory.

    ``gauges`` is one :class:`GaugeModel` (shared) or a list of 25.
    """
    traj = np.asarray(trajectory, dtype=np.float64)
    n = len(traj)
    coupling = coupling or CouplingMatrix()
    if gauges is None:
        gauges = default_gauges()
    if isinstance(gauges, GaugeModel):
        gauges = [gauges] * N_SENSORS
    rng = np.random.default_rng(seed)
    strain = coupling.strain(traj)
    clipped = int(np.count_nonzero((strain < 0) | (strain > STRAIN_MAX)))
    if clipped:
        log.debug("%d strain samples clipped to the gauge domain", clipped)
    strain = np.clip(strain, 0.0, STRAIN_MAX)
    t_s = np.arange(n) / SAMPLE_RATE_HZ
    hsy = np.empty((n, N_SENSORS))
    for i, g in enumerate(gauges):
        hsy[:, i] = g.response(strain[:, i]) + g.drift_per_s * t_s
        if g.noise_std > 0:
            hsy[:, i] += rng.normal(0.0, g.noise_std, n)

    if forearm_motion:
        # Slow forearm rotation about a random axis; the hand follows through the wrist.
        axis = rng.normal(size=3)
        rate = rng.uniform(-10, 10)
        qf = quat_mul(quat_from_axis_angle(axis, rng.uniform(0, 360)),
                      quat_from_axis_angle(np.broadcast_to(rng.normal(size=3), (n, 3)),
                                           rate * t_s))
    else:
        qf = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    q_rel = quat_from_euler_xyz(traj[:, 19], traj[:, 20], traj[:, 21])
    qh = quat_mul(qf, q_rel)
    if quat_noise_deg > 0:
        qh = quat_mul(qh, _small_rotation(rng, n, quat_noise_deg))
        qf = quat_mul(qf, _small_rotation(rng, n, quat_noise_deg))
    qh /= np.linalg.norm(qh, axis=1, keepdims=True)
    qf /= np.linalg.norm(qf, axis=1, keepdims=True)
    t_ms = t0_ms + np.arange(n, dtype=np.int64) * FRAME_PERIOD_MS
    return SimulationResult(FrameStream(t_ms, hsy, qh, qf), traj, clipped)


def add_tap_pulses(hsy, channel, onsets, amplitude=0.6, width=4):
    """Add rectangular pressure pulses to a fingertip channel, in place."""
    for k in onsets:
        hsy[k:k + width, channel] += amplitude
    return hsy


# ---------------------------------------------------------------- dataset file

FORMAT_TAG = "smartglove-dataset"
FORMAT_VERSION = 1
QUAT_COLUMNS = ("qh_w", "qh_x", "qh_y", "qh_z", "qf_w", "qf_x", "qf_y", "qf_z")
BASE_COLUMNS = ("t_ms",) + SENSOR_NAMES + QUAT_COLUMNS
ANGLE_COLUMNS = tuple(f"angle_{n}" for n in JOINT_NAMES)
TAP_COLUMNS = tuple(f"tap_{f}" for f in ("thumb", "index", "middle", "ring", "pinky"))
FLAG_COLUMNS = ("flag_mask", "flag_noise", "flag_scale")


class DatasetFormatError(ValueError):
    pass


@dataclass
class DatasetFile:
    """One recording: frames, ground-truth angles and optional annotations."""

    frames: FrameStream
    angles: np.ndarray | None = None
    labels: np.ndarray | None = None
    taps: np.ndarray | None = None
    subject: str = "S0"
    session: str = "0"
    sample_rate_hz: float = float(SAMPLE_RATE_HZ)
    extra: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    @property
    def columns(self):
        cols = list(BASE_COLUMNS)
        if self.angles is not None:
            cols += ANGLE_COLUMNS
        if self.labels is not None:
            cols.append("label")
        if self.taps is not None:
            cols += TAP_COLUMNS
        cols += [f"x_{k}" for k in self.extra]
        return cols

    def slice(self, a, b):
        sl = slice(a, b)
        return DatasetFile(
            self.frames[sl],
            None if self.angles is None else self.angles[sl],
            None if self.labels is None else self.labels[sl],
            None if self.taps is None else self.taps[sl],
            self.subject, self.session, self.sample_rate_hz,
            {k: v[sl] for k, v in self.extra.items()}, dict(self.meta),
        )


def _fmt(x):
    return "%.9g" % x


def _header_lines(ds: DatasetFile):
    lines = [
        f"# {FORMAT_TAG} v{FORMAT_VERSION}",
        f"# sample_rate_hz={_fmt(ds.sample_rate_hz)}",
        f"# subject={ds.subject}",
        f"# session={ds.session}",
    ]
    if ds.meta:
        lines.append("# meta=" + json.dumps(ds.meta, sort_keys=True))
    lines.append(",".join(ds.columns))
    return lines


def _rows_matrix(ds: DatasetFile):
    parts = [ds.frames.hsy, ds.frames.quat_hand, ds.frames.quat_forearm]
    if ds.angles is not None:
        parts.append(ds.angles)
    return np.concatenate(parts, axis=1)


def write_dataset(ds: DatasetFile, path, chunk_rows=20000):
    """Write the canonical text format (9 significant digits per value)."""
    if not ds.sample_rate_hz > 0:
        raise DatasetFormatError("sample rate must be positive")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(_header_lines(ds)) + "\n")
        for a in range(0, len(ds), chunk_rows):
            part = ds.slice(a, a + chunk_rows)
            reals = _rows_matrix(part)
            buf = io.StringIO()
            for r in range(len(part)):
                fields = [str(int(part.frames.t_ms[r]))]
                fields += [_fmt(v) for v in reals[r]]
                if part.labels is not None:
                    fields.append(str(int(part.labels[r])))
                if part.taps is not None:
                    fields += [str(int(v)) for v in part.taps[r]]
                fields += [_fmt(part.extra[k][r]) for k in part.extra]
                buf.write(",".join(fields))
                buf.write("\n")
            fh.write(buf.getvalue())


def _parse_header(fh, path):
    meta = {"sample_rate_hz": None, "subject": "S0", "session": "0", "meta": {}}
    first = fh.readline()
    if not first.startswith(f"# {FORMAT_TAG} v"):
        raise DatasetFormatError(f"{path}:1: missing '{FORMAT_TAG}' header")
    try:
        version = int(first.strip().rsplit("v", 1)[1])
    except ValueError:
        raise DatasetFormatError(f"{path}:1: malformed version tag") from None
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}:1: unsupported dataset version {version}")
    lineno = 1
    while True:
        line = fh.readline()
        lineno += 1
        if not line:
            raise DatasetFormatError(f"{path}:{lineno}: header has no column row")
        line = line.rstrip("\n")
        if not line.startswith("#"):
            columns = line.split(",")
            break
        key, sep, value = line[1:].strip().partition("=")
        if not sep:
            raise DatasetFormatError(f"{path}:{lineno}: malformed header line")
        if key == "sample_rate_hz":
            meta[key] = float(value)
        elif key == "meta":
            meta["meta"] = json.loads(value)
        else:
            meta[key] = value
    if meta["sample_rate_hz"] is None or not meta["sample_rate_hz"] > 0:
        raise DatasetFormatError(f"{path}: sample rate missing or not positive")
    for col in BASE_COLUMNS:
        if col not in columns:
            raise DatasetFormatError(f"{path}:{lineno}: missing column '{col}'")
    return meta, columns, lineno


def _layout(columns):
    idx = {c: k for k, c in enumerate(columns)}
    has_angles = all(c in idx for c in ANGLE_COLUMNS)
    if any(c in idx for c in ANGLE_COLUMNS) and not has_angles:
        missing = next(c for c in ANGLE_COLUMNS if c not in idx)
        raise DatasetFormatError(f"missing column '{missing}'")
    has_taps = all(c in idx for c in TAP_COLUMNS)
    extras = [c for c in columns if c.startswith("x_")]
    return idx, has_angles, "label" in idx, has_taps, extras


def _build_chunk(data, idx, has_angles, has_labels, has_taps, extras, meta):
    col = lambda names: data[:, [idx[c] for c in names]]
    frames = FrameStream(
        data[:, idx["t_ms"]].astype(np.int64),
        col(SENSOR_NAMES),
        col(QUAT_COLUMNS[:4]),
        col(QUAT_COLUMNS[4:]),
    )
    return DatasetFile(
        frames,
        col(ANGLE_COLUMNS) if has_angles else None,
        data[:, idx["label"]].astype(np.int64) if has_labels else None,
        col(TAP_COLUMNS).astype(np.int8) if has_taps else None,
        meta["subject"], meta["session"], meta["sample_rate_hz"],
        {c[2:]: data[:, idx[c]] for c in extras}, dict(meta["meta"]),
    )


def _parse_lines(lines, ncols, first_lineno, path):
    try:
        data = np.loadtxt(lines, delimiter=",", dtype=np.float64, ndmin=2)
        if data.shape[1] != ncols:
            raise ValueError
        return data
    except ValueError:
        for k, line in enumerate(lines):
            parts = line.rstrip("\n").split(",")
            if len(parts) != ncols:
                raise DatasetFormatError(
                    f"{path}:{first_lineno + k}: expected {ncols} columns, found {len(parts)}"
                ) from None
            try:
                [float(p) for p in parts]
            except ValueError:
                raise DatasetFormatError(f"{path}:{first_lineno + k}: unparsable value") from None
        raise


def iter_dataset(path, chunk_rows=20000):
    """Stream a dataset file as :class:`DatasetFile` chunks of bounded size."""
    with open(path, "r", encoding="utf-8") as fh:
        meta, columns, lineno = _parse_header(fh, path)
        layout = _layout(columns)
        lines = []
        start = lineno + 1
        for line in fh:
            if not line.strip():
                continue
            lines.append(line)
            if len(lines) >= chunk_rows:
                yield _build_chunk(_parse_lines(lines, len(columns), start, path), *layout, meta)
                start += len(lines)
                lines = []
        if lines or start == lineno + 1:
            data = _parse_lines(lines, len(columns), start, path) if lines else np.zeros((0, len(columns)))
            yield _build_chunk(data, *layout, meta)


def concat_datasets(parts):
    parts = list(parts)
    first = parts[0]
    cat = lambda xs: None if xs[0] is None else np.concatenate(xs)
    frames = FrameStream(
        np.concatenate([p.frames.t_ms for p in parts]),
        np.concatenate([p.frames.hsy for p in parts]),
        np.concatenate([p.frames.quat_hand for p in parts]),
        np.concatenate([p.frames.quat_forearm for p in parts]),
    )
    return DatasetFile(
        frames, cat([p.angles for p in parts]), cat([p.labels for p in parts]),
        cat([p.taps for p in parts]), first.subject, first.session, first.sample_rate_hz,
        {k: np.concatenate([p.extra[k] for p in parts]) for k in first.extra}, dict(first.meta),
    )


def read_dataset(path, chunk_rows=20000):
    return concat_datasets(iter_dataset(path, chunk_rows))


# ---------------------------------------------------------------- external adapter

class AdapterError(ValueError):
    pass


REQUIRED_CANONICAL = BASE_COLUMNS


def adapt_external(source, mapping=None, out_path=None):
    """Map a foreign CSV (header row + rows) into the canonical format.

    ``mapping`` is a dict (or path to a JSON file) with keys
    ``columns`` (canonical name -> source name; unlisted canonical names are
    looked up verbatim), ``angle_units`` ("degrees" or "radians"),
    ``subject``, ``session`` and ``sample_rate_hz``.  Source columns that map
    to nothing are kept as extra columns.  Canonical files are accepted as
    input too.
    """
    if isinstance(mapping, (str, os.PathLike)):
        with open(mapping, encoding="utf-8") as fh:
            mapping = json.load(fh)
    mapping = dict(mapping or {})
    with open(source, encoding="utf-8") as fh:
        head = fh.readline()
    if head.startswith(f"# {FORMAT_TAG}") and not mapping.get("columns"):
        ds = read_dataset(source)
    else:
        ds = _adapt_csv(source, mapping)
    if out_path is not None:
        write_dataset(ds, out_path)
    return ds


def _adapt_csv(source, mapping):
    colmap = mapping.get("columns", {})
    with open(source, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise AdapterError(f"{source}: empty file")
    header = [h.strip() for h in lines[0].rstrip("\n").split(",")]
    pos = {h: k for k, h in enumerate(header)}
    data = _parse_lines(lines[1:], len(header), 2, source) if len(lines) > 1 else np.zeros((0, len(header)))

    used = set()

    def fetch(canon, required):
        src = colmap.get(canon, canon)
        if src not in pos:
            if required:
                raise AdapterError(f"required column '{canon}' (source '{src}') not found")
            return None
        used.add(src)
        return data[:, pos[src]]

    base = {c: fetch(c, True) for c in BASE_COLUMNS}
    angle_cols = {c: fetch(c, False) for c in ANGLE_COLUMNS}
    if any(v is not None for v in angle_cols.values()) and any(v is None for v in angle_cols.values()):
        missing = next(c for c, v in angle_cols.items() if v is None)
        raise AdapterError(f"required column '{missing}' not mappable")
    angles = None
    if angle_cols[ANGLE_COLUMNS[0]] is not None:
        angles = np.stack([angle_cols[c] for c in ANGLE_COLUMNS], axis=1)
        units = mapping.get("angle_units", "degrees")
        if units == "radians":
            angles = np.rad2deg(angles)
        elif units != "degrees":
            raise AdapterError(f"unknown angle unit '{units}'")
    label = fetch("label", False)
    taps = [fetch(c, False) for c in TAP_COLUMNS]
    taps = np.stack(taps, axis=1).astype(np.int8) if all(t is not None for t in taps) else None
    extra = {h: data[:, pos[h]] for h in header if h not in used}
    extra = {(h[2:] if h.startswith("x_") else h): v for h, v in extra.items()}
    frames = FrameStream(
        base["t_ms"].astype(np.int64),
        np.stack([base[c] for c in SENSOR_NAMES], axis=1),
        np.stack([base[c] for c in QUAT_COLUMNS[:4]], axis=1),
        np.stack([base[c] for c in QUAT_COLUMNS[4:]], axis=1),
    )
    return DatasetFile(
        frames, angles, None if label is None else label.astype(np.int64), taps,
        str(mapping.get("subject", "S0")), str(mapping.get("session", "0")),
        float(mapping.get("sample_rate_hz", SAMPLE_RATE_HZ)), extra,
        {"source": os.path.basename(str(source))},
    )


# ---------------------------------------------------------------- convenience

def synthesize_recording(seed, duration_s, subject="S0", session="0", smoothness=2.0,
                         noise_std=0.002, drift_per_s=0.0, gain_jitter=0.0, quat_noise_deg=0.5):
    """Trajectory + simulation in one call, returned as a :class:`DatasetFile`."""
    rng = np.random.default_rng(seed)
    traj_seed, sim_seed, gauge_seed = rng.integers(0, 2**31, size=3)
    traj = generate_trajectory(int(traj_seed), duration_s, smoothness)
    gauges = default_gauges(noise_std=noise_std, drift_per_s=drift_per_s,
                            gain_jitter=gain_jitter, seed=int(gauge_seed))
    sim = simulate_sensors(traj, gauges, seed=int(sim_seed), quat_noise_deg=quat_noise_deg)
    return DatasetFile(sim.frames, sim.angles, subject=subject, session=session,
                       meta={"generator": "synth", "seed": int(seed)})


def random_class_poses(n_classes, seed, intra_std, min_sep_factor=3.0, limits=None, max_tries=10000):
    """Class-centroid poses whose pairwise separation is at least ``min_sep_factor * intra_std``.

    Separation is measured as the Euclidean distance in joint-angle space.
    Centroids stay one ``3 * intra_std`` margin inside the joint limits.
    """
    limits = DEFAULT_LIMITS if limits is None else limits
    rng = np.random.default_rng(seed)
    lo = limits[:, 0] + 3 * intra_std
    hi = limits[:, 1] - 3 * intra_std
    poses = []
    tries = 0
    while len(poses) < n_classes:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not place class poses with the requested separation")
        cand = rng.uniform(lo, hi)
        if all(np.linalg.norm(cand - p) >= min_sep_factor * intra_std for p in poses):
            poses.append(cand)
    return np.array(poses)


def synthesize_class_recording(seed, poses, hold_s=4.0, jitter_std=3.0, repeats=1, subject="S0",
                               session="0", noise_std=0.002, quat_noise_deg=0.5):
    """Static holds of labelled class poses, visited in a seeded random order."""
    rng = np.random.default_rng(seed)
    poses = np.atleast_2d(poses)
    order = np.concatenate([rng.permutation(len(poses)) for _ in range(repeats)])
    traj = hold_poses(poses[order], hold_s, jitter_std=jitter_std, seed=int(rng.integers(2**31)))
    per = len(traj) // len(order)
    labels = np.repeat(order, per)
    sim = simulate_sensors(traj, default_gauges(noise_std=noise_std), seed=int(rng.integers(2**31)),
                           quat_noise_deg=quat_noise_deg)
    return DatasetFile(sim.frames, sim.angles, labels=labels.astype(np.int64), subject=subject,
                       session=session, meta={"generator": "classes", "seed": int(seed)})


REST_POSE = np.array([20.0, 0.0, 25.0, 15.0] * 4 + [20.0, 0.0, 15.0] + [0.0, 0.0, 0.0])


def synthesize_typing(seed, n_taps, rest_s=10.0, gap_s=(1.0, 2.0), hand="right", key_poses=None,
                      noise_std=0.002, amplitude=0.6, width=4):
    """Rest calibration period followed by ``n_taps`` fingertip taps.

    Each tap picks one of the hand's five fingers; the hand holds that key's
    pose (one per finger) around the tap.  Returns the dataset plus the tap
    frame indices and finger numbers (1..10).
    """
    rng = np.random.default_rng(seed)
    fingers = ("thumb", "index", "middle", "ring", "pinky")
    # Reaching a key moves the MCP joints and the wrist; PIP/DIP stay at rest
    # (thumb MCP flexion included) so the fingertip channels only see the taps.
    movable = np.array([("mcp" in n or "wrist" in n) and n != "thumb_mcp_flex" for n in JOINT_NAMES],
                       dtype=float)
    if key_poses is None:
        key_poses = np.stack([REST_POSE + rng.normal(0, 8, N_JOINTS) * movable for _ in fingers])
    key_poses = np.asarray(key_poses, dtype=np.float64)
    key_poses = np.clip(key_poses, DEFAULT_LIMITS[:, 0] + 1, DEFAULT_LIMITS[:, 1] - 1)
    n_rest = int(round(rest_s * SAMPLE_RATE_HZ))
    segs = [np.tile(REST_POSE, (n_rest, 1))]
    labels = [np.full(n_rest, -1)]
    onsets, which = [], []
    pos = n_rest
    for _ in range(n_taps):
        k = int(rng.integers(len(fingers)))
        n = int(round(rng.uniform(*gap_s) * SAMPLE_RATE_HZ))
        segs.append(np.tile(key_poses[k], (n, 1)) + rng.normal(0, 0.3, (n, N_JOINTS)) * movable)
        labels.append(np.full(n, k))
        onsets.append(pos + n // 2)
        which.append(k)
        pos += n
    segs.append(np.tile(REST_POSE, (width + 4, 1)))
    labels.append(np.full(width + 4, -1))
    traj = np.clip(np.concatenate(segs), DEFAULT_LIMITS[:, 0], DEFAULT_LIMITS[:, 1])
    sim = simulate_sensors(traj, default_gauges(noise_std=noise_std), seed=int(rng.integers(2**31)))
    hsy = sim.frames.hsy
    taps = np.zeros((len(traj), len(fingers)), dtype=np.int64)
    for on, k in zip(onsets, which):
        add_tap_pulses(hsy, TIP_CHANNEL[fingers[k]], [on], amplitude, width)
        taps[on, k] = 1
    base = 0 if hand == "left" else 5
    finger_numbers = np.array(which) + base + 1
    ds = DatasetFile(sim.frames, sim.angles, labels=np.concatenate(labels).astype(np.int64), taps=taps,
                     meta={"generator": "typing", "seed": int(seed), "hand": hand})
    return ds, np.array(onsets, dtype=np.int64), finger_numbers


__all__ = [
    "ANGLE_COLUMNS", "BASE_COLUMNS", "CouplingMatrix", "DEFAULT_LIMITS", "DatasetFile",
    "DatasetFormatError", "AdapterError", "GaugeModel", "SimulationResult", "TIP_CHANNEL",
    "adapt_external", "add_tap_pulses", "concat_datasets", "default_coupling", "default_gauges",
    "generate_trajectory", "hold_poses", "iter_dataset", "random_class_poses", "read_dataset",
    "simulate_sensors", "synthesize_class_recording", "synthesize_recording", "synthesize_typing",
    "write_dataset", "REST_POSE",
]
