"""Joint-angle regression model: normalized window -> 2-layer Bi-LSTM ->
FC -> ReLU -> FC -> 22 angles, with training, streaming inference and
checkpointing."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
import zlib
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nncore
from .nncore import Adam, Dense, StackedBiLSTM, relu_backward, relu_forward
from .nncore.losses import bce_grad, bce_loss, smooth_l1, smooth_l1_grad
from .schema import N_INPUT_CHANNELS, N_JOINTS, WINDOW_LENGTH
from .signal import ChannelStats, normalize, relative_wrist_angles

log = logging.getLogger(__name__)


class ShapeMismatchError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class ModelConfig:
    input_channels: int = N_INPUT_CHANNELS
    window_length: int = WINDOW_LENGTH
    hidden_size: int = 64
    num_stacked_layers: int = 2
    fc1_width: int = 128
    output_dim: int = N_JOINTS
    multitask_flags_dim: int = 0
    tactile_dim: int = 0
    pooling: str = "last"
    dtype: str = "float32"

    def validate(self):
        for name in ("input_channels", "window_length", "hidden_size", "num_stacked_layers",
                     "fc1_width", "output_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.output_dim != N_JOINTS:
            raise ValueError("output_dim must be 22")
        if self.multitask_flags_dim not in (0, 3):
            raise ValueError("multitask_flags_dim must be 0 or 3")
        if self.pooling not in ("last", "mean"):
            raise ValueError("pooling must be 'last' or 'mean'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 64
    beta: float = 0.5
    seed: int = 0
    lr_schedule: str = "constant"  # or "cosine": per-step decay to 0 over the run

    def lr_at(self, step, total):
        if self.lr_schedule == "constant":
            return self.lr
        if self.lr_schedule == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / max(total, 1)))
        raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


class GlovePoseNet:
    """Parameter container and batched forward/backward for the pose model."""

    def __init__(self, config: ModelConfig, seed=0, backend=None):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        H = config.hidden_size
        self.rnn = StackedBiLSTM(config.input_channels, H, config.num_stacked_layers, rng, dt, backend)
        self.fc1 = Dense(2 * H, config.fc1_width, rng, dt)
        self.fc2 = Dense(config.fc1_width, config.output_dim + config.tactile_dim, rng, dt)
        self.flag_head = Dense(2 * H, config.multitask_flags_dim, rng, dt) if config.multitask_flags_dim else None

    def params(self):
        out = {f"rnn.{k}": p for k, p in self.rnn.params().items()}
        out.update({f"fc1.{k}": p for k, p in self.fc1.params().items()})
        out.update({f"fc2.{k}": p for k, p in self.fc2.params().items()})
        if self.flag_head is not None:
            out.update({f"flags.{k}": p for k, p in self.flag_head.params().items()})
        return out

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()

    def forward(self, x):
        """x: (B, T, C) normalized windows -> (outputs (B, 22 + tactile), flag logits or None, cache)."""
        cfg = self.config
        if x.ndim != 3 or x.shape[1] != cfg.window_length or x.shape[2] != cfg.input_channels:
            raise ShapeMismatchError(
                f"expected windows (B, {cfg.window_length}, {cfg.input_channels}), got {x.shape}"
            )
        seq = np.ascontiguousarray(np.swapaxes(x, 0, 1), dtype=cfg.np_dtype)
        hs, rnn_cache = self.rnn.forward(seq)
        pooled = hs[-1] if cfg.pooling == "last" else hs.mean(axis=0)
        a1, c1 = self.fc1.forward(pooled)
        r1, cr = relu_forward(a1)
        out, c2 = self.fc2.forward(r1)
        logits, cf = (None, None)
        if self.flag_head is not None:
            logits, cf = self.flag_head.forward(pooled)
        return out, logits, (hs.shape, rnn_cache, c1, cr, c2, cf)

    def backward(self, d_out, d_logits, cache):
        hs_shape, rnn_cache, c1, cr, c2, cf = cache
        dt = self.config.np_dtype
        d_r1 = self.fc2.backward(d_out.astype(dt, copy=False), c2)
        d_pooled = self.fc1.backward(relu_backward(d_r1, cr), c1)
        if self.flag_head is not None and d_logits is not None:
            d_pooled = d_pooled + self.flag_head.backward(d_logits.astype(dt, copy=False), cf)
        d_hs = np.zeros(hs_shape, dtype=dt)
        if self.config.pooling == "last":
            d_hs[-1] = d_pooled
        else:
            d_hs[:] = d_pooled / hs_shape[0]
        return np.swapaxes(self.rnn.backward(d_hs, rnn_cache), 0, 1)

    def get_state(self):
        return {k: p.values.copy() for k, p in self.params().items()}

    def set_state(self, state):
        params = self.params()
        if set(state) != set(params):
            raise ShapeMismatchError("parameter names do not match the model config")
        for k, p in params.items():
            v = np.asarray(state[k])
            if v.shape != p.shape:
                raise ShapeMismatchError(f"parameter {k}: shape {v.shape} != expected {p.shape}")
            p.values[...] = v


@dataclass
class ModelBundle:
    config: ModelConfig
    stats: ChannelStats
    label_mean: np.ndarray
    label_std: np.ndarray
    net: GlovePoseNet
    metadata: dict = field(default_factory=dict)

    def forward(self, windows):
        """Normalized windows (B, T, C) or (T, C) -> angles in degrees (+ flag logits)."""
        return forward(windows, self)

    def predict(self, raw_windows, batch_size=256):
        """Un-normalized windows -> (B, 22) degrees."""
        raw_windows = np.asarray(raw_windows)
        outs = []
        for a in range(0, len(raw_windows), batch_size):
            outs.append(forward(normalize(raw_windows[a:a + batch_size], self.stats), self)[0])
        if not outs:
            return np.zeros((0, N_JOINTS))
        return np.concatenate(outs, axis=0)

    def param_digest(self):
        h = hashlib.sha256()
        for k, p in sorted(self.net.params().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.values).tobytes())
        return h.hexdigest()


def forward(window, bundle: ModelBundle):
    """Angles (degrees) for normalized window(s); flag logits when multitask.

    Returns ``(angles, logits)``; a single (T, C) window gives a (22,) vector.
    """
    w = np.asarray(window)
    single = w.ndim == 2
    if single:
        w = w[None]
    out, logits, _ = bundle.net.forward(w)
    angles = out[:, :N_JOINTS].astype(np.float64) * bundle.label_std + bundle.label_mean
    if single:
        return angles[0], (None if logits is None else logits[0].astype(np.float64))
    return angles, (None if logits is None else logits.astype(np.float64))


# ---------------------------------------------------------------- datasets

class WindowDataset:
    """Windows addressed by start index into a frame-feature array.

    ``features`` (N, C) and ``labels`` (N, 22) are frame-aligned; each window
    covers ``features[s:s+length]`` and is labelled with the angles of its
    final frame.
    """

    def __init__(self, features, labels, starts, length=WINDOW_LENGTH, groups=None):
        self.features = np.asarray(features)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.starts = np.asarray(starts, dtype=np.int64)
        self.length = length
        self.groups = None if groups is None else np.asarray(groups)
        self._offsets = np.arange(length)

    @classmethod
    def from_segments(cls, segments, length=WINDOW_LENGTH, stride=1, groups=None):
        """Build from (features, labels) pairs; windows never straddle segments."""
        feats, labs, starts, grp = [], [], [], []
        base = 0
        for k, (f, y) in enumerate(segments):
            n = len(f)
            if n >= length:
                s = base + np.arange(0, n - length + 1, stride)
                starts.append(s)
                if groups is not None:
                    grp.append(np.full(len(s), groups[k], dtype=object))
            feats.append(np.asarray(f))
            labs.append(np.asarray(y))
            base += n
        starts = np.concatenate(starts) if starts else np.zeros(0, np.int64)
        g = np.concatenate(grp) if grp else None
        return cls(np.concatenate(feats), np.concatenate(labs), starts, length, g)

    def __len__(self):
        return len(self.starts)

    def subset(self, idx):
        g = None if self.groups is None else self.groups[idx]
        return WindowDataset(self.features, self.labels, self.starts[idx], self.length, g)

    def normalized(self, stats: ChannelStats, dtype=np.float32):
        feats = normalize(self.features, stats).astype(dtype)
        return WindowDataset(feats, self.labels, self.starts, self.length, self.groups)

    def window_features(self):
        """Frame rows referenced by at least one window (for fitting stats)."""
        mask = np.zeros(len(self.features), dtype=bool)
        for s in self.starts:
            mask[s:s + self.length] = True
        return self.features[mask]

    def windows(self, idx):
        return self.features[self.starts[idx][:, None] + self._offsets]

    def targets(self, idx=None):
        s = self.starts if idx is None else self.starts[idx]
        return self.labels[s + self.length - 1]

    def batch(self, idx):
        idx = np.asarray(idx)
        return self.windows(idx), self.targets(idx), None


# ---------------------------------------------------------------- training

def init_bundle(config: ModelConfig, stats: ChannelStats, label_mean, label_std, seed=0, backend=None):
    net = GlovePoseNet(config, seed=seed, backend=backend)
    return ModelBundle(config, stats, np.asarray(label_mean, np.float64),
                       np.asarray(label_std, np.float64), net,
                       {"seed": int(seed), "epochs": 0, "loss_curve": []})


def label_statistics(targets):
    mean = targets.mean(axis=0)
    std = targets.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def _loss_and_grads(bundle, X, Y, F, beta):
    """Forward + backward on one batch; returns (reg_loss, flag_loss)."""
    net = bundle.net
    out, logits, cache = net.forward(X)
    std = bundle.label_std
    pred = out[:, :N_JOINTS].astype(np.float64) * std + bundle.label_mean
    reg = smooth_l1(pred, Y, beta)
    d_out = np.zeros(out.shape, dtype=np.float64)
    # Mean over the 22 angle outputs only; tactile slots carry no targets.
    d_out[:, :N_JOINTS] = smooth_l1_grad(pred, Y, beta) * std
    flag = 0.0
    d_logits = None
    if logits is not None and F is not None:
        flag = bce_loss(logits, F)
        d_logits = bce_grad(logits.astype(np.float64), F)
    net.backward(d_out, d_logits, cache)
    return reg, flag


def train(dataset, config: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
          stats: ChannelStats | None = None, bundle: ModelBundle | None = None,
          on_epoch=None, backend=None):
    """Fit the pose model with smooth-L1 (+ flag BCE when multitask) and Adam.

    ``dataset`` holds raw (un-normalized) windows; channel statistics are fit
    on its frames unless given.  Label statistics set the fixed output scale.
    Returns a :class:`ModelBundle` with per-epoch losses in its metadata.
    """
    train_cfg = train_cfg or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    targets = dataset.targets()
    if not np.all(np.isfinite(targets)):
        raise ValueError("training labels must be finite")
    if bundle is None:
        config = (config or ModelConfig()).validate()
        if stats is None:
            stats = ChannelStats.fit(dataset.window_features())
        mean, std = label_statistics(targets)
        bundle = init_bundle(config, stats, mean, std, seed=train_cfg.seed, backend=backend)
    config = bundle.config
    data = dataset.normalized(bundle.stats, config.np_dtype)
    params = list(bundle.net.params().values())
    opt = Adam(params, lr=train_cfg.lr)
    bundle.net.zero_grad()
    rng = np.random.default_rng(train_cfg.seed + 1)
    meta = bundle.metadata
    meta.setdefault("loss_curve", [])
    meta.setdefault("reg_curve", [])
    meta.setdefault("flag_curve", [])
    meta.update({"seed": int(train_cfg.seed), "lr": train_cfg.lr, "batch_size": train_cfg.batch_size,
                 "beta": train_cfg.beta, "lr_schedule": train_cfg.lr_schedule, "backend": nncore.BACKEND})
    n = len(data)
    bs = train_cfg.batch_size
    train_cfg.lr_at(0, 1)  # reject unknown schedules before any work
    total_steps = train_cfg.epochs * -(-n // bs)
    step = 0
    for epoch in range(train_cfg.epochs):
        last_good = bundle.net.get_state()
        order = rng.permutation(n)
        tot_reg = tot_flag = 0.0
        t0 = time.perf_counter()
        for a in range(0, n, bs):
            idx = order[a:a + bs]
            X, Y, F = data.batch(idx)
            reg, flag = _loss_and_grads(bundle, X, Y, F, train_cfg.beta)
            if not np.isfinite(reg + flag):
                bundle.net.set_state(last_good)
                raise TrainingDivergedError(f"non-finite loss in epoch {epoch}", last_good=bundle)
            opt.lr = train_cfg.lr_at(step, total_steps)
            opt.step()
            step += 1
            tot_reg += reg * len(idx)
            tot_flag += flag * len(idx)
        reg_epoch = tot_reg / n
        flag_epoch = tot_flag / n
        meta["reg_curve"].append(reg_epoch)
        meta["flag_curve"].append(flag_epoch)
        meta["loss_curve"].append(reg_epoch + flag_epoch)
        meta["epochs"] = int(meta.get("epochs", 0)) + 1
        log.info("epoch %d loss %.5f (reg %.5f flags %.5f) %.1fs", epoch + 1,
                 reg_epoch + flag_epoch, reg_epoch, flag_epoch, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, reg_epoch + flag_epoch, bundle)
    return bundle


def epoch_order(n, seed, epochs):
    """Window visiting order per epoch, as used by :func:`train`."""
    rng = np.random.default_rng(seed + 1)
    return [rng.permutation(n) for _ in range(epochs)]


# ---------------------------------------------------------------- streaming inference

class StreamingPredictor:
    """Frame-at-a-time sliding-window inference with stride 1."""

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle
        self.length = bundle.config.window_length
        self.buf = deque(maxlen=self.length)
        self.latencies_us = []

    def push(self, t_ms, hsy, quat_hand, quat_forearm):
        """Add one frame; returns the 22 predicted angles once warm, else None."""
        t0 = time.perf_counter()
        wrist = relative_wrist_angles(np.asarray(quat_hand, np.float64),
                                      np.asarray(quat_forearm, np.float64)).as_array()
        row = np.concatenate([np.asarray(hsy, np.float64), wrist])
        self.buf.append(normalize(row, self.bundle.stats))
        if len(self.buf) < self.length:
            return None
        angles, _ = forward(np.array(self.buf), self.bundle)
        self.latencies_us.append((time.perf_counter() - t0) * 1e6)
        return angles

    def latency_summary(self):
        return latency_summary(self.latencies_us)


def latency_summary(lat_us):
    if not lat_us:
        return {"count": 0, "p50_us": None, "p95_us": None, "max_us": None}
    a = np.asarray(lat_us)
    return {"count": int(len(a)), "p50_us": float(np.median(a)),
            "p95_us": float(np.percentile(a, 95)), "max_us": float(a.max())}


@dataclass
class StreamPrediction:
    angles: np.ndarray  # (M, 22)
    t_ms: np.ndarray  # (M,) timestamp of each window's final frame
    latency: dict


def predict_stream(frames, bundle: ModelBundle):
    """Stride-1 sliding-window predictions over a :class:`FrameStream`.

    The first ``window_length - 1`` frames only warm the window.
    """
    sp = StreamingPredictor(bundle)
    out, ts = [], []
    for k in range(len(frames)):
        a = sp.push(frames.t_ms[k], frames.hsy[k], frames.quat_hand[k], frames.quat_forearm[k])
        if a is not None:
            out.append(a)
            ts.append(int(frames.t_ms[k]))
    angles = np.array(out) if out else np.zeros((0, N_JOINTS))
    lat = sp.latency_summary()
    log.info("predict_stream: %d predictions, median latency %s us", len(out), lat["p50_us"])
    return StreamPrediction(angles, np.array(ts, dtype=np.int64), lat)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"SGLV"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointError(Exception):
    category = "checkpoint-error"


class CorruptCheckpointError(CheckpointError):
    category = "corrupt-checkpoint"


class UnsupportedVersionError(CheckpointError):
    category = "unsupported-version"


class ConfigHashMismatchError(CheckpointError):
    category = "config-hash-mismatch"


def write_container(path, kind, config: dict, config_hash: str, tensors: dict, metadata: dict):
    """Versioned container: prefix, JSON header, raw tensor blobs, CRC32 trailer."""
    table = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "config": config, "config_hash": config_hash,
                         "tensors": table, "metadata": metadata},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def read_container(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _PREFIX.size + 4:
        raise CorruptCheckpointError(f"{path}: truncated checkpoint ({len(data)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a smartglove checkpoint")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version} is not supported")
    body, trailer = data[:-4], data[-4:]
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body) & 0xFFFFFFFF:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or modified)")
    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header: {exc}") from None
    blob = body[_PREFIX.size + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        a, n = entry["offset"], entry["nbytes"]
        if a + n > len(blob):
            raise CorruptCheckpointError(f"{path}: tensor {entry['name']} exceeds file")
        arr = np.frombuffer(blob[a:a + n], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, tensors


def save_bundle(bundle: ModelBundle, path):
    tensors = {f"param/{k}": v for k, v in bundle.net.get_state().items()}
    tensors["stats/mean"] = bundle.stats.mean
    tensors["stats/std"] = bundle.stats.std
    tensors["stats/degenerate"] = bundle.stats.degenerate.astype(np.uint8)
    tensors["labels/mean"] = bundle.label_mean
    tensors["labels/std"] = bundle.label_std
    write_container(path, "glovepose", bundle.config.to_dict(), bundle.config.hash(),
                    tensors, bundle.metadata)


def load_bundle(path, backend=None) -> ModelBundle:
    header, tensors = read_container(path)
    if header.get("kind") != "glovepose":
        raise CorruptCheckpointError(f"{path}: checkpoint kind {header.get('kind')!r} is not a pose model")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (TypeError, ValueError) as exc:
        raise ConfigHashMismatchError(f"{path}: invalid config: {exc}") from None
    if config.hash() != header["config_hash"]:
        raise ConfigHashMismatchError(f"{path}: config hash mismatch")
    net = GlovePoseNet(config, backend=backend)
    state = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    try:
        net.set_state(state)
    except ShapeMismatchError as exc:
        raise ConfigHashMismatchError(f"{path}: {exc}") from None
    stats = ChannelStats(tensors["stats/mean"], tensors["stats/std"], tensors["stats/degenerate"].astype(bool))
    return ModelBundle(config, stats, tensors["labels/mean"], tensors["labels/std"], net, header["metadata"])
