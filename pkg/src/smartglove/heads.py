"""Classification heads on top of frozen pose cores, and tap-gated typing."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .glovepose import ModelBundle, read_container, write_container, CorruptCheckpointError, ConfigHashMismatchError
from .nncore import Adam, Dense, relu_backward, relu_forward
from .nncore.losses import cross_entropy, softmax
from .schema import N_JOINTS

log = logging.getLogger(__name__)

TASK_CLASSES = {"dynamic_gesture": 50, "static_gesture": 48, "object": 34, "keyboard": 10}
# Class index -> character for the ten-key typing head (left pinky .. right pinky).
DEFAULT_KEY_MAP = ("a", "s", "d", "f", "v", "n", "j", "k", "l", ";")


class CoreMismatchError(ValueError):
    pass


@dataclass
class HeadConfig:
    num_classes: int
    hidden: int = 64
    uses_both_hands: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.hidden < 1:
            raise ValueError("hidden width must be positive")

    @property
    def n_hands(self):
        return 2 if self.uses_both_hands else 1

    @property
    def input_dim(self):
        return N_JOINTS * self.n_hands


@dataclass
class ClassPrediction:
    class_id: int
    probs: np.ndarray
    timestamp_ms: int | None = None


class Classifier:
    """Frozen core(s) -> concatenated angles -> standardize -> FC -> ReLU -> FC -> softmax."""

    def __init__(self, cores, config: HeadConfig):
        self.cores = list(cores)
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.fc1 = Dense(config.input_dim, config.hidden, rng, np.float64)
        self.fc2 = Dense(config.hidden, config.num_classes, rng, np.float64)
        self.in_mean = np.zeros(config.input_dim)
        self.in_std = np.ones(config.input_dim)
        self.loss_curve = []

    def params(self):
        return {**{f"fc1.{k}": p for k, p in self.fc1.params().items()},
                **{f"fc2.{k}": p for k, p in self.fc2.params().items()}}

    def core_digests(self):
        return [c.param_digest() for c in self.cores]

    def core_features(self, inputs):
        """Raw windows for each hand -> (B, 22 * hands) predicted angles."""
        if self.config.n_hands == 1:
            inputs = [inputs] if not isinstance(inputs, (list, tuple)) else inputs
        if len(inputs) != self.config.n_hands:
            raise CoreMismatchError(f"expected {self.config.n_hands} window arrays, got {len(inputs)}")
        return np.concatenate([c.predict(np.asarray(w)) for c, w in zip(self.cores, inputs)], axis=1)

    def logits_from_features(self, feats):
        z = (np.asarray(feats, np.float64) - self.in_mean) / self.in_std
        a, c1 = self.fc1.forward(z)
        r, cr = relu_forward(a)
        logits, c2 = self.fc2.forward(r)
        return logits, (c1, cr, c2)

    def proba_from_features(self, feats):
        return softmax(self.logits_from_features(feats)[0])


def attach_head(cores, config: HeadConfig) -> Classifier:
    cores = [cores] if isinstance(cores, ModelBundle) else list(cores)
    if len(cores) != config.n_hands:
        raise CoreMismatchError(f"head expects {config.n_hands} core(s), got {len(cores)}")
    for c in cores:
        if c.config.output_dim != N_JOINTS:
            raise CoreMismatchError("core output dimension must be 22")
    return Classifier(cores, config)


def train_head(clf: Classifier, inputs=None, labels=None, epochs=50, lr=1e-3, batch_size=64,
               features=None, seed=None):
    """Fit only the head; core outputs are computed once and never updated.

    Pass ``features`` (precomputed core outputs) to skip the core forward.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= clf.config.num_classes:
        raise ValueError("labels outside [0, num_classes)")
    if len(np.unique(labels)) < 2:
        log.warning("degenerate labels: training set has a single class")
    before = clf.core_digests()
    feats = clf.core_features(inputs) if features is None else np.asarray(features, np.float64)
    if len(feats) != len(labels):
        raise ValueError("features and labels differ in length")
    clf.in_mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    clf.in_std = np.where(std > 0, std, 1.0)
    params = list(clf.params().values())
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(clf.config.seed if seed is None else seed)
    n = len(labels)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for a in range(0, n, batch_size):
            idx = order[a:a + batch_size]
            logits, (c1, cr, c2) = clf.logits_from_features(feats[idx])
            loss, dlogits = cross_entropy(logits, labels[idx])
            clf.fc1.backward(relu_backward(clf.fc2.backward(dlogits, c2), cr), c1)
            opt.step()
            total += loss * len(idx)
        clf.loss_curve.append(total / n)
    if clf.core_digests() != before:
        raise RuntimeError("core parameters changed during head training")
    return clf


def classify(clf: Classifier, inputs=None, timestamps_ms=None, features=None):
    """Argmax class per window; returns a list of :class:`ClassPrediction`."""
    feats = clf.core_features(inputs) if features is None else np.asarray(features, np.float64)
    probs = clf.proba_from_features(feats)
    ts = [None] * len(probs) if timestamps_ms is None else [int(t) for t in timestamps_ms]
    return [ClassPrediction(int(np.argmax(p)), p, t) for p, t in zip(probs, ts)]


# ---------------------------------------------------------------- typing

@dataclass
class KeyEvent:
    timestamp_ms: int
    class_id: int
    key: str
    finger_index: int


@dataclass
class EmitStats:
    emitted: int = 0
    dropped: int = 0
    diagnostics: list = field(default_factory=list)


def keyboard_emit(taps, predictions, key_map=DEFAULT_KEY_MAP, stats: EmitStats | None = None):
    """One key event per tap, labelled with the latest prediction at or before the tap.

    Taps arriving before any prediction exists (window warmup) are dropped.
    """
    stats = stats if stats is not None else EmitStats()
    preds = sorted((p for p in predictions if p.timestamp_ms is not None), key=lambda p: p.timestamp_ms)
    times = np.array([p.timestamp_ms for p in preds], dtype=np.int64)
    out = []
    for tap in sorted(taps, key=lambda e: e.timestamp_ms):
        k = int(np.searchsorted(times, tap.timestamp_ms, side="right")) - 1
        if k < 0:
            msg = f"tap at {tap.timestamp_ms} ms (finger {tap.finger_index}) before first prediction; dropped"
            log.warning(msg)
            stats.dropped += 1
            stats.diagnostics.append(msg)
            continue
        cid = preds[k].class_id
        out.append(KeyEvent(int(tap.timestamp_ms), cid, key_map[cid] if cid < len(key_map) else str(cid),
                            tap.finger_index))
        stats.emitted += 1
    return out


# ---------------------------------------------------------------- files

def write_label_map(path, names):
    with open(path, "w", encoding="utf-8") as fh:
        for i, name in enumerate(names):
            fh.write(f"{i}\t{name}\n")


def read_label_map(path):
    names = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            idx, _, name = line.partition("\t")
            try:
                names[int(idx)] = name
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected '<index>\\t<name>'") from None
    if sorted(names) != list(range(len(names))):
        raise ValueError(f"{path}: class indices must be 0..n-1 without gaps")
    return [names[i] for i in range(len(names))]


def save_head(clf: Classifier, path):
    tensors = {f"param/{k}": p.values for k, p in clf.params().items()}
    tensors["input/mean"] = clf.in_mean
    tensors["input/std"] = clf.in_std
    config = asdict(clf.config)
    meta = {"core_digests": clf.core_digests(), "loss_curve": clf.loss_curve}
    write_container(path, "head", config, "+".join(c.config.hash() for c in clf.cores), tensors, meta)


def load_head(path, cores) -> Classifier:
    header, tensors = read_container(path)
    if header.get("kind") != "head":
        raise CorruptCheckpointError(f"{path}: not a head checkpoint")
    clf = attach_head(cores, HeadConfig(**header["config"]))
    if header["config_hash"] != "+".join(c.config.hash() for c in clf.cores) \
            or header["metadata"]["core_digests"] != clf.core_digests():
        raise ConfigHashMismatchError(f"{path}: head was trained on different core parameters")
    for k, p in clf.params().items():
        v = tensors[f"param/{k}"]
        if v.shape != p.shape:
            raise ConfigHashMismatchError(f"{path}: parameter {k} has shape {v.shape}")
        p.values[...] = v
    clf.in_mean = tensors["input/mean"]
    clf.in_std = tensors["input/std"]
    clf.loss_curve = list(header["metadata"]["loss_curve"])
    return clf
