"""Channel-level window transforms and augmented multitask pretraining.

Transforms act on normalized windows (T, C), so noise sigma and the masking
value 0 are in normalized units.
"""
from __future__ import annotations

import numpy as np

from . import glovepose
from .glovepose import ModelConfig, TrainConfig, WindowDataset

TRANSFORMS = ("mask", "noise", "scale")
N_COPIES = 1 + len(TRANSFORMS)
DEFAULT_SIGMA = 0.06
DEFAULT_SCALE_RANGE = (0.5, 1.5)


def _pick(rng, n_channels, k, channels=None):
    pool = np.arange(n_channels) if channels is None else np.asarray(channels)
    if not 0 <= k <= len(pool):
        raise ValueError(f"k={k} outside [0, {len(pool)}]")
    return np.sort(rng.choice(pool, size=k, replace=False))


def _k(rng, k):
    return int(rng.integers(1, 4)) if k is None else int(k)


def mask_channels(window, k=None, rng=None, channels=None):
    """Zero ``k`` distinct channels (1..3 drawn when k is None) over all steps."""
    rng = np.random.default_rng(rng)
    out = np.array(window, copy=True)
    out[..., _pick(rng, out.shape[-1], _k(rng, k), channels)] = 0
    return out


def add_noise(window, sigma=DEFAULT_SIGMA, k=None, rng=None, channels=None):
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    rng = np.random.default_rng(rng)
    out = np.array(window, copy=True)
    idx = _pick(rng, out.shape[-1], _k(rng, k), channels)
    if sigma > 0:
        out[..., idx] += rng.normal(0.0, sigma, size=out[..., idx].shape).astype(out.dtype)
    return out


def scale_channels(window, scale_range=DEFAULT_SCALE_RANGE, k=None, rng=None, channels=None):
    """Multiply each chosen channel by one scalar drawn from U(low, high)."""
    lo, hi = scale_range
    if lo > hi:
        raise ValueError("scale range low must not exceed high")
    rng = np.random.default_rng(rng)
    out = np.array(window, copy=True)
    idx = _pick(rng, out.shape[-1], _k(rng, k), channels)
    out[..., idx] *= rng.uniform(lo, hi, size=len(idx)).astype(out.dtype)
    return out


def flags_for(copy):
    """Flag vector (mask, noise, scale) for copy 0 (original) .. 3."""
    y = np.zeros(len(TRANSFORMS))
    if copy:
        y[copy - 1] = 1.0
    return y


class AugmentedDataset:
    """Lazy view of a window dataset expanded fourfold.

    Row ``4*i`` is original window i; rows ``4*i + 1..3`` are its masked,
    noised and scaled copies.  Each row draws from its own RNG stream keyed by
    (seed, row), so any row can be rebuilt independently.
    """

    def __init__(self, base: WindowDataset, seed=0, sigma=DEFAULT_SIGMA,
                 scale_range=DEFAULT_SCALE_RANGE, channels=None):
        if len(base) == 0:
            raise ValueError("cannot augment an empty dataset")
        self.base = base
        self.seed = int(seed)
        self.sigma = sigma
        self.scale_range = scale_range
        self.channels = channels

    def __len__(self):
        return N_COPIES * len(self.base)

    @property
    def length(self):
        return self.base.length

    def flags(self, idx=None):
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        return np.eye(N_COPIES)[idx % N_COPIES][:, 1:]

    def targets(self, idx=None):
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        return self.base.targets(idx // N_COPIES)

    def window_features(self):
        return self.base.window_features()

    def _transform(self, w, row):
        copy = row % N_COPIES
        if copy == 0:
            return w
        rng = np.random.default_rng((self.seed, int(row)))
        name = TRANSFORMS[copy - 1]
        if name == "mask":
            return mask_channels(w, rng=rng, channels=self.channels)
        if name == "noise":
            return add_noise(w, self.sigma, rng=rng, channels=self.channels)
        return scale_channels(w, self.scale_range, rng=rng, channels=self.channels)

    def windows(self, idx):
        idx = np.asarray(idx)
        base = self.base.windows(idx // N_COPIES)
        return np.stack([self._transform(w, r) for w, r in zip(base, idx)]) if len(idx) else base

    def batch(self, idx):
        idx = np.asarray(idx)
        return self.windows(idx), self.targets(idx), self.flags(idx)

    def normalized(self, stats, dtype=np.float32):
        return AugmentedDataset(self.base.normalized(stats, dtype), self.seed, self.sigma,
                                self.scale_range, self.channels)

    def materialize(self):
        """All rows as arrays: (windows, angles, flags)."""
        return self.batch(np.arange(len(self)))


def build_augmented_dataset(dataset: WindowDataset, seed=0, **kw) -> AugmentedDataset:
    return AugmentedDataset(dataset, seed=seed, **kw)


def multitask_train(dataset, config: ModelConfig | None = None, train_cfg: TrainConfig | None = None,
                    stats=None, seed=None, **kw):
    """Pretrain on the fourfold augmented set with smooth-L1 + flag BCE.

    ``dataset`` may be a plain :class:`WindowDataset` (augmented here) or an
    :class:`AugmentedDataset`.  Per-epoch ``reg_curve``/``flag_curve`` in the
    bundle metadata sum to ``loss_curve``.
    """
    train_cfg = train_cfg or TrainConfig()
    config = config or ModelConfig(multitask_flags_dim=3)
    if config.multitask_flags_dim != 3:
        raise ValueError("multitask training needs multitask_flags_dim = 3")
    if not isinstance(dataset, AugmentedDataset):
        dataset = AugmentedDataset(dataset, seed=train_cfg.seed if seed is None else seed)
    # train() normalizes the base windows; the transforms then run per batch
    # on normalized values.
    return glovepose.train(dataset, config, train_cfg, stats=stats, **kw)
