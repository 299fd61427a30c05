"""Losses with their gradients.  All reduce by the mean over elements."""
import numpy as np


def smooth_l1(pred, target, beta=0.5):
    """Huber-style loss: ``0.5 d^2 / beta`` inside the knee, ``|d| - beta/2`` outside."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    if d.size == 0:
        return 0.0
    elem = np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)
    return float(elem.mean())


def smooth_l1_grad(pred, target, beta=0.5):
    pred = np.asarray(pred)
    d = pred - np.asarray(target, dtype=pred.dtype)
    g = np.where(np.abs(d) < beta, d / beta, np.sign(d))
    return (g / max(d.size, 1)).astype(pred.dtype, copy=False)


def bce_loss(logits, targets):
    """Mean binary cross-entropy on logits, ``max(z,0) - z*y + log1p(exp(-|z|))``."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.size == 0:
        return 0.0
    return float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def bce_grad(logits, targets):
    z = np.asarray(logits)
    y = np.asarray(targets, dtype=z.dtype)
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return ((p - y) / max(z.size, 1)).astype(z.dtype, copy=False)


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, labels):
    """Mean categorical cross-entropy over rows; returns (loss, dlogits)."""
    z = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    shifted = z.astype(np.float64) - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsum - shifted[np.arange(n), labels]))
    p = np.exp(shifted - logsum[:, None])
    p[np.arange(n), labels] -= 1.0
    return loss, (p / n).astype(z.dtype, copy=False)
