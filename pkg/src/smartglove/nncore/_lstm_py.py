"""Pure-numpy LSTM recurrence; same contract as the compiled ``_lstm_ext``."""
import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(xw, w_h, reverse=False):
    T, B, G = xw.shape
    H = w_h.shape[0]
    if G != 4 * H or w_h.shape[1] != G:
        raise ValueError("shape mismatch between projections and recurrent weights")
    hs = np.zeros((T, B, H), dtype=xw.dtype)
    cs = np.zeros((T, B, H), dtype=xw.dtype)
    gates = np.empty((T, B, G), dtype=xw.dtype)
    order = range(T - 1, -1, -1) if reverse else range(T)
    prev = None
    for t in order:
        z = xw[t].copy()
        if prev is not None:
            z += hs[prev] @ w_h
        gates[t, :, :H] = _sigmoid(z[:, :H])
        gates[t, :, H:2 * H] = _sigmoid(z[:, H:2 * H])
        gates[t, :, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        gates[t, :, 3 * H:] = _sigmoid(z[:, 3 * H:])
        gi, gf, gg, go = (gates[t, :, k * H:(k + 1) * H] for k in range(4))
        c = gi * gg
        if prev is not None:
            c += gf * cs[prev]
        cs[t] = c
        hs[t] = go * np.tanh(c)
        prev = t
    return hs, cs, gates


def lstm_backward(dhs, hs, cs, gates, w_h, reverse=False):
    T, B, G = gates.shape
    H = w_h.shape[0]
    if G != 4 * H or dhs.shape != (T, B, H):
        raise ValueError("shape mismatch in lstm_backward")
    dg = np.zeros((T, B, G), dtype=gates.dtype)
    dwh = np.zeros((H, G), dtype=gates.dtype)
    dh_next = np.zeros((B, H), dtype=gates.dtype)
    dc_next = np.zeros((B, H), dtype=gates.dtype)
    order = list(range(T - 1, -1, -1) if reverse else range(T))
    for step in range(T - 1, -1, -1):
        t = order[step]
        tp = order[step - 1] if step > 0 else None
        gi, gf, gg, go = (gates[t, :, k * H:(k + 1) * H] for k in range(4))
        tc = np.tanh(cs[t])
        cp = cs[tp] if tp is not None else 0.0
        dh = dhs[t] + dh_next
        dc = dc_next + dh * go * (1.0 - tc * tc)
        dg[t, :, :H] = dc * gg * gi * (1.0 - gi)
        dg[t, :, H:2 * H] = dc * cp * gf * (1.0 - gf)
        dg[t, :, 2 * H:3 * H] = dc * gi * (1.0 - gg * gg)
        dg[t, :, 3 * H:] = dh * tc * go * (1.0 - go)
        dc_next = dc * gf
        if tp is not None:
            dh_next = dg[t] @ w_h.T
            dwh += hs[tp].T @ dg[t]
    return dg, dwh
