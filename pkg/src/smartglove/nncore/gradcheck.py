import numpy as np


def grad_check(fn, params, h=1e-5, max_coords=None, seed=0, floor=1e-7):
    """Largest relative error between reverse-mode and central-difference gradients.

    ``fn()`` must zero the gradients of ``params``, evaluate the loss, run the
    backward pass and return the loss as a float.  When ``max_coords`` is set,
    that many coordinates are sampled uniformly over all parameters; otherwise
    every coordinate is checked.  Gradients smaller than ``floor`` in both
    estimates are compared on an absolute scale.
    """
    params = list(params)
    fn()
    analytic = [p.grad.copy() for p in params]
    coords = [(k, i) for k, p in enumerate(params) for i in range(p.values.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[j] for j in pick]
    worst = 0.0
    for k, i in coords:
        flat = params[k].values.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        a = analytic[k].reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    fn()
    return worst
