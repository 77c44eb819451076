import numpy as np

from .tensor import PreconditionError


def relative_error(analytic, numeric, floor=1e-5):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps vanishing gradients
    from turning round-off into huge relative errors."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(loss_fn, params, h=1e-5, n_samples=None, rng=None, floor=1e-5):
    """Compare backprop gradients with central finite differences.

    ``loss_fn()`` must rebuild the graph from the current parameter values and
    return a single-element tensor. Returns the worst relative error over the
    probed entries (all entries, or ``n_samples`` drawn uniformly across the
    flattened parameter set).
    """
    if not 1e-6 <= h <= 1e-3:
        raise PreconditionError(f"step h={h} outside [1e-6, 1e-3]")
    for p in params.values():
        p.grad = None
    out = loss_fn()
    if out.size != 1:
        raise PreconditionError(f"gradient_check needs a scalar output, got shape {out.shape}")
    out.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    entries = [(name, i) for name, p in params.items() for i in range(p.size)]
    if n_samples is not None and n_samples < len(entries):
        rng = rng if rng is not None else np.random.default_rng(0)
        picks = rng.choice(len(entries), size=n_samples, replace=False)
        entries = [entries[k] for k in sorted(picks)]

    worst = 0.0
    for name, i in entries:
        flat = params[name].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        down = loss_fn().item()
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, relative_error(analytic[name].reshape(-1)[i], numeric, floor))
    return worst
