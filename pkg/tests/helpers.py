"""Shared numeric test utilities: finite differences and parameter shaking."""

import numpy as np

from tandens.rng import RandomStream


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numeric_gradient(f, params, step=1e-5):
    """Central finite differences of a scalar function of the given parameters."""
    grads = []
    for p in params:
        base = p.value.copy()
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        for idx in range(base.size):
            bumped = base.reshape(-1).copy()
            bumped[idx] = base.reshape(-1)[idx] + step
            p.value = bumped.reshape(base.shape)
            f_plus = f()
            bumped[idx] = base.reshape(-1)[idx] - step
            p.value = bumped.reshape(base.shape)
            f_minus = f()
            flat[idx] = (f_plus - f_minus) / (2.0 * step)
        p.value = base
        grads.append(g)
    return grads


def numeric_jacobian(fn, x0, step=1e-5):
    """Central-difference Jacobian of fn: (d,) -> (d,), returned as (d_out, d_in)."""
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.size
    cols = []
    for j in range(d):
        xp = x0.copy()
        xp[j] += step
        xm = x0.copy()
        xm[j] -= step
        cols.append((fn(xp) - fn(xm)) / (2.0 * step))
    return np.stack(cols, axis=1)


def shake_params(params, seed, scale=0.3, overrides=None):
    """Add seeded noise to every parameter (random parameterizations for tests).

    overrides maps a name substring to a different noise scale; used to keep
    mixture log-scales moderate when a test integrates over a fixed box.
    """
    stream = RandomStream(seed).split("shake")
    for p in params:
        s = scale
        for key, value in (overrides or {}).items():
            if key in p.name:
                s = value
        p.value = p.value + stream.split(p.name).normal(p.value.shape, scale=s)


def transform_fn(transform):
    """Single-instance forward as a plain (d,) -> (d,) function."""

    def fn(x):
        z, _ = transform.forward(_const_row(x))
        return z.data[0]

    return fn


def _const_row(x):
    from tandens import diffcore as dc

    return dc.constant(np.asarray(x, dtype=np.float64)[None, :])


def forward_logdet(transform, x_row):
    z, ld = transform.forward(_const_row(x_row))
    return z.data[0], float(ld.data[0])


def quadrature_mass_1d(log_prob_fn, sample_fn, n_points=8001, margin=10.0):
    """Trapezoid mass of exp(log_prob) over a box sized from model samples."""
    s = sample_fn(2000)[:, 0]
    grid = np.linspace(s.min() - margin, s.max() + margin, n_points)
    dens = np.exp(log_prob_fn(grid[:, None]))
    return float(np.trapezoid(dens, grid))


def quadrature_mass_2d(log_prob_fn, sample_fn, n_points=801, margin=8.0):
    s = sample_fn(2000)
    lo = s.min(axis=0) - margin
    hi = s.max(axis=0) + margin
    ax0 = np.linspace(lo[0], hi[0], n_points)
    ax1 = np.linspace(lo[1], hi[1], n_points)
    xx, yy = np.meshgrid(ax0, ax1, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    dens = np.exp(log_prob_fn(pts)).reshape(n_points, n_points)
    return float(np.trapezoid(np.trapezoid(dens, ax1, axis=1), ax0))


def quadrature_cdf_1d(log_prob_fn, lo, hi, n_points=8001):
    """Cumulative distribution of a 1-D model on a grid, by trapezoid quadrature."""
    grid = np.linspace(lo, hi, n_points)
    dens = np.exp(log_prob_fn(grid[:, None]))
    cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) * 0.5 * np.diff(grid))])
    return grid, cdf / cdf[-1]
