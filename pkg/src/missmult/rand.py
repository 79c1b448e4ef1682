"""Seeded random variates used by the sampler and the data generators.

Every function takes a :class:`numpy.random.Generator`.  Streams are derived
from a ``(seed, stream_id)`` pair with :func:`make_rng`, so each chain or
replicate owns an independent, reproducible stream.

The Polya-Gamma sampler is the exact alternating-series method of Devroye
(as adapted by Polson, Scott and Windle) for ``PG(1, c)``, vectorised over
an array of tilting parameters.
"""
import numpy as np
from scipy import special

__all__ = [
    "make_rng",
    "draw_polya_gamma",
    "draw_gamma",
    "draw_dirichlet",
    "draw_categorical",
    "draw_mvnormal",
    "draw_negative_binomial",
]

# Switch point between the inverse-Gaussian and exponential envelopes.
_TRUNC = 0.64
_PI2_8 = np.pi ** 2 / 8.0


def make_rng(seed, stream_id=0):
    """Generator for stream ``stream_id`` under master ``seed``.

    Identical pairs give identical sequences; distinct ``stream_id`` values
    give independent streams (``SeedSequence`` spawn keys).
    """
    seed = int(seed)
    stream_id = int(stream_id)
    if seed < 0 or stream_id < 0:
        raise ValueError("seed and stream_id must be non-negative integers")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream_id,))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# Polya-Gamma PG(1, c)
# ---------------------------------------------------------------------------

def _series_coef(n, x):
    """n-th term of the alternating series for the J*(1) density at x."""
    k = (n + 0.5) * np.pi
    out = np.empty_like(x)
    hi = x > _TRUNC
    out[hi] = k * np.exp(-0.5 * k * k * x[hi])
    lo = ~hi
    xl = x[lo]
    out[lo] = np.exp(np.log(k) - 1.5 * (np.log(0.5 * np.pi) + np.log(xl))
                     - 2.0 * (n + 0.5) ** 2 / xl)
    return out


def _exponential_mass(z):
    """Probability of proposing from the truncated exponential piece."""
    t = _TRUNC
    fz = _PI2_8 + 0.5 * z * z
    b = np.sqrt(1.0 / t) * (t * z - 1.0)
    a = -np.sqrt(1.0 / t) * (t * z + 1.0)
    x0 = np.log(fz) + fz * t
    xb = x0 - z + special.log_ndtr(b)
    xa = x0 + z + special.log_ndtr(a)
    q_over_p = 4.0 / np.pi * (np.exp(xb) + np.exp(xa))
    return 1.0 / (1.0 + q_over_p)


def _truncated_inverse_gauss(rng, z):
    """IG(1/z, 1) restricted to (0, TRUNC); z may be zero."""
    t = _TRUNC
    out = np.empty_like(z)
    small = z < 1.0 / t   # mean 1/z beyond the truncation point

    idx = np.flatnonzero(small)
    while idx.size:
        e1 = rng.standard_exponential(idx.size)
        e2 = rng.standard_exponential(idx.size)
        bad = e1 * e1 > 2.0 * e2 / t
        while bad.any():
            nb = int(bad.sum())
            e1[bad] = rng.standard_exponential(nb)
            e2[bad] = rng.standard_exponential(nb)
            bad = e1 * e1 > 2.0 * e2 / t
        x = t / (1.0 + t * e1) ** 2
        accept = rng.random(idx.size) <= np.exp(-0.5 * z[idx] ** 2 * x)
        out[idx[accept]] = x[accept]
        idx = idx[~accept]

    idx = np.flatnonzero(~small)
    while idx.size:
        mu = 1.0 / z[idx]
        y = rng.standard_normal(idx.size) ** 2
        x = mu + 0.5 * mu * mu * y - 0.5 * mu * np.sqrt(4.0 * mu * y + (mu * y) ** 2)
        flip = rng.random(idx.size) > mu / (mu + x)
        x[flip] = mu[flip] ** 2 / x[flip]
        ok = x < t
        out[idx[ok]] = x[ok]
        idx = idx[~ok]
    return out


def draw_polya_gamma(rng, c):
    """Exact draws from PG(1, c), elementwise over ``c``.

    Returns a float for scalar input, otherwise an array shaped like ``c``.
    The distribution depends on ``c`` only through ``|c|``.
    """
    c_arr = np.asarray(c, dtype=float)
    scalar = c_arr.ndim == 0
    z = 0.5 * np.abs(c_arr.ravel())
    out = np.empty_like(z)
    pending = np.arange(z.size)
    while pending.size:
        zp = z[pending]
        fz = _PI2_8 + 0.5 * zp * zp
        use_exp = rng.random(pending.size) < _exponential_mass(zp)
        x = np.empty_like(zp)
        n_exp = int(use_exp.sum())
        x[use_exp] = _TRUNC + rng.standard_exponential(n_exp) / fz[use_exp]
        x[~use_exp] = _truncated_inverse_gauss(rng, zp[~use_exp])

        s = _series_coef(0, x)
        y = rng.random(pending.size) * s
        accepted = np.zeros(pending.size, dtype=bool)
        active = np.arange(pending.size)
        n = 0
        while active.size:
            n += 1
            if n % 2 == 1:
                s[active] -= _series_coef(n, x[active])
                hit = y[active] <= s[active]
                accepted[active[hit]] = True
                active = active[~hit]
            else:
                s[active] += _series_coef(n, x[active])
                active = active[y[active] <= s[active]]
        out[pending[accepted]] = 0.25 * x[accepted]
        pending = pending[~accepted]
    if scalar:
        return float(out[0])
    return out.reshape(c_arr.shape)


# ---------------------------------------------------------------------------
# Standard variates
# ---------------------------------------------------------------------------

def draw_gamma(rng, shape, rate, size=None):
    """Gamma draws in (shape, rate) form."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise ValueError("gamma shape and rate must be positive")
    return rng.gamma(shape, 1.0 / rate, size=size)


def draw_dirichlet(rng, concentration):
    """Dirichlet draw via normalised gammas; zero entries stay exactly zero.

    A 2-D ``concentration`` gives one draw per row.
    """
    conc = np.asarray(concentration, dtype=float)
    if np.any(conc < 0) or np.any(conc.sum(axis=-1) <= 0):
        raise ValueError("Dirichlet concentrations must be non-negative "
                         "with a positive total")
    g = np.zeros_like(conc)
    pos = conc > 0
    g[pos] = rng.standard_gamma(conc[pos])
    total = g.sum(axis=-1, keepdims=True)
    # All-underflow rows are possible for tiny concentrations; fall back to
    # the mean so the result is still a probability vector.
    bad = (total <= 0).ravel()
    if bad.any():
        g2 = g.reshape(-1, conc.shape[-1])
        c2 = conc.reshape(-1, conc.shape[-1])
        g2[bad] = c2[bad]
        g = g2.reshape(conc.shape)
        total = g.sum(axis=-1, keepdims=True)
    return g / total


def draw_categorical(rng, weights):
    """Index draw proportional to ``weights``.

    A 1-D input returns an int; a 2-D input returns one index per row.
    """
    w = np.asarray(weights, dtype=float)
    one = w.ndim == 1
    w2 = np.atleast_2d(w)
    if np.any(w2 < 0):
        raise ValueError("categorical weights must be non-negative")
    cum = np.cumsum(w2, axis=1)
    total = cum[:, -1]
    if np.any(~(total > 0)):
        raise ValueError("categorical weights must have a positive sum")
    u = rng.random(w2.shape[0]) * total
    idx = (cum <= u[:, None]).sum(axis=1)
    # guard against u landing exactly on the total through rounding
    idx = np.minimum(idx, w2.shape[1] - 1)
    return int(idx[0]) if one else idx


def draw_mvnormal(rng, mean, covariance=None, *, precision=None):
    """Multivariate normal draw.

    Either ``covariance`` or ``precision`` must be given; the precision form
    avoids an explicit inverse in the conjugate regression updates.
    """
    mean = np.asarray(mean, dtype=float)
    z = rng.standard_normal(mean.shape[0])
    if precision is not None:
        try:
            chol = np.linalg.cholesky(np.asarray(precision, dtype=float))
        except np.linalg.LinAlgError as exc:
            raise ValueError("precision matrix is not positive definite") from exc
        # x = mean + L^{-T} z has covariance (L L^T)^{-1}
        return mean + np.linalg.solve(chol.T, z)
    try:
        chol = np.linalg.cholesky(np.asarray(covariance, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance matrix is not positive definite") from exc
    return mean + chol @ z


def draw_negative_binomial(rng, mean, size, n=None):
    """Gamma-Poisson draw with the given mean and variance mean + mean**2/size.

    ``mean`` may contain zeros (the draw is then zero).
    """
    mean = np.asarray(mean, dtype=float)
    size = np.asarray(size, dtype=float)
    if np.any(size <= 0):
        raise ValueError("negative binomial size must be positive")
    if np.any(mean < 0):
        raise ValueError("negative binomial mean must be non-negative")
    shape = np.broadcast_shapes(mean.shape, size.shape) if n is None else n
    lam = rng.gamma(np.broadcast_to(size, shape), np.broadcast_to(mean / size, shape))
    return rng.poisson(lam)
