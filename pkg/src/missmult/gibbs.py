"""Metropolis-Hastings within Gibbs sampler for missZIDM and its variants.

Each ``update_*`` function refreshes one block for every index at once.
Within a sweep the per-visit and per-individual updates are conditionally
independent given the shared parameters (theta, the regression
coefficients), so the vectorised form is the same Markov kernel as looping
over sites, visits and individuals in turn.

Updates mutate the state in place and return the refreshed block.
"""
from dataclasses import dataclass, field, asdict
import logging
import time

import numpy as np
from scipy import special

from .model import (
    Hyperparameters, InvariantError, LatentState, check_state, derive,
    logistic, misclassified_counts, normalize_rows, uses_classification_matrix,
)
from .rand import draw_categorical, draw_gamma, draw_mvnormal, draw_polya_gamma, make_rng

log = logging.getLogger(__name__)

ADAPT_TARGET = 0.44
A_FLOOR = 1e-3


@dataclass
class RunConfig:
    iterations: int = 5000
    burn_in: int = 2500
    thin: int = 2
    seed: int = 0
    chains: int = 1
    mh_step_size: float = 0.1
    adapt_mh: bool = True
    block_tau_z: bool = True     # joint (tau, z) draw; always on under no_lucky_guess
    check_invariants: bool = False

    def __post_init__(self):
        if self.iterations < 1 or not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1 or self.chains < 1:
            raise ValueError("thin and chains must be >= 1")
        if not self.mh_step_size > 0:
            raise ValueError("mh_step_size must be positive")

    @property
    def n_retained(self):
        return (self.iterations - self.burn_in) // self.thin


@dataclass
class ChainOutput:
    draws: dict
    acceptance_rate_beta_gamma: np.ndarray
    seed: int
    stream_id: int
    config: RunConfig
    hyper: Hyperparameters
    mh_step_size: np.ndarray = None
    runtime: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return next(iter(self.draws.values())).shape[0]


# ---------------------------------------------------------------------------
# Closed-form conditional probabilities
# ---------------------------------------------------------------------------

def tau_hit_probability(psi, theta_tt):
    """P(tau = 1 | y = z = t): a miss that happens to report the truth."""
    num = psi * theta_tt
    return num / (num + 1.0 - psi)


def zeta_on_probability(eta, gamma, mu):
    """P(zeta = 1 | no individuals of this class), alpha integrated out."""
    eta = np.asarray(eta, dtype=float)
    on = eta * (1.0 + mu) ** (-np.asarray(gamma, dtype=float))
    return on / (on + 1.0 - eta)


def z_weights(Theta_row, theta_col, psi_row=None):
    """Unnormalised P(z = t | tau = 1, y = c) over t.

    ``theta_col`` is column c of theta.  ``psi_row`` carries P(tau = 1 | z = t);
    it cancels when equal across classes.
    """
    w = np.asarray(Theta_row, dtype=float) * np.asarray(theta_col, dtype=float)
    if psi_row is not None:
        w = w * psi_row
    return w


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

def initialize_state(data, hyper, rng):
    dims, cov = data.dims, data.covariates
    T, C, V, M = dims.T, dims.C, dims.V, dims.M
    v = hyper.variant
    z = data.y.copy()
    if v != "ZIDM":
        pinned = data.is_validated
        z[pinned] = data.validated[pinned]
    if v == "ZIDM":
        tau = np.zeros(M, dtype=np.int64)
    elif v == "DMDM":
        tau = np.ones(M, dtype=np.int64)
    else:
        tau = (z != data.y).astype(np.int64)

    if uses_classification_matrix(v):
        a = np.maximum(hyper.nu_matrix(T, C), A_FLOOR)
        if hyper.no_lucky_guess:
            np.fill_diagonal(a, 0.0)
    else:
        a = np.ones((T, C))

    def beta(mu, P):
        b = np.zeros((T, P))
        b[:, 0] = mu
        return b

    state = LatentState(
        z=z, tau=tau,
        zeta=np.ones((V, T), dtype=np.int64), alpha=np.ones((V, T)),
        a=a, u=draw_gamma(rng, 1.0, 1.0, size=T), mu=draw_gamma(rng, 1.0, 1.0, size=V),
        omega_tau=np.ones(M), omega_zeta=np.ones((V, T)),
        beta_psi=beta(hyper.mu_psi, cov.x_indiv.shape[1]),
        beta_eta=beta(hyper.mu_eta, cov.x_site.shape[1]),
        beta_gamma=beta(hyper.mu_gamma, cov.x_visit.shape[1]),
    )
    check_state(state, data, hyper)
    return state


# ---------------------------------------------------------------------------
# Block updates
# ---------------------------------------------------------------------------

def update_mu(state, data, rng):
    abar = state.alpha.sum(axis=1)
    if np.any(abar <= 0):
        raise InvariantError("mu update needs a positive alpha total at every visit")
    state.mu = draw_gamma(rng, data.dims.L, abar)
    return state.mu


def _psi_matrix(state, data):
    return logistic(data.covariates.x_indiv @ state.beta_psi.T)


def update_tau(state, data, hyper, rng):
    """Hit/miss indicators given z: forced miss when y != z."""
    y, z = data.y, state.z
    psi = _psi_matrix(state, data)
    idx = np.arange(y.shape[0])
    theta = normalize_rows(state.a)
    p = tau_hit_probability(psi[idx, z], theta[z, z])
    draw = (rng.random(y.shape[0]) < p).astype(np.int64)
    state.tau = np.where(y != z, 1, draw)
    return state.tau


def update_z(state, data, hyper, rng):
    """True classes given tau; validated individuals stay pinned."""
    y = data.y
    z = np.where(state.tau == 0, y, state.z)
    free = (state.tau == 1) & ~data.is_validated
    k = np.flatnonzero(free)
    if k.size:
        Theta = normalize_rows(state.alpha)
        theta = normalize_rows(state.a)
        w = Theta[data.visit_of[k]] * theta[:, y[k]].T
        if hyper.misclassified:
            w = w * _psi_matrix(state, data)[k]
        if np.any(~(w.sum(axis=1) > 0)):
            raise InvariantError("all z weights are zero (degenerate theta column)")
        z[k] = draw_categorical(rng, w)
    pinned = data.is_validated
    z[pinned] = data.validated[pinned]
    state.z = z
    return z


def update_tau_z_block(state, data, hyper, rng):
    """Joint draw of (tau, z) for each individual, omega integrated out.

    Needed under the no-lucky-guess restriction, where alternating single
    updates of tau and z cannot leave their starting configuration.
    """
    y = data.y
    T = data.dims.T
    Theta = normalize_rows(state.alpha)
    theta = normalize_rows(state.a)
    psi = _psi_matrix(state, data)
    pinned = data.is_validated
    z = state.z.copy()
    tau = state.tau.copy()

    k = np.flatnonzero(~pinned)
    if k.size:
        Th = Theta[data.visit_of[k]]
        miss = Th * psi[k] * theta[:, y[k]].T
        hit = Th[np.arange(k.size), y[k]] * (1.0 - psi[k, y[k]])
        w = np.concatenate([miss, hit[:, None]], axis=1)
        if np.any(~(w.sum(axis=1) > 0)):
            raise InvariantError("all (tau, z) weights are zero")
        pick = draw_categorical(rng, w)
        is_hit = pick == T
        tau[k] = np.where(is_hit, 0, 1)
        z[k] = np.where(is_hit, y[k], pick)

    k = np.flatnonzero(pinned)
    if k.size:
        zk = data.validated[k]
        p = tau_hit_probability(psi[k, zk], theta[zk, zk])
        draw = (rng.random(k.size) < p).astype(np.int64)
        tau[k] = np.where(y[k] != zk, 1, draw)
        z[k] = zk
    state.tau, state.z = tau, z
    return tau, z


def update_omega_tau(state, data, rng):
    lin = np.einsum("mp,mp->m", data.covariates.x_indiv, state.beta_psi[state.z])
    state.omega_tau = draw_polya_gamma(rng, lin)
    return state.omega_tau


def update_zeta_alpha(state, data, hyper, rng):
    """Expand/contract step, collapsed over alpha, then a conjugate alpha refresh."""
    cov = data.covariates
    n = data.counts(state.z)
    gam = np.exp(cov.x_visit @ state.beta_gamma.T)
    rate = (1.0 + state.mu)[:, None]
    if hyper.zero_inflated:
        lin = (cov.x_site @ state.beta_eta.T)[data.visit_site]
        # log-odds of zeta = 1 after integrating alpha against exp(-mu * alpha)
        p_on = logistic(lin - gam * np.log(rate))
        zeta = np.where(n > 0, 1, (rng.random(n.shape) < p_on).astype(np.int64))
    else:
        zeta = np.ones_like(n)
    alpha = rng.gamma(n + gam, 1.0 / rate)
    alpha[zeta == 0] = 0.0
    state.zeta, state.alpha = zeta, alpha
    return zeta, alpha


def update_omega_zeta(state, data, rng):
    lin = (data.covariates.x_site @ state.beta_eta.T)[data.visit_site]
    state.omega_zeta = draw_polya_gamma(rng, lin)
    return state.omega_zeta


def update_u(state, data, hyper, rng):
    """u_t | a ~ Gamma(m_t, abar_t); with m_t = 0 the auxiliary is inert and set to 0."""
    abar = state.a.sum(axis=1)
    if np.any(abar <= 0):
        raise InvariantError("u update needs positive row totals of a")
    m = misclassified_counts(state, data, hyper).sum(axis=1)
    u = np.zeros(data.dims.T)
    has = m > 0
    if has.any():
        u[has] = draw_gamma(rng, m[has], abar[has])
    state.u = u
    return u


def pg_regression_draw(rng, X, kappa, omega, prior_mean, prior_var):
    """Gaussian full conditional of logistic-regression coefficients under PG augmentation."""
    P = X.shape[1]
    prec = X.T @ (omega[:, None] * X) + np.eye(P) / prior_var
    chol = np.linalg.cholesky(prec)
    rhs = X.T @ kappa + prior_mean / prior_var
    mean = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    return draw_mvnormal(rng, mean, precision=prec)


def pg_regression_batch(rng, X, kappa, omega, prior_mean, prior_var):
    """T independent PG-conjugate draws sharing the design ``X``.

    ``kappa`` and ``omega`` are (rows, T); a zero weight drops a row from
    class t.  Uses the stream in the same order as T calls of
    :func:`pg_regression_draw`, so both give the same draws up to rounding.
    """
    P = X.shape[1]
    wx = omega[:, :, None] * X[:, None, :]
    prec = np.tensordot(wx, X, axes=([0], [0])) + np.eye(P) / prior_var
    rhs = kappa.T @ X + prior_mean / prior_var
    chol = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    noise = rng.standard_normal(rhs.shape)
    return mean + np.linalg.solve(np.swapaxes(chol, 1, 2), noise[..., None])[..., 0]


def update_beta_psi(state, data, hyper, rng):
    X = data.covariates.x_indiv
    b0 = hyper.prior_mean(hyper.mu_psi, X.shape[1])
    onehot = state.z[:, None] == np.arange(data.dims.T)
    kappa = onehot * (state.tau - 0.5)[:, None]
    omega = onehot * state.omega_tau[:, None]
    state.beta_psi = pg_regression_batch(rng, X, kappa, omega, b0, hyper.sigma2_psi)
    return state.beta_psi


def update_beta_eta(state, data, hyper, rng):
    X = data.covariates.x_site[data.visit_site]
    b0 = hyper.prior_mean(hyper.mu_eta, X.shape[1])
    state.beta_eta = pg_regression_batch(
        rng, X, state.zeta - 0.5, state.omega_zeta, b0, hyper.sigma2_eta)
    return state.beta_eta


def beta_gamma_log_target(beta, state, data, hyper):
    """Per-class log target of beta_gamma given alpha and zeta, shape (T,)."""
    X = data.covariates.x_visit
    gam = np.exp(X @ np.atleast_2d(beta).T)
    on = state.zeta == 1
    log_alpha = np.log(np.where(on, state.alpha, 1.0))
    ll = np.where(on, gam * log_alpha - special.gammaln(gam), 0.0).sum(axis=0)
    b0 = hyper.prior_mean(hyper.mu_gamma, X.shape[1])
    lp = -0.5 * ((np.atleast_2d(beta) - b0) ** 2).sum(axis=1) / hyper.sigma2_gamma
    return ll + lp


def update_beta_gamma(state, data, hyper, rng, step):
    """Gaussian random-walk MH on each class's coefficients; returns accept flags."""
    step = np.broadcast_to(np.asarray(step, dtype=float), (data.dims.T,))
    cur = state.beta_gamma
    prop = cur + step[:, None] * rng.standard_normal(cur.shape)
    delta = (beta_gamma_log_target(prop, state, data, hyper)
             - beta_gamma_log_target(cur, state, data, hyper))
    accept = np.log(rng.random(data.dims.T)) < delta
    state.beta_gamma = np.where(accept[:, None], prop, cur)
    return accept


def update_a(state, data, hyper, rng):
    T, C = data.dims.T, data.dims.C
    nu = hyper.nu_matrix(T, C)
    shape = misclassified_counts(state, data, hyper) + nu
    if hyper.no_lucky_guess:
        np.fill_diagonal(shape, 1.0)   # placeholder, zeroed below
    if np.any(shape <= 0):
        raise InvariantError("a update has a zero Gamma shape")
    a = rng.gamma(shape, 1.0 / (state.u + 1.0)[:, None])
    if hyper.no_lucky_guess:
        np.fill_diagonal(a, 0.0)
    state.a = a
    return a


# ---------------------------------------------------------------------------
# Sweep and chain driver
# ---------------------------------------------------------------------------

def sweep(state, data, hyper, rng, *, mh_step=0.1, block_tau_z=False, accept_out=None):
    """One pass in the order of the sampler outline; mutates and returns ``state``.

    Variant gates: missDM holds zeta at one; ZIDM holds tau at zero and
    z at y; DMDM holds tau at one so every report flows through theta.
    """
    v = hyper.variant
    update_mu(state, data, rng)
    if hyper.misclassified:
        if block_tau_z or hyper.no_lucky_guess:
            update_tau_z_block(state, data, hyper, rng)
        else:
            update_tau(state, data, hyper, rng)
            update_z(state, data, hyper, rng)
        update_omega_tau(state, data, rng)
    elif v == "DMDM":
        update_z(state, data, hyper, rng)
    update_zeta_alpha(state, data, hyper, rng)
    if hyper.zero_inflated:
        update_omega_zeta(state, data, rng)

    if uses_classification_matrix(v):
        update_u(state, data, hyper, rng)
    if hyper.misclassified:
        update_beta_psi(state, data, hyper, rng)
    if hyper.zero_inflated:
        update_beta_eta(state, data, hyper, rng)
    accepted = update_beta_gamma(state, data, hyper, rng, mh_step)
    if uses_classification_matrix(v):
        update_a(state, data, hyper, rng)
    if accept_out is not None:
        accept_out[...] = accepted
    return state


def _draw_shapes(data, hyper):
    dims, cov = data.dims, data.covariates
    T, C, V = dims.T, dims.C, dims.V
    shapes = {"beta_gamma": (T, cov.x_visit.shape[1]), "Theta": (V, T)}
    if hyper.zero_inflated:
        shapes.update(beta_eta=(T, cov.x_site.shape[1]), eta=(T,), zeta=(V, T))
    if uses_classification_matrix(hyper.variant):
        shapes.update(a=(T, C), u=(T,), theta=(T, C), theta_star=(T, C))
    if hyper.misclassified:
        shapes.update(beta_psi=(T, cov.x_indiv.shape[1]), psi=(T,))
    return shapes


def snapshot(state, data, hyper):
    """Inferential quantities of one state, keyed like the stored draws."""
    d = derive(state, data, hyper) if uses_classification_matrix(hyper.variant) else None
    out = {"beta_gamma": state.beta_gamma, "Theta": normalize_rows(state.alpha)}
    if hyper.zero_inflated:
        out.update(beta_eta=state.beta_eta, zeta=state.zeta,
                   eta=logistic(data.covariates.x_site @ state.beta_eta.T).mean(axis=0))
    if d is not None:
        out.update(a=state.a, u=state.u, theta=d.theta, theta_star=d.confusion)
    if hyper.misclassified:
        out.update(beta_psi=state.beta_psi, psi=d.psi_bar)
    return out


def run_chain(data, hyper, config, *, stream_id=0, init=None):
    """Run one chain and keep thinned post-burn-in draws."""
    t0 = time.perf_counter()
    rng = make_rng(config.seed, stream_id)
    state = initialize_state(data, hyper, rng) if init is None else init.copy()
    T = data.dims.T
    shapes = _draw_shapes(data, hyper)
    S = config.n_retained
    draws = {k: np.empty((S,) + s, dtype=np.int8 if k == "zeta" else float)
             for k, s in shapes.items()}
    log_step = np.full(T, np.log(config.mh_step_size))
    accepted = np.zeros(T, dtype=bool)
    n_acc = np.zeros(T)
    n_prop = 0
    k = 0
    for m in range(1, config.iterations + 1):
        sweep(state, data, hyper, rng, mh_step=np.exp(log_step),
              block_tau_z=config.block_tau_z, accept_out=accepted)
        if config.check_invariants:
            check_state(state, data, hyper)
        if m <= config.burn_in:
            if config.adapt_mh:
                log_step += (accepted - ADAPT_TARGET) * m ** -0.6
        else:
            n_acc += accepted
            n_prop += 1
            if (m - config.burn_in) % config.thin == 0:
                for key, val in snapshot(state, data, hyper).items():
                    draws[key][k] = val
                k += 1
    runtime = time.perf_counter() - t0
    log.debug("chain %d finished in %.1fs", stream_id, runtime)
    return ChainOutput(
        draws=draws,
        acceptance_rate_beta_gamma=n_acc / max(n_prop, 1),
        seed=config.seed, stream_id=stream_id, config=config, hyper=hyper,
        mh_step_size=np.exp(log_step), runtime=runtime,
        meta={"final_state": state},
    )


def _run_one(args):
    data, hyper, config, stream_id = args
    out = run_chain(data, hyper, config, stream_id=stream_id)
    out.meta.pop("final_state", None)
    return out


def run_chains(data, hyper, config, *, workers=1):
    """Independent chains on streams 0..chains-1 of the master seed."""
    jobs = [(data, hyper, config, s) for s in range(config.chains)]
    if workers > 1 and config.chains > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


def config_dict(config):
    return asdict(config)
