"""Synthetic data for the two simulation scenarios.

Scenario 1: fixed totals per site, zero-inflated overdispersed
Dirichlet-multinomial true classes and Dirichlet-multinomial
misclassification.  Scenario 2: negative-binomial encounter counts per
species and visit with site-level occupancy, reports drawn from a
classification matrix, and optional covariates at both levels.
"""
from dataclasses import dataclass, asdict
import logging

import numpy as np

from .model import CovariateBundle, RecordTable, compose_confusion, logistic, logit
from .rand import draw_categorical, draw_dirichlet, draw_negative_binomial, make_rng

log = logging.getLogger(__name__)

# Case-study summaries (mean count and percent zero per species).
TABLE3_MEANS = np.array([3.5, 3.1, 12.4, 4.5, 2.9, 1.7, 25.9, 2.7, 5.0, 0.98])
TABLE3_PCT_ZERO = np.array([66, 65, 34, 54, 83, 63, 26, 59, 69, 77], dtype=float)
ENCOUNTER_RANGE = (2.0, 28.2)

# Stream ids keep generation, validation and fitting streams apart.
_GEN_STREAM = 1001
_VALIDATION_STREAM = 1002


@dataclass
class Scenario1Config:
    N: int = 50
    n_i: int = 1
    L: int = 100
    T: int = 10
    at_risk_prob: float = 0.25
    misclass_prob: float = 0.25
    overdispersion: float = 0.01
    validation_fraction: float = 0.0
    validation_mode: str = "individual"
    lucky_guess: bool = True

    def __post_init__(self):
        for name in ("at_risk_prob", "misclass_prob", "validation_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.overdispersion < 1.0:
            raise ValueError("overdispersion must lie in (0, 1)")
        if min(self.N, self.n_i, self.L, self.T) < 1:
            raise ValueError("N, n_i, L and T must be positive")


def _default_lambda(T):
    return np.clip(TABLE3_MEANS, *ENCOUNTER_RANGE)[:T]


def _default_occupancy(T):
    return (1.0 - TABLE3_PCT_ZERO / 100.0)[:T]


@dataclass
class Scenario2Config:
    N: int = 50
    n_i: int = 5
    T: int = 10
    lam: np.ndarray = None              # default: case-study means of the first T species
    sigma: float = 1.0
    occupancy_prob: np.ndarray = None   # default: case-study occupancy of the first T species
    validation_fraction: float = 0.25
    validation_mode: str = "individual"
    with_covariates: bool = False
    P: int = 5

    def __post_init__(self):
        n_default = len(TABLE3_MEANS)
        if (self.lam is None or self.occupancy_prob is None) and self.T > n_default:
            raise ValueError(f"defaults cover T <= {n_default}; give lam and occupancy_prob")
        if self.lam is None:
            self.lam = _default_lambda(self.T)
        if self.occupancy_prob is None:
            self.occupancy_prob = _default_occupancy(self.T)
        self.lam = np.broadcast_to(np.asarray(self.lam, dtype=float), (self.T,)).copy()
        self.occupancy_prob = np.broadcast_to(
            np.asarray(self.occupancy_prob, dtype=float), (self.T,)).copy()
        if np.any(self.lam <= 0) or not self.sigma > 0:
            raise ValueError("encounter rates and sigma must be positive")
        if np.any(self.occupancy_prob <= 0) or np.any(self.occupancy_prob > 1):
            raise ValueError("occupancy probabilities must lie in (0, 1]")
        if not 0.0 <= self.validation_fraction <= 1.0:
            raise ValueError("validation_fraction must lie in [0, 1]")


@dataclass
class GroundTruth:
    """Generating values; arrays cover every declared visit, empty or not."""
    z: np.ndarray
    counts: np.ndarray          # (V, T) true-class tallies per visit
    zeta: np.ndarray            # (V, T)
    Theta: np.ndarray           # (V, T)
    theta_star: np.ndarray      # (T, C)
    eta: np.ndarray = None      # (T,)
    psi: np.ndarray = None      # (T,)
    theta: np.ndarray = None    # (T, C)
    tau: np.ndarray = None
    beta_eta: np.ndarray = None
    beta_gamma: np.ndarray = None
    scenario: int = 1

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: (np.asarray(v) if isinstance(v, list) else v) for k, v in d.items()})

    def visit_mask(self):
        """Declared visits that carry at least one individual."""
        return self.counts.sum(axis=1) > 0

    def block(self, name):
        """Truth for a metric block, aligned with a fitted dataset."""
        if name == "Theta":
            return self.Theta[self.visit_mask()]
        return getattr(self, name)


def _records_from_classes(site, visit, z, y, vps, C):
    order = np.lexsort((np.arange(len(z)), visit, site))
    site, visit, z, y = site[order], visit[order], z[order], y[order]
    individual = np.zeros(len(z), dtype=np.int64)
    if len(z):
        key = site * (vps.max() + 1) + visit
        start = np.r_[True, key[1:] != key[:-1]]
        first = np.maximum.accumulate(np.where(start, np.arange(len(z)), 0))
        individual = np.arange(len(z)) - first
    rec = RecordTable(site=site, visit=visit, individual=individual, observed=y,
                      validated=np.full(len(z), -1, dtype=np.int64),
                      visits_per_site=vps, C=C)
    return rec, z, order


def _scenario1_nu(T, lucky_guess):
    nu = np.tile(np.arange(1, T + 1, dtype=float), (T, 1))
    np.fill_diagonal(nu, 1.0 if lucky_guess else 0.0)
    return nu


def gen_scenario1(cfg, seed):
    """Generate Scenario 1 data: returns ``(records, covariates, truth)``."""
    rng = make_rng(seed, _GEN_STREAM)
    T = C = cfg.T
    rho = (1.0 - cfg.overdispersion) / cfg.overdispersion
    nu = _scenario1_nu(T, cfg.lucky_guess)
    theta_mean = nu / nu.sum(axis=1, keepdims=True)
    V = cfg.N * cfg.n_i
    zeta = np.zeros((V, T), dtype=np.int64)
    Theta = np.zeros((V, T))
    sites, visits, zs, ys, taus = [], [], [], [], []
    resampled = 0
    for i in range(cfg.N):
        at_risk = rng.random(T) < cfg.at_risk_prob
        while not at_risk.any():
            resampled += 1
            at_risk = rng.random(T) < cfg.at_risk_prob
        p = at_risk / at_risk.sum()
        for j in range(cfg.n_i):
            g = i * cfg.n_i + j
            zeta[g] = at_risk
            Theta[g] = draw_dirichlet(rng, rho * p)
            z = draw_categorical(rng, np.tile(Theta[g], (cfg.L, 1)))
            tau = (rng.random(cfg.L) < cfg.misclass_prob).astype(np.int64)
            theta_site = draw_dirichlet(rng, rho * theta_mean)
            y = z.copy()
            miss = np.flatnonzero(tau == 1)
            if miss.size:
                y[miss] = draw_categorical(rng, theta_site[z[miss]])
            sites.append(np.full(cfg.L, i)); visits.append(np.full(cfg.L, j))
            zs.append(z); ys.append(y); taus.append(tau)
    if resampled:
        log.info("resampled at-risk indicators %d time(s) for all-absent sites", resampled)
    vps = np.full(cfg.N, cfg.n_i, dtype=np.int64)
    rec, z, order = _records_from_classes(np.concatenate(sites), np.concatenate(visits),
                                          np.concatenate(zs), np.concatenate(ys), vps, C)
    tau = np.concatenate(taus)[order]
    psi = np.full(T, cfg.misclass_prob)
    truth = GroundTruth(
        z=z, counts=_tally(rec, z, T), zeta=zeta, Theta=Theta,
        theta_star=compose_confusion(psi, theta_mean), eta=np.full(T, cfg.at_risk_prob),
        psi=psi, theta=theta_mean, tau=tau, scenario=1)
    cov = CovariateBundle.intercept_only(cfg.N, V, len(rec))
    if cfg.validation_fraction > 0:
        rec = attach_validation(rec, z, cfg.validation_fraction, seed, mode=cfg.validation_mode)
    return rec, cov, truth


def gen_scenario2(cfg, seed):
    """Generate Scenario 2 data: returns ``(records, covariates, truth)``."""
    rng = make_rng(seed, _GEN_STREAM)
    T = C = cfg.T
    N, n_i = cfg.N, cfg.n_i
    V = N * n_i
    visit_site = np.repeat(np.arange(N), n_i)
    beta_eta = beta_gamma = None
    if cfg.with_covariates:
        P = cfg.P
        x_site = np.column_stack([np.ones(N), rng.standard_normal((N, P))])
        x_visit = np.column_stack([np.ones(V), rng.standard_normal((V, P))])
        beta_eta = np.column_stack([
            rng.uniform(logit(0.25), logit(0.95), T),
            rng.choice([-1.0, 1.0], size=(T, P))])
        beta_gamma = np.column_stack([
            rng.uniform(0.0, np.log(10.0), T),
            rng.choice([-0.2, 0.2], size=(T, P))])
        occ = logistic(x_site @ beta_eta.T)                  # (N, T)
        rate = np.exp(x_visit @ beta_gamma.T)                # (V, T)
    else:
        x_site, x_visit = np.ones((N, 1)), np.ones((V, 1))
        occ = np.tile(cfg.occupancy_prob, (N, 1))
        rate = np.tile(cfg.lam, (V, 1))
    zeta_site = (rng.random((N, T)) < occ).astype(np.int64)
    zeta = zeta_site[visit_site]
    mean = zeta * rate
    counts = draw_negative_binomial(rng, mean, cfg.sigma)

    theta = rng.uniform(0.01, 0.2, size=(T, C))
    np.fill_diagonal(theta, rng.uniform(0.5, 0.95, size=T))
    theta /= theta.sum(axis=1, keepdims=True)

    g_of = np.repeat(np.arange(V), counts.sum(axis=1))
    z = np.concatenate([np.repeat(np.arange(T), counts[g]) for g in range(V)]).astype(np.int64)
    y = draw_categorical(rng, theta[z]) if len(z) else z.copy()
    vps = np.full(N, n_i, dtype=np.int64)
    rec, z, _ = _records_from_classes(visit_site[g_of], g_of - visit_site[g_of] * n_i,
                                      z, y, vps, C)
    tot = mean.sum(axis=1, keepdims=True)
    Theta = np.divide(mean, tot, out=np.zeros_like(mean), where=tot > 0)
    truth = GroundTruth(
        z=z, counts=_tally(rec, z, T), zeta=zeta, Theta=Theta, theta_star=theta,
        eta=occ.mean(axis=0), beta_eta=beta_eta, beta_gamma=beta_gamma, scenario=2)
    cov = CovariateBundle(x_site, x_visit, np.ones((len(rec), 1)))
    if cfg.validation_fraction > 0:
        rec = attach_validation(rec, z, cfg.validation_fraction, seed, mode=cfg.validation_mode)
    return rec, cov, truth


def _tally(rec, z, T):
    offsets = np.concatenate([[0], np.cumsum(rec.visits_per_site)])
    g = offsets[rec.site] + rec.visit
    V = int(offsets[-1])
    return np.bincount(g * T + z, minlength=V * T).reshape(V, T)


def attach_validation(records, z, fraction, seed, *, mode="individual"):
    """Mark a uniformly chosen subset as validated with its true class.

    ``mode="individual"`` validates exactly ``round(fraction * len(records))``
    individuals; ``mode="visit"`` validates every individual in
    ``round(fraction * n_visits)`` of the non-empty visits.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = make_rng(seed, _VALIDATION_STREAM)
    z = np.asarray(z, dtype=np.int64)
    m = len(records)
    validated = np.full(m, -1, dtype=np.int64)
    if mode == "individual":
        k = int(round(fraction * m))
        chosen = rng.choice(m, size=k, replace=False)
    elif mode == "visit":
        offsets = np.concatenate([[0], np.cumsum(records.visits_per_site)])
        g = offsets[records.site] + records.visit
        occupied = np.unique(g)
        k = int(round(fraction * occupied.size))
        picked = rng.choice(occupied, size=k, replace=False)
        chosen = np.flatnonzero(np.isin(g, picked))
    else:
        raise ValueError(f"unknown validation mode {mode!r}")
    validated[chosen] = z[chosen]
    return records.with_validated(validated)
