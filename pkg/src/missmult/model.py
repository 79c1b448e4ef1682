"""Domain types, deterministic transforms and the joint log-density.

Indices are 0-based throughout the in-memory API.  Observed and true
classes are stored as integer category indices, never one-hot vectors.
Visits are numbered globally in site-major order: visit ``g`` belongs to
site ``visit_site[g]``.
"""
from dataclasses import dataclass, field, replace
import logging
import warnings

import numpy as np
from scipy import special

log = logging.getLogger(__name__)

VARIANTS = ("missZIDM", "missDM", "ZIDM", "DMDM")


class InvariantError(ValueError):
    """A latent state or input violates a structural model invariant."""


def canonical_variant(name):
    """Map a case-insensitive variant name onto its canonical spelling."""
    for v in VARIANTS:
        if v.lower() == str(name).lower():
            return v
    raise ValueError(f"unknown model variant {name!r}; expected one of {VARIANTS}")


def models_misclassification(variant):
    return variant in ("missZIDM", "missDM")


def models_zero_inflation(variant):
    return variant in ("missZIDM", "ZIDM")


def uses_classification_matrix(variant):
    return variant != "ZIDM"


# ---------------------------------------------------------------------------
# Elementary transforms
# ---------------------------------------------------------------------------

def logistic(v):
    """Inverse logit, stable for large |v| (scipy's expit)."""
    out = special.expit(v)
    return float(out) if np.ndim(out) == 0 else out


def logit(p):
    out = special.logit(p)
    return float(out) if np.ndim(out) == 0 else out


def normalize_rows(m):
    """Scale each row of a non-negative matrix to sum to one."""
    m = np.asarray(m, dtype=float)
    if np.any(m < 0):
        raise InvariantError("normalize_rows expects non-negative entries")
    s = m.sum(axis=-1, keepdims=True)
    if np.any(~(s > 0)):
        raise InvariantError("normalize_rows: row with zero sum")
    return m / s


def compose_confusion(psi_bar, theta):
    """Confusion matrix from misclassification probabilities and theta.

    Row t is ``(1 - psi_bar[t]) * e_t + psi_bar[t] * theta[t]``: a hit reports
    the true class, a miss draws the report from the classification row.
    Works on a leading batch axis as well (``psi_bar`` (..., T), ``theta``
    (..., T, C)).
    """
    psi_bar = np.asarray(psi_bar, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if theta.shape[:-1] != psi_bar.shape or theta.shape[-1] != theta.shape[-2]:
        raise ValueError(f"shape mismatch: psi_bar {psi_bar.shape}, theta {theta.shape}")
    eye = np.eye(theta.shape[-1])
    p = psi_bar[..., None]
    return (1.0 - p) * eye + p * theta


def dmdm_nu_diagonal(mu_psi, T):
    """Diagonal concentration giving DMDM the same prior hit probability.

    With ``p = logistic(mu_psi)`` the prior mean of the diagonal entry,
    ``nu_tt / (nu_tt + T - 1)``, equals ``1 - p + p / T``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    p = logistic(mu_psi)
    if np.any(p <= 0.0):
        raise ValueError("logistic(mu_psi) underflows to zero")
    return (p / T + (1.0 - p)) * T / p


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dimensions:
    N: int                  # sites / observations
    n: np.ndarray           # visits per site, shape (N,)
    L: np.ndarray           # individuals per visit, shape (V,)
    T: int                  # true categories
    C: int                  # observed categories

    @property
    def V(self):
        return int(self.L.shape[0])

    @property
    def M(self):
        return int(self.L.sum())

    def validate(self):
        if self.N < 1 or len(self.n) != self.N:
            raise InvariantError("need N >= 1 sites with a visit count each")
        if np.any(self.n < 1) or np.any(self.L < 1):
            raise InvariantError("every site needs >= 1 visit and every visit >= 1 individual")
        if self.T != self.C:
            raise InvariantError("only T == C is supported")


@dataclass(frozen=True)
class ObservationRecord:
    site: int
    visit: int
    individual: int
    observed_class: int
    validated_class: int = None


@dataclass
class CovariateBundle:
    x_site: np.ndarray      # (N, P_eta)
    x_visit: np.ndarray     # (V, P_gamma)
    x_indiv: np.ndarray     # (M, P_psi)

    @classmethod
    def intercept_only(cls, N, V, M):
        return cls(np.ones((N, 1)), np.ones((V, 1)), np.ones((M, 1)))

    def validate(self, dims):
        for name, x, rows in (("x_site", self.x_site, dims.N),
                              ("x_visit", self.x_visit, dims.V),
                              ("x_indiv", self.x_indiv, dims.M)):
            if x.ndim != 2 or x.shape[0] != rows:
                raise InvariantError(f"{name} must have {rows} rows, got shape {x.shape}")
            if x.shape[1] < 1 or not np.all(x[:, 0] == 1.0):
                raise InvariantError(f"{name} needs a leading intercept column of ones")


@dataclass
class RecordTable:
    """Columnar observation records with 0-based indices.

    ``validated`` holds -1 where no validated class is available.  Declared
    visits may be empty (generated data); they are dropped on conversion to a
    :class:`Dataset`.
    """
    site: np.ndarray
    visit: np.ndarray
    individual: np.ndarray
    observed: np.ndarray
    validated: np.ndarray
    visits_per_site: np.ndarray
    C: int

    def __len__(self):
        return int(self.site.shape[0])

    def __iter__(self):
        for k in range(len(self)):
            v = int(self.validated[k])
            yield ObservationRecord(int(self.site[k]), int(self.visit[k]),
                                    int(self.individual[k]), int(self.observed[k]),
                                    None if v < 0 else v)

    def with_validated(self, validated):
        return replace(self, validated=np.asarray(validated, dtype=np.int64))

    def to_dataset(self, covariates=None):
        kw = {}
        if covariates is not None:
            kw = dict(x_site=covariates.x_site, x_visit=covariates.x_visit,
                      x_indiv=covariates.x_indiv)
        return Dataset.build(self.site, self.visit, self.observed, self.validated,
                             individual=self.individual, C=self.C,
                             visits_per_site=self.visits_per_site, **kw)


@dataclass
class Dataset:
    """Engine-ready data: records sorted by (site, visit, individual)."""
    dims: Dimensions
    y: np.ndarray           # observed class per individual, (M,)
    validated: np.ndarray   # validated class or -1, (M,)
    visit_of: np.ndarray    # global visit index per individual, (M,)
    visit_site: np.ndarray  # site per visit, (V,)
    covariates: CovariateBundle
    n_dropped_visits: int = 0

    @property
    def is_validated(self):
        return self.validated >= 0

    @classmethod
    def build(cls, site, visit, observed, validated=None, *, C, T=None,
              individual=None, visits_per_site=None, x_site=None,
              x_visit=None, x_indiv=None):
        """Assemble a dataset from columnar 0-based record fields.

        ``visits_per_site`` declares visits that may have no individuals;
        such visits (and sites left with no visits) are dropped with a
        warning together with their covariate rows.  ``x_indiv`` rows follow
        the input record order.
        """
        T = C if T is None else T
        site = np.asarray(site, dtype=np.int64)
        visit = np.asarray(visit, dtype=np.int64)
        observed = np.asarray(observed, dtype=np.int64)
        m = site.shape[0]
        if m == 0:
            raise InvariantError("no observation records")
        validated = (np.full(m, -1, dtype=np.int64) if validated is None
                     else np.asarray(validated, dtype=np.int64))
        individual = (np.arange(m) if individual is None
                      else np.asarray(individual, dtype=np.int64))
        if np.any((observed < 0) | (observed >= C)):
            raise InvariantError(f"observed class outside [0, {C})")
        if np.any((validated < -1) | (validated >= T)):
            raise InvariantError(f"validated class outside [0, {T})")
        if np.any(site < 0) or np.any(visit < 0):
            raise InvariantError("negative site or visit index")

        if visits_per_site is None:
            n_sites = int(site.max()) + 1
            vps = np.zeros(n_sites, dtype=np.int64)
            np.maximum.at(vps, site, visit + 1)
        else:
            vps = np.asarray(visits_per_site, dtype=np.int64)
            n_sites = vps.shape[0]
            if np.any(site >= n_sites) or np.any(visit >= vps[site]):
                raise InvariantError("record refers to an undeclared site or visit")
        offsets = np.concatenate([[0], np.cumsum(vps)])
        g_all = offsets[site] + visit
        n_vis_all = int(offsets[-1])

        counts = np.bincount(g_all, minlength=n_vis_all)
        keep_visit = counts > 0
        visit_site_all = np.repeat(np.arange(n_sites), vps)
        keep_site = np.bincount(visit_site_all[keep_visit], minlength=n_sites) > 0
        n_drop = int((~keep_visit).sum())
        if n_drop:
            msg = f"dropped {n_drop} visit(s) with no individuals"
            warnings.warn(msg, stacklevel=2)
            log.warning(msg)

        new_site = np.cumsum(keep_site) - 1
        new_visit = np.cumsum(keep_visit) - 1
        order = np.lexsort((individual, g_all))
        g = new_visit[g_all[order]]
        visit_site = new_site[visit_site_all[keep_visit]]
        N = int(keep_site.sum())
        n = np.bincount(visit_site, minlength=N)
        L = np.bincount(g, minlength=int(keep_visit.sum()))
        dims = Dimensions(N=N, n=n, L=L, T=T, C=C)
        dims.validate()

        x_site = np.ones((n_sites, 1)) if x_site is None else np.asarray(x_site, dtype=float)
        x_visit = np.ones((n_vis_all, 1)) if x_visit is None else np.asarray(x_visit, dtype=float)
        x_indiv = np.ones((m, 1)) if x_indiv is None else np.asarray(x_indiv, dtype=float)
        if x_site.shape[0] != n_sites or x_visit.shape[0] != n_vis_all or x_indiv.shape[0] != m:
            raise InvariantError("covariate row counts do not match the declared design")
        cov = CovariateBundle(x_site[keep_site], x_visit[keep_visit], x_indiv[order])
        cov.validate(dims)
        return cls(dims=dims, y=observed[order], validated=validated[order],
                   visit_of=g, visit_site=visit_site, covariates=cov,
                   n_dropped_visits=n_drop)

    @classmethod
    def from_records(cls, records, *, C, T=None, **kwargs):
        """Build from an iterable of :class:`ObservationRecord`."""
        records = list(records)
        return cls.build(
            [r.site for r in records], [r.visit for r in records],
            [r.observed_class for r in records],
            [-1 if r.validated_class is None else r.validated_class for r in records],
            individual=[r.individual for r in records], C=C, T=T, **kwargs)

    def records(self):
        """Iterate the stored individuals as :class:`ObservationRecord`."""
        first = np.concatenate([[0], np.cumsum(self.dims.n)])[:-1]
        local_visit = np.arange(self.dims.V) - first[self.visit_site]
        start = np.concatenate([[0], np.cumsum(self.dims.L)])
        for k in range(self.dims.M):
            g = int(self.visit_of[k])
            v = int(self.validated[k])
            yield ObservationRecord(int(self.visit_site[g]), int(local_visit[g]),
                                    int(k - start[g]), int(self.y[k]),
                                    None if v < 0 else v)

    def counts(self, z):
        """(V, T) table of individuals per visit and class."""
        V, T = self.dims.V, self.dims.T
        return np.bincount(self.visit_of * T + z, minlength=V * T).reshape(V, T)


# ---------------------------------------------------------------------------
# Hyperparameters and state
# ---------------------------------------------------------------------------

@dataclass
class Hyperparameters:
    nu: object = 1.0                 # scalar or (T, C) concentrations for theta rows
    gamma_prior: float = 1.0         # intercept-only Dirichlet concentration
    mu_psi: object = 0.0             # scalar or per-class intercept prior means
    mu_eta: object = 0.0
    mu_gamma: object = None          # None -> log(gamma_prior)
    sigma2_psi: float = 1.0
    sigma2_eta: float = 1.0
    sigma2_gamma: float = 1.0
    no_lucky_guess: bool = False
    variant: str = "missZIDM"
    count_all_individuals: bool = False
    pin_zeta: bool = False

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.mu_gamma is None:
            if self.gamma_prior <= 0:
                raise ValueError("gamma_prior must be positive")
            self.mu_gamma = float(np.log(self.gamma_prior))
        for name in ("sigma2_psi", "sigma2_eta", "sigma2_gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def zero_inflated(self):
        return models_zero_inflation(self.variant) and not self.pin_zeta

    @property
    def misclassified(self):
        return models_misclassification(self.variant)

    def nu_matrix(self, T, C):
        """Resolved (T, C) concentrations, with variant and restriction rules."""
        nu = np.broadcast_to(np.asarray(self.nu, dtype=float), (T, C)).copy()
        if self.variant == "DMDM":
            nu[np.diag_indices(min(T, C))] = dmdm_nu_diagonal(self.mu_psi, T)
        if self.no_lucky_guess:
            nu[np.diag_indices(min(T, C))] = 0.0
        if np.any(nu < 0):
            raise InvariantError("nu entries must be non-negative")
        off = ~np.eye(T, C, dtype=bool)
        if np.any(nu[off] <= 0):
            raise InvariantError("off-diagonal nu entries must be positive")
        if np.any(nu.sum(axis=1) <= 0):
            raise InvariantError("every row of nu needs a positive entry")
        return nu

    def prior_mean(self, mu, P):
        """Prior mean of regression coefficients: ``mu`` on the intercept.

        ``mu`` may be a scalar or one value per class, giving (P,) or (T, P).
        """
        mu = np.asarray(mu, dtype=float)
        b0 = np.zeros(mu.shape + (P,))
        b0[..., 0] = mu
        return b0


@dataclass
class LatentState:
    z: np.ndarray            # (M,) true class
    tau: np.ndarray          # (M,) misclassification indicator
    zeta: np.ndarray         # (V, T) at-risk indicator
    alpha: np.ndarray        # (V, T)
    a: np.ndarray            # (T, C)
    u: np.ndarray            # (T,)
    mu: np.ndarray           # (V,)
    omega_tau: np.ndarray    # (M,)
    omega_zeta: np.ndarray   # (V, T)
    beta_psi: np.ndarray     # (T, P_psi)
    beta_eta: np.ndarray     # (T, P_eta)
    beta_gamma: np.ndarray   # (T, P_gamma)

    def copy(self):
        return replace(self, **{k: np.array(v, copy=True) for k, v in vars(self).items()})

    def equals(self, other):
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in vars(self))


@dataclass
class DerivedProbabilities:
    Theta: np.ndarray        # (V, T)
    theta: np.ndarray        # (T, C)
    psi: np.ndarray          # (M, T) misclassification prob for each candidate class
    eta: np.ndarray          # (N, T)
    gamma_rate: np.ndarray   # (V, T)
    confusion: np.ndarray    # (T, C)
    psi_bar: np.ndarray = field(default=None)   # (T,)


def derive(state, data, hyper):
    """Deterministic transforms of a state."""
    cov = data.covariates
    Theta = normalize_rows(state.alpha)
    theta = normalize_rows(state.a)
    psi = logistic(cov.x_indiv @ state.beta_psi.T)
    eta = logistic(cov.x_site @ state.beta_eta.T)
    gamma_rate = np.exp(cov.x_visit @ state.beta_gamma.T)
    if hyper.variant == "DMDM":
        psi_bar = np.ones(data.dims.T)
    elif hyper.misclassified:
        psi_bar = psi.mean(axis=0)
    else:
        psi_bar = np.zeros(data.dims.T)
    confusion = compose_confusion(psi_bar, theta)
    return DerivedProbabilities(Theta, theta, psi, eta, gamma_rate, confusion, psi_bar)


def check_state(state, data, hyper):
    """Raise :class:`InvariantError` if ``state`` breaks a structural invariant."""
    z, tau, y = state.z, state.tau, data.y
    if np.any((z < 0) | (z >= data.dims.T)):
        raise InvariantError("z outside the category range")
    if np.any((tau != 0) & (tau != 1)):
        raise InvariantError("tau must be binary")
    if np.any((z != y) & (tau != 1)):
        raise InvariantError("tau must be 1 wherever z differs from y")
    pinned = data.is_validated
    if np.any(z[pinned] != data.validated[pinned]):
        raise InvariantError("validated individual has z != validated class")
    if np.any((state.alpha > 0) != (state.zeta == 1)) or np.any(state.alpha < 0):
        raise InvariantError("alpha must be positive exactly where zeta == 1")
    if np.any(data.counts(z)[state.zeta == 0] > 0):
        raise InvariantError("an occupied category has zeta == 0")
    if np.any(state.alpha.sum(axis=1) <= 0):
        raise InvariantError("a visit has all alpha equal to zero")
    if uses_classification_matrix(hyper.variant):
        if hyper.no_lucky_guess and np.any(np.diag(state.a) != 0):
            raise InvariantError("a_tt must be zero under the no-lucky-guess restriction")
        if np.any(state.a.sum(axis=1) <= 0):
            raise InvariantError("a row of a has zero sum")


# ---------------------------------------------------------------------------
# Joint log-density
# ---------------------------------------------------------------------------

def _log_bernoulli_logit(k, v):
    # k*v - log(1 + e^v)
    return k * v - np.logaddexp(0.0, v)


def _log_gamma_pdf(x, shape, rate):
    return shape * np.log(rate) - special.gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x


def _log_normal_pdf(x, mean, var):
    return -0.5 * np.log(2.0 * np.pi * var) - 0.5 * (x - mean) ** 2 / var


def misclassified_counts(state, data, hyper):
    """(T, C) counts of (true, observed) pairs routed through theta."""
    T, C = data.dims.T, data.dims.C
    sel = np.ones_like(state.tau, dtype=bool) if hyper.count_all_individuals else state.tau == 1
    return np.bincount(state.z[sel] * C + data.y[sel], minlength=T * C).reshape(T, C)


def log_joint(state, data, hyper, *, augmented=True):
    """Log joint density of data and latent state, up to a constant.

    With ``augmented=True`` the Polya-Gamma auxiliaries enter through the
    tilt ``exp(kappa*v - omega*v**2/2)/2`` (their PG(1, 0) base density is
    dropped, so the value is defined up to constants in omega) and the
    gamma auxiliaries ``mu`` and ``u`` contribute their conditional
    densities.  With ``augmented=False`` all auxiliaries are left out and
    the Bernoulli terms are evaluated exactly.

    States that break a structural invariant (see :func:`check_state`)
    raise :class:`InvariantError`; otherwise valid states of zero
    probability, such as a miss reported through a zero entry of theta,
    give ``-inf``.
    """
    check_state(state, data, hyper)
    dims, cov, v = data.dims, data.covariates, hyper.variant
    z, tau, y = state.z, state.tau, data.y
    T = dims.T
    total = 0.0

    # classification of each individual
    if v == "ZIDM":
        if np.any(tau != 0):
            return -np.inf
    else:
        if v == "DMDM" and np.any(tau != 1):
            return -np.inf
        theta = normalize_rows(state.a)
        miss = tau == 1
        th = theta[z[miss], y[miss]]
        if np.any(th <= 0):
            return -np.inf
        total += np.log(th).sum()
    if np.any(y[tau == 0] != z[tau == 0]):
        return -np.inf

    # true class given relative abundances
    alpha_z = state.alpha[data.visit_of, z]
    if np.any(alpha_z <= 0):
        return -np.inf
    abar = state.alpha.sum(axis=1)
    total += (np.log(alpha_z) - np.log(abar[data.visit_of])).sum()

    # misclassification indicators
    if hyper.misclassified:
        lin = np.einsum("mp,mp->m", cov.x_indiv, state.beta_psi[z])
        if augmented:
            total += ((tau - 0.5) * lin - 0.5 * state.omega_tau * lin ** 2 - np.log(2.0)).sum()
        else:
            total += _log_bernoulli_logit(tau, lin).sum()
        b0 = hyper.prior_mean(hyper.mu_psi, state.beta_psi.shape[1])
        total += _log_normal_pdf(state.beta_psi, b0, hyper.sigma2_psi).sum()

    # at-risk indicators and unnormalised abundances
    gam = np.exp(cov.x_visit @ state.beta_gamma.T)
    on = state.zeta == 1
    total += _log_gamma_pdf(state.alpha[on], gam[on], 1.0).sum()
    if hyper.zero_inflated:
        lin = (cov.x_site @ state.beta_eta.T)[data.visit_site]
        if augmented:
            total += ((state.zeta - 0.5) * lin - 0.5 * state.omega_zeta * lin ** 2
                      - np.log(2.0)).sum()
        else:
            total += _log_bernoulli_logit(state.zeta, lin).sum()
        b0 = hyper.prior_mean(hyper.mu_eta, state.beta_eta.shape[1])
        total += _log_normal_pdf(state.beta_eta, b0, hyper.sigma2_eta).sum()
    elif np.any(state.zeta != 1):
        return -np.inf
    b0 = hyper.prior_mean(hyper.mu_gamma, state.beta_gamma.shape[1])
    total += _log_normal_pdf(state.beta_gamma, b0, hyper.sigma2_gamma).sum()

    if augmented:
        total += _log_gamma_pdf(state.mu, dims.L, abar).sum()

    # classification matrix
    if uses_classification_matrix(v):
        nu = hyper.nu_matrix(T, dims.C)
        free = nu > 0
        total += _log_gamma_pdf(state.a[free], nu[free], 1.0).sum()
        if augmented:
            m_t = misclassified_counts(state, data, hyper).sum(axis=1)
            abar_t = state.a.sum(axis=1)
            # u_t only enters the augmentation when some draw is routed through row t
            has = m_t > 0
            total += _log_gamma_pdf(state.u[has], m_t[has], abar_t[has]).sum()
    return float(total)
