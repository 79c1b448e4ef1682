"""Accuracy metrics, posterior summaries, convergence checks and replicate studies."""
from dataclasses import dataclass, field
import logging
import time
import warnings

import numpy as np

from .gibbs import RunConfig, run_chains
from .model import Hyperparameters, InvariantError, logit
from .simgen import Scenario1Config, Scenario2Config, gen_scenario1, gen_scenario2

log = logging.getLogger(__name__)

__all__ = [
    "BLOCKS",
    "abs_metric",
    "frob_metric",
    "coverage_metric",
    "posterior_summary",
    "summary_rows",
    "gelman_rubin",
    "score_draws",
    "MetricReport",
    "StudyResult",
    "generating_prior",
    "replicate_study",
]

BLOCKS = ("eta", "psi", "Theta", "theta_star")
BLOCK_LABELS = {"eta": "eta", "psi": "psi", "Theta": "Theta", "theta_star": "theta*"}
METRICS = ("abs", "frob", "cov")

# draws that are not monitored for convergence: indicators and scale auxiliaries
_UNMONITORED = ("zeta", "a", "u")


def _pair(estimate, truth):
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch: estimate {est.shape} vs truth {tru.shape}")
    return est, tru


def abs_metric(estimate, truth):
    """Mean absolute difference over all entries."""
    est, tru = _pair(estimate, truth)
    return float(np.mean(np.abs(est - tru)))


def frob_metric(estimate, truth):
    """Square root of the summed squared differences."""
    est, tru = _pair(estimate, truth)
    return float(np.sqrt(np.sum((est - tru) ** 2)))


def _interval(draws, level):
    tail = 50.0 * (1.0 - level)
    return np.percentile(draws, [tail, 100.0 - tail], axis=0)


def coverage_metric(draws, truth, level=0.95, min_draws=100):
    """Fraction of scalars whose equal-tailed credible interval contains the truth.

    ``draws`` has the sample axis first and the remaining shape of ``truth``.
    """
    draws = np.asarray(draws, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if draws.ndim == 0 or draws.shape[0] == 0:
        raise ValueError("coverage needs at least one draw")
    if draws.shape[1:] != truth.shape:
        raise ValueError(f"shape mismatch: draws {draws.shape[1:]} vs truth {truth.shape}")
    if draws.shape[0] < min_draws:
        warnings.warn(f"coverage from only {draws.shape[0]} draws", RuntimeWarning, stacklevel=2)
    lo, hi = _interval(draws, level)
    return float(np.mean((lo <= truth) & (truth <= hi)))


def _draw_dicts(chains):
    if isinstance(chains, dict):
        return [chains]
    if hasattr(chains, "draws"):
        return [chains.draws]
    return [c.draws if hasattr(c, "draws") else c for c in chains]


def pooled_draws(chains):
    """Concatenate the draws of several chains along the sample axis."""
    dicts = _draw_dicts(chains)
    return {k: np.concatenate([d[k] for d in dicts], axis=0) for k in dicts[0]}


def posterior_summary(chains, level=0.95):
    """Posterior mean and equal-tailed interval per stored quantity.

    Accepts a ``ChainOutput``, a draws dict or a list of either (pooled).
    Derived probabilities were transformed draw by draw before storage, so
    their summaries never pass through summarised inputs.
    """
    draws = pooled_draws(chains)
    out = {}
    for key, d in draws.items():
        d = np.asarray(d, dtype=float)
        if d.shape[0] == 0:
            raise ValueError(f"no draws stored for {key}")
        lo, hi = _interval(d, level)
        out[key] = {"mean": d.mean(axis=0), "lower": lo, "upper": hi}
    return out


def summary_rows(summary):
    """Flatten a summary to ``(parameter, mean, lower, upper)`` rows with 1-based indices."""
    rows = []
    for key in sorted(summary):
        s = summary[key]
        for idx in np.ndindex(*np.shape(s["mean"])):
            label = key + ("[" + ",".join(str(i + 1) for i in idx) + "]" if idx else "")
            rows.append((label, float(s["mean"][idx]), float(s["lower"][idx]),
                         float(s["upper"][idx])))
    return rows


def gelman_rubin(chains, keys=None):
    """Potential scale reduction factor per scalar from two or more chains.

    Uses the between/within variance form with n draws per chain.  Scalars
    constant within every chain give 1.0 when the chains agree and inf
    otherwise.
    """
    dicts = _draw_dicts(chains)
    if len(dicts) < 2:
        raise ValueError("Gelman-Rubin needs at least two chains")
    if keys is None:
        keys = [k for k in dicts[0] if k not in _UNMONITORED]
    out = {}
    for key in keys:
        x = np.stack([np.asarray(d[key], dtype=float) for d in dicts])   # (m, n, ...)
        n = x.shape[1]
        if any(np.shape(d[key])[0] != n for d in dicts):
            raise ValueError("chains must have equal lengths")
        if n < 2:
            raise ValueError("need at least two draws per chain")
        means = x.mean(axis=1)
        B = n * means.var(axis=0, ddof=1)
        W = x.var(axis=1, ddof=1).mean(axis=0)
        V = (n - 1) / n * W + B / n
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.sqrt(V / W)
        r = np.where(W > 0, r, np.where(B > 0, np.inf, 1.0))
        out[key] = r
    return out


def score_draws(draws, truth, blocks=BLOCKS, level=0.95):
    """ABS, FROB and COV for each block present in both ``draws`` and ``truth``."""
    scores = {}
    for block in blocks:
        tru = None if truth is None else truth.block(block)
        if block not in draws or tru is None:
            continue
        d = np.asarray(draws[block], dtype=float)
        est = d.mean(axis=0)
        scores[block] = {"abs": abs_metric(est, tru), "frob": frob_metric(est, tru),
                         "cov": coverage_metric(d, tru, level)}
    return scores


@dataclass
class MetricReport:
    """Replicate-averaged metrics for one variant; missing blocks map to None."""
    variant: str
    metrics: dict
    replicates: int
    failures: int = 0
    runtime: float = 0.0

    def __post_init__(self):
        for block, m in self.metrics.items():
            if m is None:
                continue
            if not (0.0 <= m["cov"] <= 1.0 and m["abs"] >= 0 and m["frob"] >= 0):
                raise ValueError(f"metric out of range for {block}: {m}")

    def value(self, block, metric):
        m = self.metrics.get(block)
        return None if m is None else m[metric]


@dataclass
class StudyResult:
    reports: list
    per_replicate: dict            # variant -> list of per-replicate score dicts (None on failure)
    blocks: tuple = BLOCKS
    settings: dict = field(default_factory=dict)

    def report(self, variant):
        for r in self.reports:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def replicate_values(self, variant, block, metric):
        """Per-replicate metric values, NaN where a fit failed."""
        return np.array([np.nan if s is None or block not in s else s[block][metric]
                         for s in self.per_replicate[variant]])

    def table_rows(self):
        header = ["variant"] + [f"{b}_{m}" for b in self.blocks for m in METRICS]
        header += ["replicates", "failures", "runtime_s"]
        rows = []
        for rep in self.reports:
            row = [rep.variant]
            for b in self.blocks:
                for m in METRICS:
                    v = rep.value(b, m)
                    row.append("-" if v is None else f"{v:.4f}")
            row += [str(rep.replicates), str(rep.failures), f"{rep.runtime:.1f}"]
            rows.append(row)
        return header, rows

    def to_csv(self):
        header, rows = self.table_rows()
        return "\n".join(",".join(r) for r in [header] + rows) + "\n"

    def to_text(self):
        """Aligned table: one row per variant, ABS/FROB/COV under each block."""
        lines = []
        w = 6
        top = " " * 10 + "".join(f"{BLOCK_LABELS.get(b, b):^{3 * w + 2}}" for b in self.blocks)
        sub = f"{'':10}" + "".join(
            "".join(f"{m.upper():>{w}}" for m in METRICS) + "  " for _ in self.blocks)
        lines += [top.rstrip(), sub.rstrip()]
        for rep in self.reports:
            cells = []
            for b in self.blocks:
                vals = [rep.value(b, m) for m in METRICS]
                cells.append("".join(f"{'-' if v is None else f'{v:.2f}':>{w}}" for v in vals) + "  ")
            lines.append((f"{rep.variant:<10}" + "".join(cells)).rstrip())
        return "\n".join(lines) + "\n"


def generating_prior(cfg):
    """Intercept prior means centred on the generating process.

    Scenario 1 fixes the at-risk and misclassification probabilities.
    Scenario 2 without covariates centres eta on the mean occupancy and
    leaves psi at 0; with covariates both are 0.
    """
    clip = lambda p: float(np.clip(p, 0.01, 0.99))
    if isinstance(cfg, Scenario1Config):
        return {"mu_psi": logit(clip(cfg.misclass_prob)), "mu_eta": logit(clip(cfg.at_risk_prob))}
    if isinstance(cfg, Scenario2Config):
        if cfg.with_covariates:
            return {"mu_psi": 0.0, "mu_eta": 0.0}
        return {"mu_psi": 0.0, "mu_eta": logit(clip(np.mean(cfg.occupancy_prob)))}
    raise TypeError(f"unknown scenario config {type(cfg).__name__}")


def _generate(cfg, seed):
    if isinstance(cfg, Scenario1Config):
        return gen_scenario1(cfg, seed)
    if isinstance(cfg, Scenario2Config):
        return gen_scenario2(cfg, seed)
    raise TypeError(f"unknown scenario config {type(cfg).__name__}")


def replicate_seeds(seed, r):
    """(data seed, fit seed) for replicate ``r`` of a study."""
    s = np.random.SeedSequence([int(seed), int(r)]).generate_state(2, dtype=np.uint32)
    return int(s[0]), int(s[1])


def _hyper_for(variant, base, prior):
    if isinstance(variant, Hyperparameters):
        return variant
    kw = {k: getattr(base, k) for k in base.__dataclass_fields__} if base else {}
    kw["variant"] = variant
    if prior:
        kw.update(prior)
    return Hyperparameters(**kw)


def _run_replicate(args):
    scenario, variants, r, seed, run_config, base_hyper, prior_mode, blocks = args
    data_seed, fit_seed = replicate_seeds(seed, r)
    records, covariates, truth = _generate(scenario, data_seed)
    data = records.to_dataset(covariates)
    prior = generating_prior(scenario) if prior_mode == "auto" else None
    cfg = RunConfig(**{**vars(run_config), "seed": fit_seed})
    out = {}
    for v in variants:
        hyper = _hyper_for(v, base_hyper, prior)
        try:
            chains = run_chains(data, hyper, cfg)
            scores = score_draws(pooled_draws(chains), truth, blocks)
            out[hyper.variant] = (scores, sum(c.runtime for c in chains))
        except (InvariantError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("replicate %d, %s failed: %s", r, hyper.variant, exc)
            out[hyper.variant] = (None, 0.0)
    return out


def replicate_study(scenario, variants=("missZIDM", "missDM", "DMDM", "ZIDM"), R=10, seed=0, *,
                    run_config=None, hyper=None, prior="auto", blocks=BLOCKS, workers=1):
    """Generate ``R`` datasets, fit every variant to each and average the metrics.

    ``variants`` holds variant names (combined with ``hyper`` and the
    ``prior`` rule) or ready ``Hyperparameters``.  ``prior="auto"``
    centres the intercept priors with :func:`generating_prior`; ``None``
    keeps ``hyper`` as given.  Results depend only on the arguments.
    """
    if R < 1:
        raise ValueError("R must be at least 1")
    run_config = RunConfig() if run_config is None else run_config
    t0 = time.perf_counter()
    jobs = [(scenario, tuple(variants), r, seed, run_config, hyper, prior, tuple(blocks))
            for r in range(R)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_replicate, jobs))
    else:
        results = [_run_replicate(j) for j in jobs]

    names = list(results[0])
    per_rep = {v: [res[v][0] for res in results] for v in names}
    reports = []
    for v in names:
        ok = [s for s in per_rep[v] if s is not None]
        metrics = {}
        for b in blocks:
            vals = [s[b] for s in ok if b in s]
            metrics[b] = ({m: float(np.mean([x[m] for x in vals])) for m in METRICS}
                          if vals else None)
        reports.append(MetricReport(
            variant=v, metrics=metrics, replicates=len(ok), failures=R - len(ok),
            runtime=float(sum(res[v][1] for res in results))))
        if R - len(ok):
            log.warning("%s: %d of %d replicates failed and were excluded", v, R - len(ok), R)
    log.info("study finished in %.1fs", time.perf_counter() - t0)
    return StudyResult(reports=reports, per_replicate=per_rep, blocks=tuple(blocks),
                       settings={"R": R, "seed": seed, "prior": prior})
