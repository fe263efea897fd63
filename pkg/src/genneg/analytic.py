"""Quadrature-backed ground truth on 1-D Gaussian mixtures with interval
constraints: exact diffused densities, the exact posterior classifier, and
executable identity checks for the guidance theory.

Densities diffused to noise level sigma have closed forms built from
Gaussian convolutions and interval masses of the conditioning posterior;
adaptive quadrature provides an independent cross check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.special import log_ndtr, logsumexp
from scipy.stats import norm

from .errors import ConfigError, ContractError, DegeneratePriorError

_FD_STEP = 1e-5


@dataclass(frozen=True)
class Mixture1D:
    """Finite Gaussian mixture on the line."""

    weights: tuple
    means: tuple
    stds: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if not np.isclose(w.sum(), 1.0, atol=1e-12):
            raise ConfigError("mixture weights must sum to 1")
        if np.any(w <= 0) or np.any(np.asarray(self.stds) <= 0):
            raise ConfigError("weights and stds must be positive")
        if not (len(self.weights) == len(self.means) == len(self.stds)):
            raise ConfigError("component lists must have equal length")

    def sample(self, n: int, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        comp = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights))
        mu = np.asarray(self.means)[comp]
        sd = np.asarray(self.stds)[comp]
        return (mu + sd * rng.standard_normal(n))[:, None]


@dataclass(frozen=True)
class Constraint1D:
    """Closed, disjoint, sorted union of intervals (may reach +-inf)."""

    intervals: tuple  # ((lo, hi), ...)

    def __post_init__(self):
        prev_hi = -np.inf
        if not self.intervals:
            raise ConfigError("constraint needs at least one interval")
        for lo, hi in self.intervals:
            if not lo < hi:
                raise ConfigError(f"empty interval ({lo}, {hi})")
            if lo < prev_hi:
                raise ConfigError("intervals must be disjoint and sorted")
            prev_hi = hi

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros(x.shape, dtype=bool)
        for lo, hi in self.intervals:
            out |= (x >= lo) & (x <= hi)
        return out


HALF_LINE = Constraint1D(((0.0, np.inf),))
LAB_MIXTURE = Mixture1D(weights=(0.5, 0.5), means=(-2.0, 2.0), stds=(0.5, 0.5))


def _log_interval_mass(z_lo, z_hi):
    """log(Phi(z_hi) - Phi(z_lo)) for standard-normal z, stable in far tails."""
    z_lo, z_hi = np.broadcast_arrays(np.asarray(z_lo, dtype=np.float64),
                                     np.asarray(z_hi, dtype=np.float64))
    # reflect right-tail intervals so the difference is well conditioned
    with np.errstate(invalid="ignore"):
        flip = np.nan_to_num(z_lo + z_hi, nan=0.0, posinf=1.0, neginf=-1.0) > 0
    a = np.where(flip, -z_hi, z_lo)
    b = np.where(flip, -z_lo, z_hi)
    lb = log_ndtr(b)
    la = log_ndtr(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = lb + np.log1p(-np.exp(np.minimum(la - lb, 0.0)))
    return np.where(np.isneginf(la), lb, out)


def positive_mass(mixture: Mixture1D, constraint: Constraint1D) -> float:
    """alpha: probability of the constrained region under the mixture."""
    total = 0.0
    for w, mu, sd in zip(mixture.weights, mixture.means, mixture.stds):
        for lo, hi in constraint.intervals:
            total += w * (norm.cdf((hi - mu) / sd) - norm.cdf((lo - mu) / sd))
    return float(total)


def _component_logs(mixture: Mixture1D, constraint: Constraint1D | None,
                    x, sigma: float):
    """Per-component log of w_k N(x; mu_k, s_k^2 + sigma^2) [* mass_k(x)].

    Returns (log_terms (K, n), posterior means rho factors) used by both the
    density and its derivative.
    """
    x = np.asarray(x, dtype=np.float64)
    tau = float(sigma) ** 2
    logs = []
    extras = []
    for w, mu, sd in zip(mixture.weights, mixture.means, mixture.stds):
        v = sd * sd + tau
        base = np.log(w) + norm.logpdf(x, loc=mu, scale=np.sqrt(v))
        if constraint is None:
            logs.append(base)
            extras.append(None)
            continue
        if tau == 0.0:
            inside = constraint.contains(x)
            logs.append(np.where(inside, base, -np.inf))
            extras.append(None)
            continue
        # posterior of x0 given x_t under this component
        post_var = sd * sd * tau / v
        post_std = np.sqrt(post_var)
        rho = sd * sd / v  # d post_mean / d x
        post_mean = (mu * tau + x * sd * sd) / v
        zs = [((lo - post_mean) / post_std, (hi - post_mean) / post_std)
              for lo, hi in constraint.intervals]
        log_masses = [_log_interval_mass(zl, zh) for zl, zh in zs]
        log_mass = logsumexp(np.stack(log_masses, axis=0), axis=0)
        logs.append(base + log_mass)
        extras.append((post_mean, post_std, rho, zs, log_mass))
    return np.stack(logs, axis=0), extras


def diffused_logpdf(mixture: Mixture1D, constraint: Constraint1D | None,
                    x, sigma: float) -> np.ndarray:
    """log density at noise level sigma, optionally restricted and renormalized."""
    if sigma < 0:
        raise ContractError("sigma must be nonnegative")
    logs, _ = _component_logs(mixture, constraint, x, sigma)
    out = logsumexp(logs, axis=0)
    if constraint is not None:
        alpha = positive_mass(mixture, constraint)
        if not 0.0 < alpha:
            raise DegeneratePriorError("constraint carries no mixture mass")
        out = out - np.log(alpha)
    return out


def diffused_pdf(mixture: Mixture1D, constraint: Constraint1D | None,
                 x, sigma: float, method: str = "closed") -> np.ndarray:
    """Density at noise level sigma; ``method="quad"`` integrates directly."""
    x_arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if method == "closed":
        out = np.exp(diffused_logpdf(mixture, constraint, x_arr, sigma))
    elif method == "quad":
        out = np.array([_diffused_pdf_quad(mixture, constraint, float(v), sigma)
                        for v in x_arr])
    else:
        raise ConfigError(f"unknown method {method!r}")
    return float(out[0]) if np.ndim(x) == 0 else out


def _mixture_pdf(mixture: Mixture1D, x0):
    out = 0.0
    for w, mu, sd in zip(mixture.weights, mixture.means, mixture.stds):
        out = out + w * norm.pdf(x0, loc=mu, scale=sd)
    return out


def _diffused_pdf_quad(mixture: Mixture1D, constraint: Constraint1D | None,
                       x: float, sigma: float, tol: float = 1e-10) -> float:
    if sigma == 0.0:
        base = _mixture_pdf(mixture, x)
        if constraint is None:
            return float(base)
        inside = bool(constraint.contains(np.asarray(x)))
        return float(base * inside / positive_mass(mixture, constraint))

    def integrand(x0):
        return _mixture_pdf(mixture, x0) * norm.pdf(x, loc=x0, scale=sigma)

    if constraint is None:
        pieces = [(-np.inf, np.inf)]
        denom = 1.0
    else:
        pieces = constraint.intervals
        denom = positive_mass(mixture, constraint)
    total = 0.0
    for lo, hi in pieces:
        val, err = integrate.quad(integrand, lo, hi, epsabs=tol, epsrel=tol, limit=400)
        if not np.isfinite(val):
            raise ContractError("quadrature failed to converge")
        total += val
    return float(total / denom)


def mixture_score(mixture: Mixture1D, x, sigma: float) -> np.ndarray:
    """d/dx log p_sigma(x) for the unrestricted diffused mixture, closed form."""
    x = np.asarray(x, dtype=np.float64)
    tau = float(sigma) ** 2
    logs, derivs = [], []
    for w, mu, sd in zip(mixture.weights, mixture.means, mixture.stds):
        v = sd * sd + tau
        logs.append(np.log(w) + norm.logpdf(x, loc=mu, scale=np.sqrt(v)))
        derivs.append(-(x - mu) / v)
    logs = np.stack(logs, axis=0)
    resp = np.exp(logs - logsumexp(logs, axis=0))
    return np.sum(resp * np.stack(derivs, axis=0), axis=0)


def restricted_score(mixture: Mixture1D, constraint: Constraint1D,
                     x, sigma: float) -> np.ndarray:
    """d/dx log p_sigma(x | inside), closed form via posterior interval masses."""
    if sigma <= 0:
        raise ContractError("restricted score needs sigma > 0")
    x = np.asarray(x, dtype=np.float64)
    logs, extras = _component_logs(mixture, constraint, x, sigma)
    resp = np.exp(logs - logsumexp(logs, axis=0))
    total = np.zeros_like(x, dtype=np.float64)
    tau = float(sigma) ** 2
    for k, (w, mu, sd) in enumerate(zip(mixture.weights, mixture.means, mixture.stds)):
        v = sd * sd + tau
        post_mean, post_std, rho, zs, log_mass = extras[k]
        dmass = np.zeros_like(x, dtype=np.float64)
        for z_lo, z_hi in zs:
            # d mass/dx = (rho / post_std) * (phi(z_lo) - phi(z_hi))
            lo_term = np.where(np.isfinite(z_lo),
                               np.exp(norm.logpdf(np.where(np.isfinite(z_lo), z_lo, 0.0)) - log_mass),
                               0.0)
            hi_term = np.where(np.isfinite(z_hi),
                               np.exp(norm.logpdf(np.where(np.isfinite(z_hi), z_hi, 0.0)) - log_mass),
                               0.0)
            dmass = dmass + (rho / post_std) * (lo_term - hi_term)
        total = total + resp[k] * (-(x - mu) / v + dmass)
    return total


def exact_classifier(mixture: Mixture1D, constraint: Constraint1D,
                     x, sigma: float) -> np.ndarray:
    """Posterior probability that the clean point satisfies the constraint."""
    return np.exp(log_exact_classifier(mixture, constraint, x, sigma))


def log_exact_classifier(mixture: Mixture1D, constraint: Constraint1D,
                         x, sigma: float) -> np.ndarray:
    alpha = positive_mass(mixture, constraint)
    if not 0.0 < alpha < 1.0:
        raise DegeneratePriorError(f"constraint mass must be in (0,1), got {alpha}")
    x_arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    log_num, _ = _component_logs(mixture, constraint, x_arr, sigma)
    log_den, _ = _component_logs(mixture, None, x_arr, sigma)
    out = logsumexp(log_num, axis=0) - logsumexp(log_den, axis=0)
    out = np.minimum(out, 0.0)
    return float(out[0]) if np.ndim(x) == 0 else out


def exact_classifier_quad(mixture: Mixture1D, constraint: Constraint1D,
                          x: float, sigma: float) -> float:
    """Independent check: integral of oracle * posterior(x0 | x_t)."""
    if sigma <= 0:
        raise ContractError("quadrature classifier needs sigma > 0")

    def joint(x0):
        return _mixture_pdf(mixture, x0) * norm.pdf(x, loc=x0, scale=sigma)

    num = 0.0
    for lo, hi in constraint.intervals:
        val, _ = integrate.quad(joint, lo, hi, epsabs=1e-12, epsrel=1e-12, limit=400)
        num += val
    den, _ = integrate.quad(joint, -np.inf, np.inf, epsabs=1e-12, epsrel=1e-12, limit=400)
    return float(num / den)


class AnalyticBayesClassifier:
    """Exact posterior classifier exposing the guidance interface."""

    def __init__(self, mixture: Mixture1D, constraint: Constraint1D,
                 guidance_scale: float = 1.0):
        self.mixture = mixture
        self.constraint = constraint
        self.guidance_scale = guidance_scale

    def prob(self, x, sigma):
        return exact_classifier(self.mixture, self.constraint, np.ravel(x), sigma)

    def grad_log(self, x, sigma):
        """Central finite difference of log C, step 1e-5."""
        x = np.asarray(x, dtype=np.float64)
        flat = np.ravel(x)
        up = log_exact_classifier(self.mixture, self.constraint, flat + _FD_STEP, sigma)
        dn = log_exact_classifier(self.mixture, self.constraint, flat - _FD_STEP, sigma)
        g = self.guidance_scale * (up - dn) / (2 * _FD_STEP)
        return g.reshape(np.shape(x)) if np.ndim(x) else float(g)


# ---------------------------------------------------------------------------
# Identity checks
# ---------------------------------------------------------------------------

def _fd(fn, x, h=_FD_STEP):
    return (fn(x + h) - fn(x - h)) / (2 * h)


def verify_theorem1(mixture: Mixture1D, constraint: Constraint1D,
                    t_grid=None, x_grid=None, tolerance: float = 1e-3,
                    alpha_times=(0.0, 0.5, 2.0),
                    alpha_tolerance: float = 1e-6) -> dict:
    """Check score(p) + grad log C = score(p | positive) on a grid.

    The mixture score is evaluated in closed form, the classifier and
    restricted sides by central differences of their closed-form logs.  Also
    checks that the positive-class mass is the same at several noise levels.
    """
    t_grid = np.asarray([0.1, 0.5, 1.0, 2.0] if t_grid is None else t_grid)
    x_grid = np.asarray(np.linspace(-4.0, 4.0, 81) if x_grid is None else x_grid)
    per_time = {}
    worst = 0.0
    for t in t_grid:
        lhs = mixture_score(mixture, x_grid, t) + _fd(
            lambda v: log_exact_classifier(mixture, constraint, v, t), x_grid)
        rhs = _fd(lambda v: diffused_logpdf(mixture, constraint, v, t), x_grid)
        err = float(np.max(np.abs(lhs - rhs)))
        per_time[float(t)] = err
        worst = max(worst, err)

    alphas = [_alpha_at_time(mixture, constraint, t) for t in alpha_times]
    alpha_spread = float(np.max(alphas) - np.min(alphas))

    checks = [
        {"name": "guided_score_matches_restricted_score",
         "grid": {"x": [float(x_grid[0]), float(x_grid[-1]), int(len(x_grid))],
                  "t": [float(v) for v in t_grid]},
         "max_error": worst, "tolerance": tolerance, "passed": worst < tolerance,
         "per_time": per_time},
        {"name": "positive_mass_time_invariant",
         "grid": {"t": [float(v) for v in alpha_times]},
         "max_error": alpha_spread, "tolerance": alpha_tolerance,
         "passed": alpha_spread < alpha_tolerance,
         "values": [float(a) for a in alphas]},
    ]
    return {"checks": checks, "passed": all(c["passed"] for c in checks)}


def _alpha_at_time(mixture: Mixture1D, constraint: Constraint1D, t: float) -> float:
    """Positive-class mass at noise level t via quadrature of p_t * C_t."""
    if t == 0.0:
        def integrand(x0):
            return _mixture_pdf(mixture, x0)
        total = 0.0
        for lo, hi in constraint.intervals:
            val, _ = integrate.quad(integrand, lo, hi, epsabs=1e-12, epsrel=1e-12)
            total += val
        return float(total)

    def integrand(x):
        return (diffused_pdf(mixture, None, x, t)
                * exact_classifier(mixture, constraint, x, t))

    lo = min(mixture.means) - 12 * (max(mixture.stds) + t)
    hi = max(mixture.means) + 12 * (max(mixture.stds) + t)
    val, _ = integrate.quad(integrand, lo, hi, epsabs=1e-12, epsrel=1e-12, limit=400)
    return float(val)


def verify_corollary1(mixture: Mixture1D, constraint: Constraint1D,
                      x_grid=None, ratio_tolerance: float = 1e-9,
                      sampler_kwargs: dict | None = None) -> dict:
    """Check the truncation identities and, optionally, sampler infraction.

    (a) the restricted clean density vanishes off the constraint,
    (b) on the constraint it equals the base density divided by alpha,
    (c) the restricted density dominates the base density on a sampled
        positive set, so dataset likelihood can only improve,
    (d) when sampler_kwargs is given, reverse-SDE sampling guided by the
        exact classifier reports its empirical infraction.
    """
    alpha = _alpha_at_time(mixture, constraint, 0.0)  # quadrature, not closed form
    x_grid = np.asarray(np.linspace(0.05, 4.0, 80) if x_grid is None else x_grid)
    inside = constraint.contains(x_grid)
    if not np.all(inside):
        raise ContractError("corollary ratio grid must lie inside the constraint")

    base = diffused_pdf(mixture, None, x_grid, 0.0)
    restricted = diffused_pdf(mixture, constraint, x_grid, 0.0)
    ratio_err = float(np.max(np.abs(restricted * alpha - base)))

    outside_probe = _outside_points(constraint)
    zero_mass = float(np.max(diffused_pdf(mixture, constraint, outside_probe, 0.0))) \
        if outside_probe.size else 0.0

    draws = mixture.sample(512, seed=7)[:, 0]
    pos = draws[constraint.contains(draws)]
    log_gain = (diffused_logpdf(mixture, constraint, pos, 0.0)
                - diffused_logpdf(mixture, None, pos, 0.0))
    min_gain = float(np.min(log_gain))

    checks = [
        {"name": "restricted_density_is_base_over_alpha",
         "grid": {"x": [float(x_grid[0]), float(x_grid[-1]), int(len(x_grid))]},
         "max_error": ratio_err, "tolerance": ratio_tolerance,
         "passed": ratio_err < ratio_tolerance},
        {"name": "no_mass_outside_constraint",
         "grid": {"points": int(outside_probe.size)},
         "max_error": zero_mass, "tolerance": 0.0, "passed": zero_mass == 0.0},
        {"name": "positive_set_likelihood_dominates",
         "grid": {"points": int(pos.size)},
         "max_error": -min_gain, "tolerance": 0.0, "passed": min_gain >= 0.0},
    ]
    if sampler_kwargs is not None:
        rate, stderr = guided_sampler_infraction(mixture, constraint, **sampler_kwargs)
        tol = sampler_kwargs.get("tolerance", 0.005)
        grid = {k: v for k, v in sampler_kwargs.items()
                if isinstance(v, (int, float, str, bool))}
        checks.append({"name": "guided_sampler_infraction",
                       "grid": grid,
                       "max_error": rate, "tolerance": tol,
                       "passed": rate < tol, "stderr": stderr})
    return {"alpha": alpha, "checks": checks,
            "passed": all(c["passed"] for c in checks)}


def _outside_points(constraint: Constraint1D, span: float = 6.0, n: int = 64) -> np.ndarray:
    probe = np.linspace(-span, span, 4 * n)
    return probe[~constraint.contains(probe)]


def guided_sampler_infraction(mixture: Mixture1D, constraint: Constraint1D,
                              n: int = 100_000, steps: int = 200, seed: int = 0,
                              schedule=None, **_) -> tuple[float, float]:
    """Sample with base score + exact-classifier gradient; count violations."""
    from .diffusion import NoiseSchedule, sample_reverse

    schedule = schedule or NoiseSchedule(sigma_min=0.002, sigma_max=80.0)
    clf = AnalyticBayesClassifier(mixture, constraint)

    def score_fn(x, sigma):
        flat = x[:, 0]
        return (mixture_score(mixture, flat, sigma)
                + clf.grad_log(flat, sigma))[:, None]

    samples = sample_reverse(score_fn, n, 1, schedule, steps=steps, seed=seed)
    bad = ~constraint.contains(samples[:, 0])
    rate = float(np.mean(bad))
    return rate, float(np.sqrt(max(rate * (1 - rate), 1e-12) / n))


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
