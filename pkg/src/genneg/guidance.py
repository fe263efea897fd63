"""Time-dependent binary classifiers and oracle-assisted guidance.

The classifier sees the same preconditioned input and noise embedding as the
score network and emits one logit; guidance adds the input-gradient of its
log probability to the baseline score.  Training corrects the balanced
positive/negative sets with importance weights given by the generator's raw
class prior, so balancing does not bias the learned posterior.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import nets
from .diffusion import (NoiseSchedule, ScoreModel, TrainConfig, draw_sigmas,
                        forward_sample, precondition_coeffs, sample_reverse, score)
from .errors import (BudgetError, ConfigError, ContractError,
                     DegeneratePriorError)
from .oracles import evaluate


def _softplus(z):
    return np.logaddexp(0.0, z)


def _expit(z):
    # logistic that never produces exact 0/1 for |z| <= 36
    return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True)
class TimeClassifier:
    """Binary classifier over (point, noise level) with output in (0, 1)."""

    params: nets.NetParams
    schedule: NoiseSchedule
    sigma_data: float = 0.5
    guidance_scale: float = 1.0

    def grad_log(self, x, sigma):
        return grad_log_classifier(self, x, sigma)


def new_classifier(d: int, schedule: NoiseSchedule | None = None,
                   hidden: int = 256, t_dim: int = 128, seed: int = 0,
                   sigma_data: float = 0.5) -> TimeClassifier:
    schedule = schedule or NoiseSchedule()
    params = nets.init_params(d, 1, hidden=hidden, t_dim=t_dim, seed=seed)
    return TimeClassifier(params, schedule, sigma_data)


def _preconditioned_inputs(clf: TimeClassifier, x: np.ndarray, sigma):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],)).astype(np.float64)
    c_in = 1.0 / np.sqrt(sig ** 2 + clf.sigma_data ** 2)
    emb = nets.sinusoidal_embed(0.25 * np.log(sig), clf.params.t_dim)
    return x, c_in, emb


def classifier_logit(clf: TimeClassifier, x: np.ndarray, sigma) -> np.ndarray:
    x2, c_in, emb = _preconditioned_inputs(clf, x, sigma)
    z = nets.net_forward(clf.params, c_in[:, None] * x2, emb)[:, 0]
    return z[0] if np.asarray(x).ndim == 1 else z


def classifier_forward(clf: TimeClassifier, x: np.ndarray, sigma) -> np.ndarray:
    """Probability of the positive class, strictly inside (0, 1) at f64."""
    z = classifier_logit(clf, x, sigma)
    return _expit(np.clip(z, -36.0, 36.0))


def grad_log_classifier(clf: TimeClassifier, x: np.ndarray, sigma) -> np.ndarray:
    """Exact input gradient of log C(x; sigma): (1 - p) * grad logit."""
    x2, c_in, emb = _preconditioned_inputs(clf, x, sigma)
    ones = np.ones((x2.shape[0], 1))
    z, dz = nets.forward_and_input_grad(clf.params, c_in[:, None] * x2, emb, ones)
    one_minus_p = _expit(-z[:, 0])
    g = clf.guidance_scale * (one_minus_p * c_in)[:, None] * dz
    return g[0] if np.asarray(x).ndim == 1 else g


def grad_log_one_minus_classifier(clf: TimeClassifier, x: np.ndarray, sigma) -> np.ndarray:
    """Input gradient of log(1 - C); useful for probing, not guidance."""
    x2, c_in, emb = _preconditioned_inputs(clf, x, sigma)
    ones = np.ones((x2.shape[0], 1))
    z, dz = nets.forward_and_input_grad(clf.params, c_in[:, None] * x2, emb, ones)
    p = _expit(z[:, 0])
    g = -(p * c_in)[:, None] * dz
    return g[0] if np.asarray(x).ndim == 1 else g


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _noised_logits(clf: TimeClassifier, x0, rng, config: TrainConfig, draws: int):
    """Draw (t, eps) per point per draw and return logits (n, draws)."""
    n = x0.shape[0]
    rep = np.repeat(x0, draws, axis=0)
    sig = draw_sigmas(config, clf.schedule, rng, n * draws)
    x_t = forward_sample(rep, sig, rng.standard_normal(rep.shape))
    z = classifier_logit(clf, x_t, sig)
    return z.reshape(n, draws)


def ce_loss(clf: TimeClassifier, x0: np.ndarray, y: np.ndarray, rng,
            config: TrainConfig | None = None, draws: int = 1) -> float:
    """Monte Carlo binary cross-entropy on noised points."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be in {0, 1}")
    config = config or classifier_train_config()
    z = _noised_logits(clf, x0, rng, config, draws)
    term = np.where(y[:, None] == 1, _softplus(-z), _softplus(z))
    return float(np.mean(term))


def is_loss(alpha: float, positives: np.ndarray, negatives: np.ndarray,
            clf: TimeClassifier, rng, config: TrainConfig | None = None,
            draws: int = 1) -> float:
    """Importance-weighted cross entropy on balanced sets.

    alpha * mean over positives of E[-log C]
    + (1 - alpha) * mean over negatives of E[-log(1 - C)].
    """
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if positives.shape[0] != negatives.shape[0] or positives.shape[0] < 1:
        raise ContractError("is_loss needs balanced nonempty sets")
    if not (0.0 < alpha < 1.0):
        raise DegeneratePriorError(f"class prior must be in (0,1), got {alpha}")
    config = config or classifier_train_config()
    z_pos = _noised_logits(clf, positives, rng, config, draws)
    z_neg = _noised_logits(clf, negatives, rng, config, draws)
    return float(alpha * np.mean(_softplus(-z_pos))
                 + (1.0 - alpha) * np.mean(_softplus(z_neg)))


def estimate_alpha(n_positive: int, n_negative: int) -> float:
    """Class prior from raw (pre-balancing) counts."""
    total = n_positive + n_negative
    if total <= 0:
        raise ContractError("no raw samples to estimate a prior from")
    if n_positive == 0 or n_negative == 0:
        raise DegeneratePriorError(
            f"degenerate prior from counts ({n_positive}, {n_negative}); guidance undefined")
    return n_positive / total


def balanced_subsample(n: int, data: np.ndarray, seed: int = 0) -> np.ndarray:
    """Uniform without-replacement subsample of n rows, original order kept."""
    data = np.atleast_2d(np.asarray(data))
    if n < 0:
        raise ConfigError("subsample size must be nonnegative")
    if data.shape[0] < n:
        raise ContractError(f"cannot take {n} rows from {data.shape[0]}")
    if n == 0:
        return data[:0]
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(data.shape[0], size=n, replace=False))
    return data[idx]


def bayes_optimal_prob(alpha: float, p1, p0):
    """alpha p1 / (alpha p1 + (1 - alpha) p0); the loss minimizer."""
    if not (0.0 < alpha < 1.0):
        raise DegeneratePriorError(f"class prior must be in (0,1), got {alpha}")
    p1 = np.asarray(p1, dtype=np.float64)
    p0 = np.asarray(p0, dtype=np.float64)
    if np.any(p1 < 0) or np.any(p0 < 0):
        raise ContractError("density values must be nonnegative")
    denom = alpha * p1 + (1.0 - alpha) * p0
    if np.any(denom == 0):
        raise ContractError("both class densities vanish; posterior undefined")
    out = alpha * p1 / denom
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Labeled sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledSet:
    """Balanced clean-point sets with the raw prior recorded pre-balancing."""

    positive: np.ndarray
    negative: np.ndarray
    alpha: float
    raw_positive: int
    raw_negative: int

    def __post_init__(self):
        if self.positive.shape[0] != self.negative.shape[0]:
            raise ContractError("labeled set must be balanced")
        if not (0.0 < self.alpha < 1.0):
            raise DegeneratePriorError(f"alpha must be in (0,1), got {self.alpha}")


def collect_labeled(sample_fn, oracle, n_per_class: int, budget: int,
                    seed: int = 0, batch: int = 8192) -> LabeledSet:
    """Sample, label, and balance until both classes hold n_per_class points.

    ``sample_fn(n, seed) -> (n, d) array`` draws from the current generator.
    Raises BudgetError with achieved counts if the budget runs out first.
    """
    if budget < 2 * n_per_class:
        raise ConfigError("budget must be at least 2 * n_per_class")
    ss = np.random.SeedSequence(seed)
    pos_parts, neg_parts = [], []
    n_pos = n_neg = used = 0
    round_idx = 0
    while min(n_pos, n_neg) < n_per_class:
        if used >= budget:
            raise BudgetError(
                f"budget {budget} exhausted with {n_pos} positives, {n_neg} negatives",
                positives=n_pos, negatives=n_neg)
        take = min(batch, budget - used)
        draw_seed = int(ss.spawn(1)[0].generate_state(1)[0]) + round_idx
        xs = sample_fn(take, draw_seed)
        labels = evaluate(oracle, xs)
        pos_parts.append(xs[labels == 1])
        neg_parts.append(xs[labels == 0])
        n_pos += int(np.sum(labels == 1))
        n_neg += int(np.sum(labels == 0))
        used += take
        round_idx += 1
    alpha = estimate_alpha(n_pos, n_neg)
    pos = np.concatenate(pos_parts, axis=0)
    neg = np.concatenate(neg_parts, axis=0)
    sub_seed = int(np.random.SeedSequence((seed, 0xBA1A)).generate_state(1)[0])
    return LabeledSet(
        positive=balanced_subsample(n_per_class, pos, seed=sub_seed),
        negative=balanced_subsample(n_per_class, neg, seed=sub_seed + 1),
        alpha=alpha, raw_positive=n_pos, raw_negative=n_neg)


def save_labeled(directory, stem: str, labeled: LabeledSet) -> None:
    """Two CSVs plus a JSON sidecar so the prior survives balancing."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in (("positive", labeled.positive), ("negative", labeled.negative)):
        with (directory / f"{stem}_{name}.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i}" for i in range(arr.shape[1])])
            for row in arr:
                writer.writerow([repr(float(v)) for v in row])
    (directory / f"{stem}_meta.json").write_text(json.dumps({
        "alpha": labeled.alpha,
        "raw_positive": labeled.raw_positive,
        "raw_negative": labeled.raw_negative,
        "n_per_class": int(labeled.positive.shape[0]),
    }, indent=2, sort_keys=True))


def load_labeled(directory, stem: str) -> LabeledSet:
    directory = Path(directory)
    meta = json.loads((directory / f"{stem}_meta.json").read_text())
    arrays = {}
    for name in ("positive", "negative"):
        with (directory / f"{stem}_{name}.csv").open() as fh:
            reader = csv.reader(fh)
            next(reader)
            arrays[name] = np.asarray([[float(v) for v in row] for row in reader])
    return LabeledSet(arrays["positive"], arrays["negative"], meta["alpha"],
                      meta["raw_positive"], meta["raw_negative"])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def classifier_train_config(iterations: int = 20_000, batch_size: int = 8192,
                            learning_rate: float = 3e-3, seed: int = 0,
                            **kw) -> TrainConfig:
    """Classifier defaults; same noise-level sampling as score training."""
    return TrainConfig(iterations=iterations, batch_size=batch_size,
                       learning_rate=learning_rate, seed=seed, **kw)


def fit_classifier(labeled: LabeledSet, schedule: NoiseSchedule,
                   config: TrainConfig, hidden: int = 256, t_dim: int = 128,
                   sigma_data: float = 0.5, alpha_override: float | None = None,
                   val_fraction: float = 0.1, on_log=None) -> TimeClassifier:
    """Minimize the importance-weighted loss; keep the best validation state.

    ``alpha_override`` forces the prior (0.5 reproduces the no-correction
    ablation) while leaving the recorded prior untouched.
    """
    alpha = labeled.alpha if alpha_override is None else alpha_override
    if not (0.0 < alpha < 1.0):
        raise DegeneratePriorError(f"alpha must be in (0,1), got {alpha}")
    pos, neg = labeled.positive, labeled.negative
    n = pos.shape[0]
    n_val = max(1, int(round(val_fraction * n))) if config.iterations > 0 else 0
    if n_val >= n:
        n_val = 0
    pos_tr, pos_val = pos[:n - n_val], pos[n - n_val:]
    neg_tr, neg_val = neg[:n - n_val], neg[n - n_val:]

    ss = np.random.SeedSequence(config.seed)
    init_ss, batch_ss, noise_ss, val_ss = ss.spawn(4)
    clf = new_classifier(pos.shape[1], schedule, hidden=hidden, t_dim=t_dim,
                         seed=int(init_ss.generate_state(1)[0]), sigma_data=sigma_data)
    if config.iterations == 0:
        return clf
    opt = nets.AdamState.fresh(clf.params, lr=config.learning_rate)
    batch_rng = np.random.default_rng(batch_ss)
    noise_rng = np.random.default_rng(noise_ss)

    x_all = np.concatenate([pos_tr, neg_tr], axis=0)
    y_all = np.concatenate([np.ones(pos_tr.shape[0]), np.zeros(neg_tr.shape[0])])
    # pooled-batch weights that keep the minibatch loss an unbiased
    # estimate of the balanced importance-weighted objective
    w_all = np.where(y_all == 1, 2.0 * alpha, 2.0 * (1.0 - alpha))

    val_seed = int(val_ss.generate_state(1)[0])
    best_val, best_params = np.inf, clf.params

    def validate(c):
        if n_val == 0:
            return np.nan
        return is_loss(alpha, pos_val, neg_val, c,
                       np.random.default_rng(val_seed), config, draws=4)

    for it in range(1, config.iterations + 1):
        idx = batch_rng.integers(0, x_all.shape[0], size=min(config.batch_size, x_all.shape[0]))
        xb, yb, wb = x_all[idx], y_all[idx], w_all[idx]
        sig = draw_sigmas(config, schedule, noise_rng, xb.shape[0])
        x_t = forward_sample(xb, sig, noise_rng.standard_normal(xb.shape))
        c_in = 1.0 / np.sqrt(sig ** 2 + sigma_data ** 2)
        emb = nets.sinusoidal_embed(0.25 * np.log(sig), t_dim)

        def head(zmat, yb=yb, wb=wb):
            z = zmat[:, 0]
            term = np.where(yb == 1, _softplus(-z), _softplus(z))
            loss = float(np.mean(wb * term))
            dz = np.where(yb == 1, -_expit(-z), _expit(z))
            return loss, (wb * dz / z.shape[0])[:, None]

        loss, grads, _ = nets.net_grad(clf.params, c_in[:, None] * x_t, emb, head)
        opt, params = nets.adam_step(opt, clf.params, grads)
        clf = replace(clf, params=params)
        if it % config.val_cadence == 0 or it == config.iterations:
            val = validate(clf)
            if n_val == 0 or val < best_val:
                best_val, best_params = val, clf.params
            if on_log is not None:
                on_log({"iteration": it, "train_loss": loss, "val_is_loss": val})
    return replace(clf, params=best_params)


def train_classifier(generator, oracle, n_per_class: int, config: TrainConfig,
                     budget: int | None = None, seed: int = 0,
                     sample_steps: int | None = None, hidden: int = 256,
                     t_dim: int = 128, sigma_data: float = 0.5,
                     alpha_override: float | None = None,
                     on_log=None) -> tuple[TimeClassifier, float]:
    """Full guidance-classifier stage: sample, label, balance, fit.

    ``generator`` must expose ``sample(n, seed, steps)`` and ``schedule``.
    """
    budget = 20 * n_per_class if budget is None else budget
    labeled = collect_labeled(
        lambda n, s: generator.sample(n, seed=s, steps=sample_steps),
        oracle, n_per_class, budget, seed=seed)
    clf = fit_classifier(labeled, generator.schedule, config, hidden=hidden,
                         t_dim=t_dim, sigma_data=sigma_data,
                         alpha_override=alpha_override, on_log=on_log)
    return clf, labeled.alpha


# ---------------------------------------------------------------------------
# Guided models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GuidedModel:
    """Baseline score model plus an ordered stack of guidance terms."""

    baseline: ScoreModel
    stack: tuple = ()

    @property
    def schedule(self) -> NoiseSchedule:
        return self.baseline.schedule

    @property
    def sigma_data(self) -> float:
        return self.baseline.sigma_data

    def with_classifier(self, clf) -> "GuidedModel":
        return replace(self, stack=self.stack + (clf,))

    def score_fn(self):
        return lambda x, sigma: guided_score(self, x, sigma)

    def sample(self, n: int, seed: int = 0, steps: int | None = None,
               chunk: int = 8192) -> np.ndarray:
        return sample_reverse(self.score_fn(), n, self.baseline.params.d_in,
                              self.schedule, steps=steps, seed=seed, chunk=chunk)


def guided_score(model: GuidedModel, x: np.ndarray, sigma) -> np.ndarray:
    """Baseline score plus every stacked log-gradient, in stack order."""
    total = score(model.baseline, x, sigma)
    for clf in model.stack:
        total = total + clf.grad_log(x, sigma)
    return total
