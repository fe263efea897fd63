"""Iterative oracle-guided refinement: sample, label, balance, train, stack,
and optionally distill the stack back into a single score network.

A run directory holds a config snapshot, one subdirectory per iteration with
checkpoints and labeled data, a metrics CSV, and a manifest of content
hashes; runs resume from any completed iteration.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import guidance, nets
from .datasets import Dataset
from .diffusion import (NoiseSchedule, ScoreModel, TrainConfig, draw_sigmas,
                        elbo, forward_sample, precondition_coeffs,
                        sample_reverse, score, train_baseline)
from .errors import ConfigError, NumericsError
from .guidance import GuidedModel, LabeledSet, TimeClassifier
from .oracles import infraction_rate

_PHASES = {"baseline": 0, "collect": 1, "classifier": 2, "eval_inf": 3,
           "eval_elbo": 4, "distill": 5, "dataset": 6}


def phase_seed(master_seed: int, iteration: int, phase: str) -> int:
    ss = np.random.SeedSequence((int(master_seed), int(iteration), _PHASES[phase]))
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class RunConfig:
    """Everything a full run needs; round-trips through JSON."""

    n_per_class: int = 50_000
    max_iterations: int = 5
    budget_per_iteration: int | None = None  # default 20x per-class target
    distill: bool = False
    use_is: bool = True
    master_seed: int = 0
    sample_steps: int = 100
    sampling_batch: int = 8192
    eval_samples: int = 100_000
    eval_steps: int = 100
    eval_elbo_draws: int = 64
    hidden: int = 256
    t_dim: int = 128
    sigma_data: float = 0.5
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    baseline: TrainConfig = field(default_factory=TrainConfig)
    classifier: TrainConfig = field(default_factory=lambda: guidance.classifier_train_config())
    distill_train: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=250_000))

    def __post_init__(self):
        if self.n_per_class < 1 or self.max_iterations < 0:
            raise ConfigError("n_per_class must be >= 1 and max_iterations >= 0")
        if self.budget_per_iteration is not None \
                and self.budget_per_iteration < 2 * self.n_per_class:
            raise ConfigError("budget must cover at least 2 * n_per_class samples")

    @property
    def budget(self) -> int:
        return self.budget_per_iteration or 20 * self.n_per_class

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        raw = json.loads(text)
        raw["schedule"] = NoiseSchedule(**raw["schedule"])
        for key in ("baseline", "classifier", "distill_train"):
            raw[key] = TrainConfig(**raw[key])
        return cls(**raw)


@dataclass(frozen=True)
class IterationRecord:
    """Metrics and provenance for one refinement iteration (0 = baseline)."""

    iteration: int
    raw_positive: int
    raw_negative: int
    alpha: float | None
    infraction: float
    infraction_stderr: float
    relbo: float
    relbo_stderr: float
    elbo: float
    elbo_stderr: float
    samples_used: int
    wall_seconds: float
    checkpoint: str | None = None
    checkpoint_hash: str | None = None
    is_corrected: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "IterationRecord":
        return cls(**json.loads(text))


CSV_FIELDS = ["iteration", "alpha", "infraction", "infraction_stderr",
              "relbo", "relbo_stderr", "elbo", "elbo_stderr", "samples_used",
              "wall_seconds", "checkpoint", "checkpoint_hash", "is_corrected",
              "raw_positive", "raw_negative"]


def file_hash(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Labeled-set generation and evaluation
# ---------------------------------------------------------------------------

def generate_labeled(model: GuidedModel, oracle, n_per_class: int, budget: int,
                     seed: int = 0, steps: int | None = None,
                     batch: int = 8192) -> LabeledSet:
    """Sample the guided model until both classes reach the target size."""
    return guidance.collect_labeled(
        lambda n, s: model.sample(n, seed=s, steps=steps, chunk=batch),
        oracle, n_per_class, budget, seed=seed, batch=batch)


def evaluate_model(score_fn, sample_fn, oracle, val_x, config: RunConfig,
                   iteration: int) -> dict:
    """Infraction on fresh samples plus both bound variants on validation."""
    samples = sample_fn(config.eval_samples,
                        phase_seed(config.master_seed, iteration, "eval_inf"),
                        config.eval_steps)
    inf, inf_se = infraction_rate(samples, oracle)
    elbo_seed = phase_seed(config.master_seed, iteration, "eval_elbo")
    relbo, relbo_se = elbo(score_fn, val_x, config.schedule, weighting="uniform",
                           mc_draws=config.eval_elbo_draws, seed=elbo_seed)
    like, like_se = elbo(score_fn, val_x, config.schedule, weighting="likelihood",
                         mc_draws=config.eval_elbo_draws, seed=elbo_seed + 1)
    return {"infraction": inf, "infraction_stderr": inf_se,
            "relbo": relbo, "relbo_stderr": relbo_se,
            "elbo": like, "elbo_stderr": like_se}


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------

def distill_loss(teacher_score_fn, student: ScoreModel, x0: np.ndarray, rng,
                 config: TrainConfig | None = None, draws: int = 1) -> float:
    """Weighted squared gap between teacher and student scores on noised data."""
    from .diffusion import score_residual_weight

    config = config or TrainConfig()
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    rep = np.repeat(x0, draws, axis=0)
    sig = draw_sigmas(config, student.schedule, rng, rep.shape[0])
    x_t = forward_sample(rep, sig, rng.standard_normal(rep.shape))
    gap = np.asarray(teacher_score_fn(x_t, sig)) - score(student, x_t, sig)
    w = score_residual_weight(sig, student.sigma_data)
    return float(np.mean(w * np.sum(gap ** 2, axis=1)))


def distill(teacher: GuidedModel, train_x: np.ndarray, val_x: np.ndarray,
            config: TrainConfig, on_log=None) -> ScoreModel:
    """Regress a single student network onto the guided stack's score.

    The student starts from the teacher's baseline parameters and matches the
    teacher's implied denoiser on noised copies of the true training data.
    """
    train_x = np.atleast_2d(np.asarray(train_x, dtype=np.float64))
    student = replace(teacher.baseline)
    if config.iterations == 0:
        return student
    teacher_fn = teacher.score_fn()
    opt = nets.AdamState.fresh(student.params, lr=config.learning_rate)
    ss = np.random.SeedSequence(config.seed)
    batch_ss, noise_ss, val_ss = ss.spawn(3)
    batch_rng = np.random.default_rng(batch_ss)
    noise_rng = np.random.default_rng(noise_ss)
    val_seed = int(val_ss.generate_state(1)[0])
    full_batch = config.batch_size >= train_x.shape[0]

    best, best_params = np.inf, student.params
    for it in range(1, config.iterations + 1):
        if full_batch:
            batch = train_x
        else:
            idx = batch_rng.integers(0, train_x.shape[0], size=config.batch_size)
            batch = train_x[idx]
        sig = draw_sigmas(config, student.schedule, noise_rng, batch.shape[0])
        x_t = forward_sample(batch, sig, noise_rng.standard_normal(batch.shape))
        # the teacher's score pins the denoiser target at each noised point
        target = x_t + (sig ** 2)[:, None] * np.asarray(teacher_fn(x_t, sig))
        from .diffusion import _denoiser_loss_head
        _, _, c_in, c_noise = precondition_coeffs(student, sig)
        emb = nets.sinusoidal_embed(c_noise, student.params.t_dim)
        head = _denoiser_loss_head(x_t, target, sig, student)
        try:
            loss, grads, _ = nets.net_grad(student.params, c_in[:, None] * x_t, emb, head)
            opt, params = nets.adam_step(opt, student.params, grads)
        except NumericsError as exc:
            raise NumericsError(f"distillation diverged at iteration {it}: {exc}") from exc
        student = replace(student, params=params)
        if it % config.val_cadence == 0 or it == config.iterations:
            val = distill_loss(teacher_fn, student, val_x,
                               np.random.default_rng(val_seed), config,
                               draws=max(2, config.val_draws // 2))
            if val < best:
                best, best_params = val, student.params
            if on_log is not None:
                on_log({"iteration": it, "train_loss": loss, "val_distill_loss": val})
    return replace(student, params=best_params)


# ---------------------------------------------------------------------------
# One refinement iteration
# ---------------------------------------------------------------------------

def genneg_iterate(state: GuidedModel, dataset: Dataset, oracle,
                   config: RunConfig, iteration: int,
                   out_dir: Path | None = None,
                   on_log=None) -> tuple[GuidedModel, IterationRecord]:
    """Run one sample/label/train/stack (or distill) iteration."""
    t0 = time.perf_counter()
    labeled = generate_labeled(
        state, oracle, config.n_per_class, config.budget,
        seed=phase_seed(config.master_seed, iteration, "collect"),
        steps=config.sample_steps, batch=config.sampling_batch)
    clf_config = replace(config.classifier,
                         seed=phase_seed(config.master_seed, iteration, "classifier"))
    clf = guidance.fit_classifier(
        labeled, config.schedule, clf_config, hidden=config.hidden,
        t_dim=config.t_dim, sigma_data=config.sigma_data,
        alpha_override=None if config.use_is else 0.5, on_log=on_log)
    stacked = state.with_classifier(clf)

    if config.distill:
        dist_config = replace(config.distill_train,
                              seed=phase_seed(config.master_seed, iteration, "distill"))
        student = distill(stacked, dataset.train, dataset.val, dist_config,
                          on_log=on_log)
        new_state = GuidedModel(baseline=student, stack=())
    else:
        new_state = stacked

    metrics = evaluate_model(
        new_state.score_fn(),
        lambda n, s, st: new_state.sample(n, seed=s, steps=st, chunk=config.sampling_batch),
        oracle, dataset.val, config, iteration)

    checkpoint = checkpoint_hash = None
    if out_dir is not None:
        it_dir = Path(out_dir) / f"iteration_{iteration:03d}"
        it_dir.mkdir(parents=True, exist_ok=True)
        guidance.save_labeled(it_dir, "labeled", labeled)
        if config.distill:
            ckpt = it_dir / "student.npz"
            nets.save_checkpoint(ckpt, new_state.baseline.params,
                                 extra={"kind": "score_model",
                                        "sigma_data": config.sigma_data})
        else:
            ckpt = it_dir / "classifier.npz"
            nets.save_checkpoint(ckpt, clf.params,
                                 extra={"kind": "classifier",
                                        "sigma_data": config.sigma_data})
        checkpoint = str(ckpt.relative_to(out_dir))
        checkpoint_hash = file_hash(ckpt)

    record = IterationRecord(
        iteration=iteration, raw_positive=labeled.raw_positive,
        raw_negative=labeled.raw_negative, alpha=labeled.alpha,
        samples_used=labeled.raw_positive + labeled.raw_negative,
        wall_seconds=time.perf_counter() - t0,
        checkpoint=checkpoint, checkpoint_hash=checkpoint_hash,
        is_corrected=config.use_is, **metrics)
    if out_dir is not None:
        (Path(out_dir) / f"iteration_{iteration:03d}" / "record.json").write_text(
            record.to_json())
    return new_state, record


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------

def _write_metrics_csv(path: Path, records: list[IterationRecord]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for rec in records:
            row = asdict(rec)
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in CSV_FIELDS})


def _write_manifest(out_dir: Path) -> None:
    files = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(out_dir))] = file_hash(p)
    (out_dir / "manifest.json").write_text(
        json.dumps({"files": files}, indent=2, sort_keys=True))


def _baseline_model(dataset: Dataset, config: RunConfig, out_dir: Path | None,
                    on_log=None) -> ScoreModel:
    ckpt = None if out_dir is None else Path(out_dir) / "baseline.npz"
    if ckpt is not None and ckpt.exists():
        params, meta = nets.load_checkpoint(ckpt)
        return ScoreModel(params, config.schedule,
                          sigma_data=meta.get("sigma_data", config.sigma_data))
    base_config = replace(config.baseline,
                          seed=phase_seed(config.master_seed, 0, "baseline"))
    model = train_baseline(dataset.train, dataset.val, config.schedule,
                           base_config, hidden=config.hidden, t_dim=config.t_dim,
                           sigma_data=config.sigma_data, on_log=on_log)
    if ckpt is not None:
        nets.save_checkpoint(ckpt, model.params,
                             extra={"kind": "score_model",
                                    "sigma_data": config.sigma_data})
    return model


def load_run(out_dir) -> tuple[RunConfig, list[IterationRecord], list[GuidedModel]]:
    """Reconstruct a run's config, records, and per-iteration models.

    The returned models list starts with the baseline (index 0) and includes
    one model per completed iteration, stacked or distilled as recorded.
    """
    out_path = Path(out_dir)
    snap = out_path / "config.json"
    if not snap.exists():
        raise ConfigError(f"{out_dir} is not a run directory (missing config.json)")
    config = RunConfig.from_json(snap.read_text())
    params, meta = nets.load_checkpoint(out_path / "baseline.npz")
    state = GuidedModel(baseline=ScoreModel(
        params, config.schedule, sigma_data=meta.get("sigma_data", config.sigma_data)))
    records, states = [], [state]
    base_rec = out_path / "baseline_record.json"
    if base_rec.exists():
        records.append(IterationRecord.from_json(base_rec.read_text()))
    i = 1
    while True:
        rec_file = out_path / f"iteration_{i:03d}" / "record.json"
        if not rec_file.exists():
            break
        record = IterationRecord.from_json(rec_file.read_text())
        params, meta = nets.load_checkpoint(out_path / record.checkpoint)
        if meta.get("kind") == "score_model":
            state = GuidedModel(baseline=ScoreModel(
                params, config.schedule, sigma_data=config.sigma_data))
        else:
            state = state.with_classifier(TimeClassifier(
                params, config.schedule, sigma_data=config.sigma_data))
        records.append(record)
        states.append(state)
        i += 1
    return config, records, states


_RESUME_FIELDS = ("n_per_class", "budget_per_iteration", "distill", "use_is",
                  "master_seed", "sample_steps", "hidden", "t_dim",
                  "sigma_data", "schedule", "baseline", "classifier",
                  "distill_train")


def _check_resume_compatible(config: RunConfig, snapshot: RunConfig) -> None:
    for name in _RESUME_FIELDS:
        if getattr(config, name) != getattr(snapshot, name):
            raise ConfigError(
                f"resume config mismatch on {name!r}: "
                f"{getattr(config, name)!r} != recorded {getattr(snapshot, name)!r}")


def run(dataset: Dataset, oracle, config: RunConfig,
        out_dir=None, resume: bool = False,
        on_log=None) -> tuple[GuidedModel, list[IterationRecord]]:
    """Train (or load) the baseline, then iterate refinement to completion.

    Artifacts are persisted per iteration before the run advances, so a
    subsequent ``resume=True`` call continues from the last finished
    iteration and reproduces the remaining records exactly.
    """
    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        snap = out_path / "config.json"
        if snap.exists() and resume:
            _check_resume_compatible(config, RunConfig.from_json(snap.read_text()))
        snap.write_text(config.to_json())

    baseline = _baseline_model(dataset, config, out_path, on_log=on_log)
    state = GuidedModel(baseline=baseline)

    records: list[IterationRecord] = []
    base_record_path = None if out_path is None else out_path / "baseline_record.json"
    if base_record_path is not None and resume and base_record_path.exists():
        records.append(IterationRecord.from_json(base_record_path.read_text()))
    else:
        metrics = evaluate_model(
            state.score_fn(),
            lambda n, s, st: state.sample(n, seed=s, steps=st, chunk=config.sampling_batch),
            oracle, dataset.val, config, 0)
        base_rec = IterationRecord(
            iteration=0, raw_positive=0, raw_negative=0, alpha=None,
            samples_used=0, wall_seconds=0.0,
            checkpoint="baseline.npz" if out_path is not None else None,
            checkpoint_hash=file_hash(out_path / "baseline.npz") if out_path is not None else None,
            is_corrected=config.use_is, **metrics)
        records.append(base_rec)
        if base_record_path is not None:
            base_record_path.write_text(base_rec.to_json())

    for i in range(1, config.max_iterations + 1):
        it_dir = None if out_path is None else out_path / f"iteration_{i:03d}"
        rec_file = None if it_dir is None else it_dir / "record.json"
        if resume and rec_file is not None and rec_file.exists():
            record = IterationRecord.from_json(rec_file.read_text())
            params, meta = nets.load_checkpoint(out_path / record.checkpoint)
            if meta.get("kind") == "score_model":
                state = GuidedModel(baseline=ScoreModel(
                    params, config.schedule, sigma_data=config.sigma_data))
            else:
                clf = TimeClassifier(params, config.schedule,
                                     sigma_data=config.sigma_data)
                state = state.with_classifier(clf)
            records.append(record)
            continue
        state, record = genneg_iterate(state, dataset, oracle, config, i,
                                       out_dir=out_path, on_log=on_log)
        records.append(record)
        if out_path is not None:
            _write_metrics_csv(out_path / "metrics.csv", records)
            _write_manifest(out_path)

    if out_path is not None:
        _write_metrics_csv(out_path / "metrics.csv", records)
        _write_manifest(out_path)
    return state, records
