"""Command-line surface: data generation, training, guided refinement runs,
distillation, evaluation, analytic verification, and SVG reports.

Every command prints one final JSON summary line on stdout and exits nonzero
on contract violations; progress goes to stderr.  GENNEG_THREADS caps BLAS
worker threads.
"""

from __future__ import annotations

import os

if os.environ.get("GENNEG_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["GENNEG_THREADS"])

import argparse
import contextlib
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True), flush=True)


@contextlib.contextmanager
def _locked(directory: Path):
    """Guard an output directory against concurrent writers."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"output directory {directory} is locked by another run "
                           f"(remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _load_experiment(args) -> dict:
    """Merge the config file (if any) with command-line overrides."""
    from .pipeline import RunConfig

    raw = {"oracle": {"kind": "checkerboard", "extent": 2.0, "cell": 1.0},
           "dataset": {"n_train": 1000, "n_val": 1000, "seed": 0},
           "run": {}}
    if getattr(args, "config", None):
        text = Path(args.config).read_text()
        loaded = json.loads(text)
        for key in raw:
            if key in loaded:
                if isinstance(raw[key], dict):
                    raw[key].update(loaded[key])
                else:
                    raw[key] = loaded[key]
    run_kwargs = dict(raw["run"])
    if getattr(args, "seed", None) is not None:
        run_kwargs["master_seed"] = args.seed
        raw["dataset"]["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        run_kwargs["max_iterations"] = args.iterations
    if getattr(args, "samples", None) is not None:
        run_kwargs["eval_samples"] = args.samples
    if getattr(args, "steps", None) is not None:
        run_kwargs["eval_steps"] = args.steps
        run_kwargs["sample_steps"] = args.steps
    if getattr(args, "no_is", False):
        run_kwargs["use_is"] = False
    if getattr(args, "distill", False):
        run_kwargs["distill"] = True
    config = RunConfig.from_json(json.dumps(_fill_run_defaults(run_kwargs)))
    return {"oracle": raw["oracle"], "dataset": raw["dataset"], "run": config}


def _fill_run_defaults(partial: dict) -> dict:
    from .pipeline import RunConfig

    base = json.loads(RunConfig().to_json())
    for key, value in partial.items():
        if key in ("schedule", "baseline", "classifier", "distill_train"):
            base[key].update(value)
        else:
            base[key] = value
    return base


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    from . import oracles
    from .datasets import Dataset, save_dataset

    exp = _load_experiment(args)
    spec = exp["oracle"]
    if spec.get("kind") != "checkerboard":
        raise ValueError("dataset generation is defined for the checkerboard oracle")
    n_train = exp["dataset"]["n_train"] if args.samples is None else args.samples
    n_val = exp["dataset"].get("n_val", n_train)
    if n_train < 1 or n_val < 1:
        raise ValueError("dataset sizes must be >= 1")
    seed = exp["dataset"]["seed"]
    board = oracles.from_dict(spec)
    out = Path(args.out)
    with _locked(out):
        train = oracles.make_checkerboard_dataset(n_train, seed=seed, board=board)
        val = oracles.make_checkerboard_dataset(n_val, seed=seed + 1, board=board)
        ds = Dataset(train=train, val=val,
                     meta={"seed": seed, "n_train": n_train, "n_val": n_val,
                           "oracle": spec})
        save_dataset(out, ds)
        (out / "oracle.json").write_text(oracles.to_json(board))
    return {"ok": True, "out": str(out), "n_train": n_train, "n_val": n_val,
            "seed": seed}


def cmd_train_baseline(args) -> dict:
    from . import nets
    from .datasets import load_dataset
    from .diffusion import train_baseline
    from .pipeline import phase_seed

    exp = _load_experiment(args)
    config = exp["run"]
    dataset = load_dataset(args.data)
    out = Path(args.out)
    rows = []
    with _locked(out):
        base_config = replace(config.baseline,
                              seed=phase_seed(config.master_seed, 0, "baseline"))
        if args.iterations is not None:
            base_config = replace(base_config, iterations=args.iterations)
        model = train_baseline(dataset.train, dataset.val, config.schedule,
                               base_config, hidden=config.hidden,
                               t_dim=config.t_dim, sigma_data=config.sigma_data,
                               on_log=lambda row: (rows.append(row),
                                                   _log(f"baseline {row}"))[0])
        ckpt = out / "baseline.npz"
        nets.save_checkpoint(ckpt, model.params,
                             extra={"kind": "score_model",
                                    "sigma_data": config.sigma_data})
        (out / "config.json").write_text(config.to_json())
        with (out / "baseline_training_log.json").open("w") as fh:
            json.dump(rows, fh, indent=2)
    best = max((r["val_relbo"] for r in rows), default=None)
    return {"ok": True, "checkpoint": str(ckpt), "iterations": base_config.iterations,
            "best_val_relbo": best}


def cmd_genneg_run(args) -> dict:
    from . import oracles
    from .datasets import load_dataset
    from .pipeline import run

    exp = _load_experiment(args)
    config = exp["run"]
    dataset = load_dataset(args.data)
    oracle_file = Path(args.data) / "oracle.json"
    oracle = oracles.from_json(oracle_file.read_text()) if oracle_file.exists() \
        else oracles.from_dict(exp["oracle"])
    out = Path(args.out)
    with _locked(out):
        _, records = run(dataset, oracle, config, out_dir=out, resume=True,
                         on_log=lambda row: _log(f"train {row}"))
    return {"ok": True, "out": str(out),
            "iterations": len(records) - 1,
            "records": [asdict(r) for r in records]}


def cmd_distill(args) -> dict:
    from . import nets
    from .datasets import load_dataset
    from .pipeline import distill, evaluate_model, load_run, phase_seed

    dataset = load_dataset(args.data)
    run_dir = Path(args.run_dir)
    config, records, states = load_run(run_dir)
    if len(states) < 2:
        raise ValueError(f"{run_dir} holds no completed iterations to distill")
    teacher = states[-1]
    dist_config = replace(config.distill_train,
                          seed=phase_seed(config.master_seed, len(states) - 1, "distill"))
    if args.iterations is not None:
        dist_config = replace(dist_config, iterations=args.iterations)
    out = Path(args.out) if args.out else run_dir
    from . import oracles
    oracle_file = Path(args.data) / "oracle.json"
    oracle = oracles.from_json(oracle_file.read_text())
    with _locked(out):
        student = distill(teacher, dataset.train, dataset.val, dist_config,
                          on_log=lambda row: _log(f"distill {row}"))
        ckpt = out / "student.npz"
        nets.save_checkpoint(ckpt, student.params,
                             extra={"kind": "score_model",
                                    "sigma_data": config.sigma_data})
        from .guidance import GuidedModel
        student_state = GuidedModel(baseline=student)
        side_by_side = {}
        for name, state in (("teacher", teacher), ("student", student_state)):
            side_by_side[name] = evaluate_model(
                state.score_fn(),
                lambda n, s, st, _m=state: _m.sample(n, seed=s, steps=st),
                oracle, dataset.val, config, len(states) - 1)
    return {"ok": True, "checkpoint": str(ckpt), "metrics": side_by_side,
            "stack_depth": len(teacher.stack)}


def cmd_eval(args) -> dict:
    from . import nets, oracles
    from .datasets import load_dataset
    from .diffusion import NoiseSchedule, ScoreModel
    from .guidance import GuidedModel
    from .pipeline import RunConfig, evaluate_model, load_run

    dataset = load_dataset(args.data)
    oracle_file = Path(args.data) / "oracle.json"
    oracle = oracles.from_json(oracle_file.read_text())
    if args.run_dir:
        config, _, states = load_run(args.run_dir)
        state = states[-1]
    elif args.checkpoint:
        params, meta = nets.load_checkpoint(args.checkpoint)
        config = RunConfig()
        state = GuidedModel(baseline=ScoreModel(
            params, NoiseSchedule(), sigma_data=meta.get("sigma_data", 0.5)))
    else:
        raise ValueError("eval needs --run-dir or --checkpoint")
    config = replace(config,
                     eval_samples=args.samples or config.eval_samples,
                     eval_steps=args.steps or config.eval_steps,
                     master_seed=args.seed if args.seed is not None else config.master_seed)
    metrics = evaluate_model(
        state.score_fn(),
        lambda n, s, st: state.sample(n, seed=s, steps=st),
        oracle, dataset.val, config, iteration=len(getattr(state, "stack", ())))
    return {"ok": True, "samples": config.eval_samples, "steps": config.eval_steps,
            **metrics}


def cmd_verify_analytic(args) -> dict:
    from .analytic import (HALF_LINE, LAB_MIXTURE, verify_corollary1,
                           verify_theorem1, write_report)

    theorem = verify_theorem1(LAB_MIXTURE, HALF_LINE)
    sampler_kwargs = {"n": args.samples or 100_000, "steps": args.steps or 200,
                      "seed": args.seed or 0}
    corollary = verify_corollary1(LAB_MIXTURE, HALF_LINE,
                                  sampler_kwargs=sampler_kwargs)
    report = {"theorem1": theorem, "corollary1": corollary,
              "passed": theorem["passed"] and corollary["passed"]}
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_report(out, report)
    if not report["passed"]:
        raise RuntimeError("analytic verification failed; see report")
    return {"ok": True, "passed": True,
            "out": str(args.out) if args.out else None,
            "checks": [c["name"] for block in (theorem, corollary)
                       for c in block["checks"]]}


def cmd_plot(args) -> dict:
    from . import oracles
    from .oracles import evaluate
    from .pipeline import load_run
    from .plots import line_chart_svg, scatter_svg

    run_dir = Path(args.run_dir)
    config, records, states = load_run(run_dir)
    if not records:
        raise ValueError(f"{run_dir} holds no records to plot")
    oracle_file = run_dir / "oracle.json"
    oracle = oracles.from_json(oracle_file.read_text()) if oracle_file.exists() \
        else oracles.Checkerboard()
    out_files = []
    xs = [r.iteration for r in records]
    line_chart_svg(run_dir / "infraction_vs_iteration.svg", xs,
                   {"infraction": ([r.infraction for r in records],
                                   [r.infraction_stderr for r in records], "#8b4513")},
                   title="infraction rate by iteration", ylabel="infraction")
    line_chart_svg(run_dir / "elbo_vs_iteration.svg", xs,
                   {"uniform-weight bound": ([r.relbo for r in records],
                                             [r.relbo_stderr for r in records], "#3a6ea5"),
                    "likelihood bound": ([r.elbo for r in records],
                                         [r.elbo_stderr for r in records], "#2a9d8f")},
                   title="validation bounds by iteration", ylabel="nats")
    out_files += ["infraction_vs_iteration.svg", "elbo_vs_iteration.svg"]
    n = args.samples or 2000
    for record, state in zip(records, states):
        pts = state.sample(n, seed=7000 + record.iteration,
                           steps=config.eval_steps)
        bad = evaluate(oracle, pts) == 0
        name = f"samples_iteration_{record.iteration:03d}.svg"
        scatter_svg(run_dir / name, pts, bad,
                    title=f"iteration {record.iteration} samples")
        out_files.append(name)
    return {"ok": True, "out": str(run_dir), "files": out_files}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genneg",
        description="oracle-assisted classifier guidance for diffusion models")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--samples", type=int, help="sample-count override")
        p.add_argument("--steps", type=int, help="sampler step-count override")

    p = sub.add_parser("gen-data", help="write train/validation datasets")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-baseline", help="train the unguided model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.set_defaults(fn=cmd_train_baseline)

    p = sub.add_parser("genneg-run", help="run iterative guided refinement")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--no-is", action="store_true", dest="no_is",
                   help="ablation: train classifiers without the prior correction")
    p.add_argument("--distill", action="store_true",
                   help="replace the stack with a distilled student each iteration")
    p.set_defaults(fn=cmd_genneg_run)

    p = sub.add_parser("distill", help="distill a finished run into one network")
    common(p)
    p.add_argument("--run-dir", required=True, dest="run_dir")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--iterations", type=int)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint or run")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--checkpoint")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("verify-analytic", help="run the analytic identity suite")
    common(p)
    p.add_argument("--out", help="path for the JSON report")
    p.set_defaults(fn=cmd_verify_analytic)

    p = sub.add_parser("plot", help="emit SVG panels for a finished run")
    common(p)
    p.add_argument("--run-dir", required=True, dest="run_dir")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = args.fn(args)
    except Exception as exc:  # contract violations exit nonzero with a summary
        _emit({"ok": False, "error": type(exc).__name__, "message": str(exc)})
        return 1
    _emit(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
