"""Command-line entry point: generate, pretrain, evaluate, reproduce."""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import (
    FinetuneConfig,
    MetricsReport,
    evaluate_node_cls,
    finetune_age_regression,
    finetune_predict_next_visit,
    norm_groups,
    trajectory_norm_analysis,
)
from .models import MODES, LossWeights, ModelBundle, init_bundle, mode_for
from .odesolve import SolverConfig
from .report import GRID_ROWS, norm_rows, read_results, render_summary, report_rows, write_results
from .synthdata import (
    SPLITS,
    generate_cohort,
    make_pair_dataset,
    make_sequence_dataset,
    read_cohort,
    write_cohort,
)
from .training import EpochRecord, PretrainConfig, Pretrainer, TrainingDiverged

log = logging.getLogger("lsslnode")

TASKS = ("age", "next_visit", "norms", "node_cls")
COHORT_FILE = "cohort.jsonl"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mode: str = "LSSL"
    lambda_recon: float = 1.0
    lambda_dir: float = 1.0
    node: bool = False
    epochs: int = 60
    lr: float = 5e-4
    weight_decay: float = 1e-5
    batch_size: int = 64
    rtol: float = 1e-3
    atol: float = 1e-4
    n_subjects: int = 1000
    seed: int = 0
    out: str = "runs"
    finetune_epochs: int = 30
    finetune_lr: float = 1e-3
    finetune_weight_decay: float = 1e-4
    norm_group_size: int = 100
    jobs: int = 1

    def validate(self) -> None:
        if self.mode != "scratch":
            if self.mode not in MODES:
                raise ConfigError(f"unknown mode {self.mode!r}")
            try:
                weights = LossWeights(self.lambda_recon, self.lambda_dir)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            implied = mode_for(weights, self.node)
            if implied != self.mode:
                raise ConfigError(
                    f"mode {self.mode} conflicts with lambda_recon={self.lambda_recon}, "
                    f"lambda_dir={self.lambda_dir}, node={self.node} (implies {implied})"
                )
        for name in ("epochs", "batch_size", "n_subjects", "finetune_epochs", "jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.norm_group_size < 2:
            raise ConfigError("norm_group_size must be at least 2")
        for name in ("lr", "rtol", "atol", "finetune_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def for_mode(self, mode: str) -> ExperimentConfig:
        if mode == "scratch":
            return replace(self, mode="scratch", lambda_recon=0.0, lambda_dir=0.0, node=False)
        weights, node = MODES[mode]
        return replace(self, mode=mode, lambda_recon=weights.recon, lambda_dir=weights.direction, node=node)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_recon, self.lambda_dir)

    def solver(self) -> SolverConfig:
        return SolverConfig(rtol=self.rtol, atol=self.atol)

    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(epochs=self.epochs, lr=self.lr, weight_decay=self.weight_decay,
                              batch_size=self.batch_size, seed=self.seed, solver=self.solver())

    def finetune(self) -> FinetuneConfig:
        return FinetuneConfig(epochs=self.finetune_epochs, lr=self.finetune_lr,
                              weight_decay=self.finetune_weight_decay, batch_size=self.batch_size,
                              seed=self.seed, solver=self.solver())

    def config_hash(self) -> str:
        echo = {k: v for k, v in asdict(self).items() if k not in ("out", "jobs")}
        return hashlib.sha256(json.dumps(echo, sort_keys=True).encode()).hexdigest()[:12]


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw.strip()


def load_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` lines; ``#`` comments allowed; keys may use dashes."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string("[config]\n" + Path(path).read_text())
    out = {}
    for key, raw in parser["config"].items():
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r} in {path}")
        out[key] = _coerce(key, raw)
    return out


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the config file, then explicit flags. Mode and lambdas are reconciled."""
    values: dict = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for f in fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    mode = values.get("mode")
    lam = {k: values[k] for k in ("lambda_recon", "lambda_dir", "node") if k in values}
    if mode is None:
        if lam:
            base = ExperimentConfig()
            weights = LossWeights(lam.get("lambda_recon", base.lambda_recon), lam.get("lambda_dir", base.lambda_dir))
            values["mode"] = mode_for(weights, lam.get("node", False))
    elif mode in MODES:
        weights, node = MODES[mode]
        values.setdefault("lambda_recon", weights.recon)
        values.setdefault("lambda_dir", weights.direction)
        values.setdefault("node", node)
    cfg = ExperimentConfig(**values)
    if cfg.mode == "scratch":
        cfg = cfg.for_mode("scratch")
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cohort = generate_cohort(cfg.n_subjects, cfg.seed)
    path = out / COHORT_FILE
    write_cohort(cohort, path)
    splits = {split: [s.subject_id for s in cohort.by_split(split)] for split in SPLITS}
    (out / "splits.json").write_text(json.dumps(splits, sort_keys=True) + "\n")
    pairs = make_pair_dataset(cohort)
    manifest = {
        "seed": cfg.seed,
        "n_subjects": len(cohort.subjects),
        "subjects_per_split": {k: len(v) for k, v in splits.items()},
        "n_visits": sum(len(s.visits) for s in cohort.subjects),
        "n_pairs": len(pairs),
        "pairs_per_split": {k: len(pairs.split(k)) for k in SPLITS},
        "n_sequences": len(make_sequence_dataset(cohort)),
        "speed_counts": {k: sum(s.speed == k for s in cohort.subjects) for k in ("fast", "slow")},
        "params": asdict(cohort.params),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s (%d subjects, %d pairs)", path, manifest["n_subjects"], manifest["n_pairs"])
    return path


def _checkpoint_header(cfg: ExperimentConfig, trainer: Pretrainer, extra: dict | None = None) -> dict:
    head = {"mode": cfg.mode, "config": asdict(cfg), "config_hash": cfg.config_hash()}
    head.update(trainer.state_header())
    head.update(extra or {})
    return head


def _load_bundle(path: str | Path, seed: int | None = None) -> tuple[ModelBundle, dict]:
    tensors, meta = load_checkpoint(path)
    cfg = meta["config"]
    bundle = init_bundle(meta["mode"], cfg["seed"] if seed is None else seed,
                         LossWeights(cfg["lambda_recon"], cfg["lambda_dir"]))
    for name, p in bundle.named_parameters():
        key = "model." + name
        if key not in tensors:
            raise ValueError(f"checkpoint {path} lacks tensor {key}")
        if tensors[key].shape != p.data.shape:
            raise ValueError(f"checkpoint tensor {key} has shape {tensors[key].shape}, expected {p.data.shape}")
        p.data[...] = tensors[key]
    return bundle, meta


LOG_FIELDS = tuple(f.name for f in fields(EpochRecord))


def cmd_pretrain(cfg: ExperimentConfig, cohort_path: str | Path | None = None, resume: bool = False) -> dict:
    if cfg.mode == "scratch":
        raise ConfigError("the from-scratch baseline has nothing to pretrain")
    out = Path(cfg.out)
    cohort_path = Path(cohort_path) if cohort_path else out / COHORT_FILE
    if not cohort_path.exists():
        raise FileNotFoundError(f"cohort file {cohort_path} not found; run `generate` first")
    run_dir = out / "pretrain" / cfg.mode
    run_dir.mkdir(parents=True, exist_ok=True)
    pairs = make_pair_dataset(read_cohort(cohort_path))
    bundle = init_bundle(cfg.mode, cfg.seed, cfg.weights)
    trainer = Pretrainer(bundle, pairs, cfg.pretrain())
    final_path, best_path, log_path = run_dir / "final.ckpt", run_dir / "best.ckpt", run_dir / "train_log.csv"
    best = float("inf")
    if resume and final_path.exists():
        tensors, meta = load_checkpoint(final_path)
        if meta.get("config_hash") != cfg.config_hash():
            raise ConfigError(f"{final_path} was written by a different configuration")
        trainer.load_state(tensors, meta)
        best = meta.get("best_val", best)
        with log_path.open(newline="") as fh:
            kept = [r for r in csv.DictReader(fh) if int(r["epoch"]) < trainer.epoch]
        with log_path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, LOG_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(kept)
    else:
        with log_path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_FIELDS)
    while trainer.epoch < cfg.epochs:
        try:
            rec = trainer.run_epoch()
        except TrainingDiverged:
            log.error("%s diverged at epoch %d; last good checkpoint kept at %s", cfg.mode, trainer.epoch, final_path)
            raise
        with log_path.open("a", newline="") as fh:
            csv.DictWriter(fh, LOG_FIELDS, lineterminator="\n").writerow(rec.row())
        score = rec.val_total if np.isfinite(rec.val_total) else rec.train_total
        if score < best:
            best = score
            save_checkpoint(best_path, trainer.state_tensors(), _checkpoint_header(cfg, trainer, {"best_val": best}))
        save_checkpoint(final_path, trainer.state_tensors(), _checkpoint_header(cfg, trainer, {"best_val": best}))
        log.info("%s epoch %d total %.4f val %.4f", cfg.mode, rec.epoch, rec.train_total, rec.val_total)
    return {"final": final_path, "best": best_path, "log": log_path, "bundle": bundle}


def _dump_scores(path: Path, rep: MetricsReport) -> None:
    art = rep.artifacts
    if "probs" in art:
        table = np.column_stack([art["grades"], art["probs"]])
        header = "grade," + ",".join(f"p{k}" for k in range(art["probs"].shape[1]))
    else:
        table = np.column_stack([art["age"], art["pred"]])
        header = "age,pred"
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")


def evaluate_cell(cfg: ExperimentConfig, bundle: ModelBundle | None, cohort_path: Path,
                  tasks=TASKS) -> tuple[list[dict], dict[str, float]]:
    """All requested tasks for one grid row; returns result rows and wall times."""
    cohort = read_cohort(cohort_path)
    seqs = make_sequence_dataset(cohort)
    ft = cfg.finetune()
    art_dir = Path(cfg.out) / "artifacts" / cfg.mode
    art_dir.mkdir(parents=True, exist_ok=True)
    node = bundle is not None and bundle.node
    meta = (cfg.lambda_dir, cfg.lambda_recon, cfg.node, cfg.config_hash())
    rows, times = [], {}
    for task in tasks:
        start = time.perf_counter()
        if task == "age":
            rep = finetune_age_regression(bundle, seqs, ft, cfg.mode)
        elif task == "next_visit":
            rep = finetune_predict_next_visit(bundle, seqs, ft, cfg.mode)
        elif task == "node_cls":
            if bundle is not None and not node:
                raise ConfigError(f"node_cls needs NODE pretraining weights, got {cfg.mode}")
            rep = evaluate_node_cls(bundle, make_pair_dataset(cohort), ft, cfg.mode)
        elif task == "norms":
            groups = norm_groups(cohort, cfg.norm_group_size, cfg.seed)
            res = trajectory_norm_analysis(bundle, groups, cfg.mode, cfg.seed, cfg.solver())
            rows.extend(norm_rows(cfg.mode, res, *meta[:3], cfg.seed, meta[3]))
            times[task] = time.perf_counter() - start
            continue
        else:
            raise ConfigError(f"unknown task {task!r}")
        _dump_scores(art_dir / f"{task}_scores.csv", rep)
        rows.extend(report_rows(rep, *meta))
        times[task] = time.perf_counter() - start
    return rows, times


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str | Path | None, tasks=TASKS,
                 cohort_path: str | Path | None = None) -> list[dict]:
    out = Path(cfg.out)
    cohort_path = Path(cohort_path) if cohort_path else out / COHORT_FILE
    bundle = None
    if checkpoint is not None:
        bundle, meta = _load_bundle(checkpoint)
        cfg = replace(cfg, **{k: meta["config"][k] for k in ("mode", "lambda_recon", "lambda_dir", "node")})
    else:
        cfg = cfg.for_mode("scratch")
    if "node_cls" in tasks and bundle is not None and not bundle.node:
        raise ConfigError(f"node_cls needs NODE pretraining weights; {checkpoint} holds {cfg.mode}")
    rows, _ = evaluate_cell(cfg, bundle, cohort_path, tasks)
    write_results(out / "results.csv", rows, append=True)
    return rows


def _grid_cell(cfg: ExperimentConfig, mode: str, cohort_path: str) -> tuple[str, list[dict], dict]:
    cell = cfg.for_mode(mode)
    start = time.perf_counter()
    bundle = None
    if mode != "scratch":
        bundle = cmd_pretrain(cell, cohort_path)["bundle"]
    pre = time.perf_counter() - start
    tasks = [t for t in TASKS if t != "node_cls" or mode == "scratch" or MODES[mode][1]]
    rows, times = evaluate_cell(cell, bundle, Path(cohort_path), tasks)
    times["pretrain"] = pre
    return mode, rows, times


def cmd_reproduce(cfg: ExperimentConfig) -> dict:
    """Generate, pretrain all six modes, evaluate all seven rows, write results.csv and summary.md."""
    out = Path(cfg.out)
    cohort_path = cmd_generate(cfg)
    results: dict[str, tuple[list[dict], dict]] = {}
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [pool.submit(_grid_cell, cfg, m, str(cohort_path)) for m in GRID_ROWS]
            for fut in futures:
                mode, rows, times = fut.result()
                results[mode] = (rows, times)
    else:
        for m in GRID_ROWS:
            mode, rows, times = _grid_cell(cfg, m, str(cohort_path))
            results[mode] = (rows, times)
            log.info("%s done in %.1fs", mode, sum(times.values()))
    rows = [r for m in GRID_ROWS for r in results[m][0]]
    write_results(out / "results.csv", rows)
    summary = render_summary(rows)
    (out / "summary.md").write_text(summary)
    # wall times vary run to run, so they live outside results.csv
    timing = {m: {k: round(v, 3) for k, v in results[m][1].items()} for m in GRID_ROWS}
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    return {"results": out / "results.csv", "summary": out / "summary.md", "rows": rows}


# ---------------------------------------------------------------- argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--mode", choices=sorted(MODES) + ["scratch"])
    p.add_argument("--lambda-dir", dest="lambda_dir", type=float)
    p.add_argument("--lambda-recon", dest="lambda_recon", type=float)
    p.add_argument("--node", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--rtol", type=float)
    p.add_argument("--atol", type=float)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    p.add_argument("--n-subjects", dest="n_subjects", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    p.add_argument("--norm-group-size", dest="norm_group_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsslnode", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", help="write a synthetic cohort")
    pre = sub.add_parser("pretrain", help="pretrain one mode on a cohort")
    pre.add_argument("--cohort", help="cohort file (default: <out>/cohort.jsonl)")
    pre.add_argument("--resume", action="store_true", help="continue from <out>/pretrain/<mode>/final.ckpt")
    ev = sub.add_parser("evaluate", help="run downstream tasks for a checkpoint (or from scratch)")
    ev.add_argument("--checkpoint", help="pretrained checkpoint; omit for the from-scratch baseline")
    ev.add_argument("--task", action="append", choices=TASKS, help="repeatable; default all applicable")
    ev.add_argument("--cohort")
    sub.add_parser("reproduce", help="full grid: generate, pretrain all modes, evaluate, summarize")
    for p in sub.choices.values():
        _add_common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        if args.command == "generate":
            print(cmd_generate(cfg))
        elif args.command == "pretrain":
            res = cmd_pretrain(cfg, args.cohort, resume=args.resume)
            print(res["final"])
        elif args.command == "evaluate":
            tasks = args.task
            if tasks is None:
                node_ok = args.checkpoint is None or load_checkpoint(args.checkpoint)[1]["config"]["node"]
                tasks = [t for t in TASKS if t != "node_cls" or node_ok]
            rows = cmd_evaluate(cfg, args.checkpoint, tasks, args.cohort)
            for r in rows:
                print(f"{r['mode']}\t{r['task']}\t{r['metric']}\t{r['value']:.6g}")
        elif args.command == "reproduce":
            res = cmd_reproduce(cfg)
            print(res["summary"].read_text())
    except (ConfigError, FileNotFoundError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
