"""`latent-loop`: deterministic command-line front end.

Commands chain through an output directory: `pretrain` writes the frozen
towers, `gen-tasks` a task file, `train` a projector checkpoint plus its
training log, `eval` / `sweep` / `dynamics` the result CSVs, and `gradcheck`
a finite-difference report.  Every command writes a `<command>.resolved.cfg`
snapshot that reproduces the run, refuses to overwrite existing outputs
unless `--force` is given, and derives all randomness from the single seed.

Exit codes: 0 success, 1 failed check, 2 bad input or usage.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import gradcheck as gc
from .config import ConfigError, apply_overrides, load_config, serialize_config
from .container import ContainerError
from .encoder import load_encoder, save_encoder
from .pretrain import pretrain_backbone, pretrain_generator_spec
from .refinement import (RefineConfig, block_eval_count, init_projector_bank,
                         load_projectors, parameter_count, save_projectors)
from .rng import substream
from .tasks import (cross_task_protocol, evaluate, generate_task, harmonic_mean,
                    load_task, save_task, split_base_novel)
from .training import train_few_shot, write_training_log

COMMANDS = ("pretrain", "gen-tasks", "train", "eval", "sweep", "dynamics", "gradcheck")


class CheckFailure(Exception):
    """A verification command found a failing check (exit code 1)."""


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latent-loop")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key: value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, repeatable")
        p.add_argument("--zero-shot", action="store_true",
                       help="evaluate the frozen model (K=0, no adaptation)")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")
    return parser


class Run:
    """Resolved invocation: config, output directory, shared helpers."""

    def __init__(self, args):
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, args.set)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        self.cfg = cfg
        self.out = Path(args.out)
        self.force = args.force
        self.zero_shot = args.zero_shot
        self.command = args.command
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.out / p

    def fresh(self, name: str) -> Path:
        p = self.path(name)
        if p.exists() and not self.force:
            raise ConfigError(f"output {p} exists; pass --force to overwrite")
        return p

    def snapshot(self) -> None:
        self.fresh(f"{self.command}.resolved.cfg").write_text(
            serialize_config(self.cfg), encoding="utf-8")

    def load_backbone(self):
        p = self.path(self.cfg.backbone_file)
        if not p.exists():
            raise ConfigError(f"backbone file not found: {p} (run pretrain first)")
        return load_encoder(p)

    def load_task(self):
        p = self.path(self.cfg.task_file)
        if not p.exists():
            raise ConfigError(f"task file not found: {p} (run gen-tasks first)")
        return load_task(p)


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def cmd_pretrain(run: Run) -> None:
    cfg = run.cfg
    out_file = run.fresh(cfg.backbone_file)
    run.snapshot()
    pool_seed = substream(cfg.seed, "pretrain.pool").next_u64()
    generator = pretrain_generator_spec(cfg.pretrain_classes, cfg.task_spec(), pool_seed)
    weights = pretrain_backbone(generator, cfg.encoder_config(), cfg.pretrain_steps,
                                cfg.seed, batch_size=cfg.pretrain_batch,
                                lr=cfg.pretrain_lr)
    save_encoder(out_file, weights)
    print(f"wrote {out_file}")


def cmd_gen_tasks(run: Run) -> None:
    cfg = run.cfg
    out_file = run.fresh(cfg.task_file)
    run.snapshot()
    task = generate_task(cfg.task_spec(), cfg.encoder_config())
    if cfg.protocol == "base-to-novel":
        task = split_base_novel(task, cfg.split_fraction, cfg.seed)
    save_task(out_file, task)
    print(f"wrote {out_file} ({len(task.base_classes)} base / "
          f"{len(task.novel_classes)} novel classes)")


def cmd_train(run: Run) -> None:
    cfg = run.cfg
    proj_file = run.fresh(cfg.projector_file)
    log_file = run.fresh("train_log.csv")
    run.snapshot()
    weights = run.load_backbone()
    task = run.load_task()
    rcfg = cfg.refine_config()
    bank = init_projector_bank(rcfg, weights.config, cfg.seed)
    bank, rows = train_few_shot(task, weights, bank, rcfg, cfg.train_config())
    save_projectors(proj_file, bank)
    write_training_log(log_file, rows)
    print(f"wrote {proj_file} and {log_file} ({len(rows)} steps)")


def _eval_base_to_novel(run: Run, weights, task) -> list:
    cfg = run.cfg
    rcfg = cfg.refine_config()
    rows = []
    if run.zero_shot:
        result_b = evaluate(task, "base", weights, None, rcfg, k_steps=0)
        result_n = evaluate(task, "novel", weights, None, rcfg, k_steps=0)
        rows.append(("zero-shot", result_b.accuracy, result_n.accuracy))
        return rows
    for i in range(cfg.eval_seeds):
        seed = cfg.seed + i
        bank = init_projector_bank(rcfg, weights.config, seed)
        bank, _ = train_few_shot(task, weights, bank, rcfg, cfg.train_config(seed))
        result_b = evaluate(task, "base", weights, bank, rcfg)
        result_n = evaluate(task, "novel", weights, bank, rcfg)
        rows.append((str(seed), result_b.accuracy, result_n.accuracy))
    return rows


def _eval_cross_task(run: Run, weights, task) -> tuple:
    cfg = run.cfg
    rcfg = cfg.refine_config()
    spec = task.spec
    targets = []
    for t in range(cfg.cross_targets):
        t_seed = substream(cfg.seed, f"cross.target.{t}").next_u64()
        t_spec = replace(spec, seed=t_seed, proto_jitter=cfg.cross_jitter,
                         noise_inflation=cfg.cross_noise_inflation)
        targets.append(generate_task(t_spec, weights.config))
    rows = []
    for i in range(1 if run.zero_shot else cfg.eval_seeds):
        seed = cfg.seed + i
        if run.zero_shot:
            source = evaluate(task, "all", weights, None, rcfg, k_steps=0).accuracy
            per_target = [evaluate(t, "all", weights, None, rcfg, k_steps=0).accuracy
                          for t in targets]
            label = "zero-shot"
        else:
            bank = init_projector_bank(rcfg, weights.config, seed)
            bank, _ = train_few_shot(task, weights, bank, rcfg, cfg.train_config(seed))
            result = cross_task_protocol(task, targets, weights, bank, rcfg)
            source = result["source_accuracy"]
            per_target = result["target_accuracies"]
            label = str(seed)
        rows.append((label, source, per_target))
    return rows, len(targets)


def cmd_eval(run: Run) -> None:
    cfg = run.cfg
    out_file = run.fresh("results.csv")
    run.snapshot()
    weights = run.load_backbone()
    task = run.load_task()
    lines = []
    if cfg.protocol == "base-to-novel":
        if not task.novel_classes:
            raise ConfigError("task has no novel side; regenerate with protocol: base-to-novel")
        rows = _eval_base_to_novel(run, weights, task)
        lines.append("seed,base,novel,hm")
        for label, base, novel in rows:
            lines.append(f"{label},{_fmt(base)},{_fmt(novel)},{_fmt(harmonic_mean(base, novel))}")
        if len(rows) > 1:
            mb = sum(r[1] for r in rows) / len(rows)
            mn = sum(r[2] for r in rows) / len(rows)
            lines.append(f"mean,{_fmt(mb)},{_fmt(mn)},{_fmt(harmonic_mean(mb, mn))}")
    elif cfg.protocol == "cross-task":
        rows, n_targets = _eval_cross_task(run, weights, task)
        header = "seed,source,target_mean," + ",".join(f"target_{t}" for t in range(n_targets))
        lines.append(header)
        for label, source, per_target in rows:
            mean_t = sum(per_target) / len(per_target)
            tail = ",".join(_fmt(v) for v in per_target)
            lines.append(f"{label},{_fmt(source)},{_fmt(mean_t)},{tail}")
        if len(rows) > 1:
            ms = sum(r[1] for r in rows) / len(rows)
            cols = [sum(r[2][t] for r in rows) / len(rows) for t in range(n_targets)]
            mean_t = sum(cols) / len(cols)
            lines.append(f"mean,{_fmt(ms)},{_fmt(mean_t)},{','.join(_fmt(v) for v in cols)}")
    else:
        raise ConfigError(f"unknown protocol {cfg.protocol!r}")
    out_file.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out_file}")
    print("\n".join(lines))


SWEEP_HEADER = ("depths,k_steps,sharing,modalities,seed,metric,value,"
                "parameter_count,block_eval_count")


def cmd_sweep(run: Run) -> None:
    cfg = run.cfg
    out_file = run.fresh("sweep.csv")
    run.snapshot()
    lines = [SWEEP_HEADER]
    grid = cfg.sweep_grid()
    weights = None if cfg.counts_only else run.load_backbone()
    task = None if cfg.counts_only else run.load_task()
    for depth_list, k, sharing, modalities in grid:
        rcfg = RefineConfig(injection_depths=depth_list, k_steps=k,
                            sharing=sharing, modalities=modalities, rank=cfg.rank)
        count = parameter_count(rcfg, cfg.d_vision, cfg.d_text)
        blocks = block_eval_count(cfg.depth, rcfg)
        tag = "|".join(str(d) for d in depth_list)
        mod_tag = "+".join(modalities)
        prefix = f"{tag},{k},{sharing},{mod_tag}"
        if cfg.counts_only:
            lines.append(f"{prefix},,counts,,{count},{blocks}")
            continue
        for i in range(cfg.eval_seeds):
            seed = cfg.seed + i
            bank = init_projector_bank(rcfg, weights.config, seed)
            bank, _ = train_few_shot(task, weights, bank, rcfg, cfg.train_config(seed))
            base = evaluate(task, "base", weights, bank, rcfg).accuracy
            novel = evaluate(task, "novel", weights, bank, rcfg).accuracy
            hm = harmonic_mean(base, novel)
            for metric, value in (("base", base), ("novel", novel), ("hm", hm)):
                lines.append(f"{prefix},{seed},{metric},{_fmt(value)},{count},{blocks}")
    out_file.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out_file} ({len(lines) - 1} rows)")


def cmd_dynamics(run: Run) -> None:
    cfg = run.cfg
    metrics_file = run.fresh("metrics.csv")
    transitions_file = run.fresh("transitions.csv")
    maps_dir = run.path("maps")
    run.snapshot()
    weights = run.load_backbone()
    task = run.load_task()
    rcfg = cfg.refine_config()
    if run.zero_shot:
        rcfg = replace(rcfg, k_steps=0)
        bank = None
    else:
        p = run.path(cfg.projector_file)
        if not p.exists():
            raise ConfigError(f"projector file not found: {p} (run train first)")
        bank = load_projectors(p, rcfg)

    sides = ["base", "novel"] if task.novel_classes else ["all"]
    dataset = f"synthetic-c{task.spec.n_classes}-s{task.spec.seed}"
    metric_rows, transition_rows = [], []
    maps_dir.mkdir(parents=True, exist_ok=True)
    for side in sides:
        result = evaluate(task, side, weights, bank, rcfg)
        jac = []
        for trace in result.traces:
            jac.append(dyn.jacobian_norms(trace.x, trace.label, weights, bank, rcfg,
                                          result.text_steps))
        metrics = dyn.step_metrics(result.traces, np.array(jac))
        metric_rows.extend((side, dataset, m) for m in metrics)
        transition_rows.append((side, dyn.group_transitions(result.traces)))
        if side == sides[0]:
            for i, trace in enumerate(result.traces[: cfg.map_examples]):
                maps = dyn.contribution_map(trace.x, trace.label, weights, bank, rcfg,
                                            result.text_steps)
                for k in range(maps.shape[0]):
                    dyn.write_pgm(maps_dir / f"{side}-{i}_{k}.pgm", maps[k])
    dyn.write_metrics_csv(metrics_file, metric_rows)
    dyn.write_transitions_csv(transitions_file, transition_rows)
    print(f"wrote {metrics_file}, {transitions_file}, and maps under {maps_dir}")


def cmd_gradcheck(run: Run) -> None:
    out_file = run.fresh("gradcheck.txt")
    run.snapshot()
    results = gc.run_all()
    report = gc.format_report(results)
    out_file.write_text(report, encoding="utf-8")
    print(report, end="")
    if not all(r.passed for r in results):
        failed = ", ".join(r.op for r in results if not r.passed)
        raise CheckFailure(f"gradient check failed for: {failed}")


HANDLERS = {
    "pretrain": cmd_pretrain,
    "gen-tasks": cmd_gen_tasks,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "dynamics": cmd_dynamics,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        run = Run(args)
        HANDLERS[args.command](run)
    except CheckFailure as e:
        print(f"check failed: {e}", file=sys.stderr)
        return 1
    except (ConfigError, ContainerError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
