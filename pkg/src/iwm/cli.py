"""Command line for pretraining, world-model evaluation, probes and plot data.

Every subcommand reads an optional ``--config`` file plus ``--set key=value``
overrides, writes ``resolved_config.txt`` into its output directory and emits
JSONL/CSV results there. Failures print one JSON error object to stderr and
exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .augment import get_preset
from .checkpoint import CheckpointError, CheckpointVersionError
from .config import ConfigError, apply_overrides, dump_config, load_config, section
from .data import DatasetError, DatasetRef, ingest_dataset, save_png
from .vit import PredictorConfig, ViTConfig

log = logging.getLogger("iwm")

SUBCOMMANDS = ("pretrain", "eval-mrr", "eval-grid", "retrieve", "probe-linear", "probe-attentive",
               "finetune-predictor", "finetune-multitask", "marginalize", "simmatrix", "selftest",
               "plot-data")

EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT, EXIT_DIVERGED, EXIT_OTHER = 2, 3, 4, 5, 1


class CliError(Exception):
    code = EXIT_USAGE


# -- config plumbing -------------------------------------------------------------------

def _coerce(cls, values: dict) -> dict:
    """Keep only fields of dataclass ``cls``; lists become tuples for tuple fields."""
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    out = {}
    for k, v in values.items():
        if isinstance(v, str) and "," in v and "tuple" in str(names[k].type):
            v = tuple(float(x) for x in v.split(","))
        out[k] = v
    return out


def build(cls, cfg: dict, prefix: str, **defaults):
    return cls(**{**defaults, **_coerce(cls, section(cfg, prefix))})


def dataset_ref(cfg: dict, prefix: str = "dataset") -> DatasetRef:
    return build(DatasetRef, cfg, prefix)


def resolve(args) -> dict:
    cfg = load_config(args.config) if args.config else {}
    cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def out_dir(args, cfg: dict) -> Path:
    out = Path(args.out or cfg.get("out", f"runs/{args.command}"))
    out.mkdir(parents=True, exist_ok=True)
    snapshot = dict(cfg)
    snapshot["command"] = args.command
    if getattr(args, "checkpoint", None):
        snapshot["checkpoint"] = str(args.checkpoint)
    (out / "resolved_config.txt").write_text(dump_config(snapshot))
    return out


def write_jsonl(path: Path, rows) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([r.get(h, "") if isinstance(r, dict) else r[i] for i, h in enumerate(header)])


def load_model(path):
    from .pretrain import load_model as _load
    from .worldmodel import Model

    if path is None:
        raise CliError("--checkpoint is required")
    state, pcfg = _load(path)
    return Model.from_state(state, pcfg), pcfg


def eval_images(cfg: dict, pcfg, key: str = "eval.images", default: int = 8):
    ref = dataset_ref(cfg) if section(cfg, "dataset") else pcfg.dataset
    ds = ingest_dataset(ref)
    n = int(cfg.get(key, default))
    idx = ds.val_idx if len(ds.val_idx) else ds.train_idx
    return ds, ds.images[idx[:n]]


# -- subcommands -------------------------------------------------------------------------

def cmd_pretrain(args, cfg, out):
    """Pretrain an encoder and action-conditioned predictor; writes metrics and checkpoints."""
    from .pretrain import PretrainConfig, run_pretraining

    seed = int(cfg.get("seed", 0))
    pre = _coerce(PretrainConfig, {k: v for k, v in section(cfg, "pretrain").items()})
    pcfg = PretrainConfig(
        dataset=build(DatasetRef, cfg, "dataset", seed=seed),
        encoder=build(ViTConfig, cfg, "encoder"),
        predictor=build(PredictorConfig, cfg, "predictor"),
        **{"seed": seed, **pre},
    )
    state, bundle = run_pretraining(pcfg, out)
    last = state.history[-1] if state.history else {}
    write_jsonl(out / "summary.jsonl", [{"steps": state.step, "final_loss": last.get("loss"),
                                        "embed_std": last.get("embed_std")}])
    return {"steps": state.step, "checkpoint": str(out / "checkpoint")}


def cmd_eval_mrr(args, cfg, out):
    """Mean reciprocal rank of predicted targets within augmented banks."""
    from .worldmodel import mrr

    model, pcfg = load_model(args.checkpoint)
    _, images = eval_images(cfg, pcfg)
    preset = cfg.get("eval.preset", pcfg.preset)
    value, per_image = mrr(model, images, int(cfg.get("eval.bank", 256)), preset,
                           int(cfg.get("seed", 0)), cfg.get("eval.metric", "pooled"), details=True)
    rows = [{"image": i, "mrr": v} for i, v in enumerate(per_image)]
    rows.append({"image": "mean", "mrr": value, "preset": preset, "bank": int(cfg.get("eval.bank", 256))})
    write_jsonl(out / "mrr.jsonl", rows)
    return {"mrr": value}


def cmd_eval_grid(args, cfg, out):
    """MRR for each (augmentation preset, predictor preset) checkpoint cell; CSV out."""
    from .worldmodel import equivariance_grid, write_grid_csv

    cells = {}
    for spec in args.cell or []:
        try:
            key, path = spec.split("=", 1)
            preset, pred = key.split(":", 1)
        except ValueError:
            raise CliError(f"--cell must look like preset:predictor=CHECKPOINT, got {spec!r}") from None
        cells[(preset, pred)] = path
    if not cells:
        raise CliError("eval-grid needs at least one --cell")
    models, first = {}, None
    for key, path in cells.items():
        try:
            models[key] = load_model(path)[0]
            first = first or load_model(path)[1]
        except CheckpointError as exc:
            log.warning("cell %s absent: %s", key, exc)
            models[key] = None
    if first is None:
        raise CheckpointError("no readable checkpoint among the grid cells")
    _, images = eval_images(cfg, first)
    report = equivariance_grid(models, images, int(cfg.get("eval.bank", 256)), int(cfg.get("seed", 0)))
    write_grid_csv(report, out / "grid.csv", {"seed": int(cfg.get("seed", 0)), "bank": int(cfg.get("eval.bank", 256)),
                                              "images": len(images)})
    write_jsonl(out / "grid.jsonl", [{"preset": k[0], "predictor": k[1], "mrr": v} for k, v in report.items()])
    return {"cells": len(report)}


def cmd_retrieve(args, cfg, out):
    """Dump source, ground truth and nearest-neighbour images of predictions."""
    from .worldmodel import actions_for, build_bank, distances, predict_into_bank, rank_of, retrieve_nn

    model, pcfg = load_model(args.checkpoint)
    _, images = eval_images(cfg, pcfg, default=1)
    preset = get_preset(cfg.get("eval.preset", pcfg.preset))
    n_bank = int(cfg.get("eval.bank", 256))
    k = min(int(cfg.get("eval.k", 5)), n_bank)
    entries = int(cfg.get("eval.queries", 4))
    manifest = []
    for i, img in enumerate(images):
        bank = build_bank(img, n_bank, preset, model, seed=int(cfg.get("seed", 0)) * 100003 + i)
        preds = predict_into_bank(img, bank, model).mean(axis=1)
        save_png(out / f"img{i:03d}_source.png", img)
        for j in range(min(entries, len(bank))):
            nn = retrieve_nn(preds[j], bank.pooled, k)
            save_png(out / f"img{i:03d}_q{j:03d}_truth.png", bank.images[j])
            for r, idx in enumerate(nn):
                save_png(out / f"img{i:03d}_q{j:03d}_nn{r}.png", bank.images[idx])
            manifest.append({"image": i, "query": j, "neighbours": [int(x) for x in nn],
                             "truth_rank": rank_of(distances(preds[j], bank.pooled), j),
                             "action": [round(float(x), 6) for x in actions_for([bank.params[j]])[0]]})
    (out / "retrieval_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    write_jsonl(out / "retrieval.jsonl", manifest)
    return {"queries": len(manifest)}


def _probe(args, cfg, out, kind):
    from .probes import ProbeConfig, probe

    model, pcfg = load_model(args.checkpoint)
    ds = ingest_dataset(dataset_ref(cfg) if section(cfg, "dataset") else pcfg.dataset)
    defaults = {"kind": kind, "seed": int(cfg.get("seed", 0))}
    if kind == "attentive":
        defaults["crop_scale"] = (0.3, 1.0)
    pc = build(ProbeConfig, cfg, "probe", **defaults)
    if pc.kind != kind:
        raise CliError(f"probe.kind={pc.kind} conflicts with subcommand probe-{kind}")
    encoder = model.teacher if pc.encoder == "teacher" else model.student
    res = probe(encoder, model.encoder_cfg, ds, pc)
    write_jsonl(out / "probe.jsonl", [{"kind": kind, "encoder": pc.encoder, "accuracy": res.accuracy,
                                       "final_loss": res.history[-1] if res.history else None}])
    return {"accuracy": res.accuracy}


def cmd_probe_linear(args, cfg, out):
    """Linear probe on the frozen encoder."""
    return _probe(args, cfg, out, "linear")


def cmd_probe_attentive(args, cfg, out):
    """Attentive probe on the frozen encoder."""
    return _probe(args, cfg, out, "attentive")


TABLE_S4_HEADER = ["null_latents", "on_teacher", "one_token", "accuracy", "predictor_tokens"]


def cmd_finetune_predictor(args, cfg, out):
    """Finetune the predictor plus an attentive head on one task (or the 8-way ablation)."""
    from .probes import FinetuneConfig, PredictionTaskConfig, ablation_grid, predictor_finetune

    model, pcfg = load_model(args.checkpoint)
    ds = ingest_dataset(dataset_ref(cfg) if section(cfg, "dataset") else pcfg.dataset)
    fc = build(FinetuneConfig, cfg, "finetune", seed=int(cfg.get("seed", 0)))
    if args.ablation:
        rows = ablation_grid(model, ds, fc, bool(cfg.get("task.pretrained_predictor", True)),
                             float(cfg.get("task.lr_divisor", 10.0)))
        write_csv(out / "prediction_task_ablation.csv", TABLE_S4_HEADER, rows)
        write_jsonl(out / "finetune.jsonl", rows)
        return {"rows": len(rows)}
    task = build(PredictionTaskConfig, cfg, "task")
    res = predictor_finetune(model, ds, task, fc)
    row = {**asdict(task), "accuracy": res.accuracy["task"], "predictor_tokens": res.predictor_tokens,
           "steps": res.steps}
    write_jsonl(out / "finetune.jsonl", [row])
    return {"accuracy": res.accuracy["task"]}


def cmd_finetune_multitask(args, cfg, out):
    """Tune one predictor on several tasks with task tokens, against matched single-task runs."""
    from .probes import (FinetuneConfig, PredictionTaskConfig, TaskSpec, multitask_finetune,
                         single_task_baselines)

    model, pcfg = load_model(args.checkpoint)
    names = sorted({k.split(".")[1] for k in cfg if k.startswith("tasks.")})
    if len(names) < 2:
        raise CliError("finetune-multitask needs at least two [tasks.<id>] dataset sections")
    tasks = [TaskSpec(n, ingest_dataset(dataset_ref(cfg, f"tasks.{n}")),
                      float(cfg.get(f"weights.{n}", 1.0))) for n in names]
    fc = build(FinetuneConfig, cfg, "finetune", seed=int(cfg.get("seed", 0)))
    if fc.steps is None:
        raise CliError("finetune.steps must be set so baselines can match the iteration count")
    task = build(PredictionTaskConfig, cfg, "task")
    multi = multitask_finetune(model, tasks, fc, task)
    base = single_task_baselines(model, tasks, fc, task)
    rows = [{"task": t.task_id, "multitask": multi.accuracy[t.task_id],
             "single_task": base[t.task_id].accuracy["task"],
             "delta": multi.accuracy[t.task_id] - base[t.task_id].accuracy["task"],
             "multitask_examples": multi.per_task_examples[t.task_id],
             "single_task_examples": base[t.task_id].per_task_examples["task"]} for t in tasks]
    write_csv(out / "multitask.csv", list(rows[0]), rows)
    write_jsonl(out / "multitask.jsonl", rows)
    return {"mean_multitask": multi.mean_accuracy}


def cmd_marginalize(args, cfg, out):
    """Average predictions over sampled actions and retrieve the clean image."""
    from .worldmodel import marginal_retrieval

    model, pcfg = load_model(args.checkpoint)
    _, images = eval_images(cfg, pcfg, default=16)
    res = marginal_retrieval(model, images, int(cfg.get("eval.actions", 64)), int(cfg.get("eval.bank", 256)),
                             cfg.get("eval.preset", pcfg.preset), int(cfg.get("seed", 0)),
                             int(cfg.get("eval.trials", 100)))
    rows = [{"trial": i, "hit": h, "top5": t} for i, (h, t) in enumerate(zip(res["hits"], res["top5"]))]
    rows.append({"trial": "summary", "hit_rate": res["hit_rate"], "trials": res["trials"],
                 "centroid_hit_rate": res["centroid_hit_rate"]})
    write_jsonl(out / "marginalize.jsonl", rows)
    return {"hit_rate": res["hit_rate"]}


def cmd_simmatrix(args, cfg, out):
    """Cosine similarity matrix between augmented views of several images."""
    from .worldmodel import block_means, similarity_matrix

    model, pcfg = load_model(args.checkpoint)
    _, images = eval_images(cfg, pcfg, default=4)
    views = int(cfg.get("eval.views", 4))
    encoder = model.teacher if cfg.get("eval.encoder", "teacher") == "teacher" else model.student
    sim = similarity_matrix(images, views, encoder, model.encoder_cfg, cfg.get("eval.preset", pcfg.preset),
                            int(cfg.get("seed", 0)))
    np.savetxt(out / "simmatrix.csv", sim, delimiter=",", fmt="%.6f")
    blocks = block_means(sim, views)
    write_jsonl(out / "simmatrix.jsonl", [{"images": len(images), "views": views, **blocks}])
    return blocks


def cmd_selftest(args, cfg, out):
    """Finite-difference gradient check of every op kind."""
    from .gradcheck import TOLERANCE, main_report

    if args.what != "grad":
        raise CliError(f"unknown selftest {args.what!r}; available: grad")
    results, seconds = main_report(int(cfg.get("selftest.seeds", 20)))
    rows = [{"kind": r.kind, "seeds": r.seeds, "max_rel_error": r.max_error, "passed": r.passed} for r in results]
    write_jsonl(out / "gradcheck.jsonl", rows)
    (out / "gradcheck_timing.json").write_text(json.dumps({"seconds": seconds}) + "\n")
    failed = [r.kind for r in results if not r.passed]
    if failed:
        raise RuntimeError(f"gradient check above {TOLERANCE} for: {', '.join(failed)}")
    return {"kinds": len(results), "failed": 0}


PLOT_SCHEMAS = {
    # output name -> (source file inside an input dir, columns)
    "conditioning_grid.csv": ("mrr.jsonl", ["run", "mrr"]),
    "equivariance_grid.csv": ("grid.jsonl", ["preset", "predictor", "mrr"]),
    "prediction_task_ablation.csv": ("prediction_task_ablation.csv", TABLE_S4_HEADER),
    "mrr_vs_probe.csv": (None, ["run", "mrr", "linear", "attentive", "finetune"]),
}


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def cmd_plot_data(args, cfg, out):
    """Collect results of earlier runs into stable CSV schemas for plotting."""
    runs = [Path(p) for p in args.inputs or []]
    if not runs:
        raise CliError("plot-data needs --inputs RUN_DIR ...")
    cond, grid, ablation, scatter = [], [], [], []
    for run in runs:
        if not run.is_dir():
            raise CliError(f"{run} is not a directory")
        entry = {"run": run.name}
        if (run / "mrr.jsonl").exists():
            mean = [r for r in _read_jsonl(run / "mrr.jsonl") if r.get("image") == "mean"]
            if mean:
                cond.append({"run": run.name, "mrr": mean[0]["mrr"]})
                entry["mrr"] = mean[0]["mrr"]
        if (run / "grid.jsonl").exists():
            grid.extend(_read_jsonl(run / "grid.jsonl"))
        if (run / "prediction_task_ablation.csv").exists():
            with open(run / "prediction_task_ablation.csv") as f:
                ablation.extend(csv.DictReader(f))
        if (run / "probe.jsonl").exists():
            for r in _read_jsonl(run / "probe.jsonl"):
                entry[r["kind"]] = r["accuracy"]
        if (run / "finetune.jsonl").exists():
            rows = _read_jsonl(run / "finetune.jsonl")
            if len(rows) == 1:
                entry["finetune"] = rows[0]["accuracy"]
        scatter.append(entry)
    write_csv(out / "conditioning_grid.csv", PLOT_SCHEMAS["conditioning_grid.csv"][1], cond)
    write_csv(out / "equivariance_grid.csv", PLOT_SCHEMAS["equivariance_grid.csv"][1],
              [{**r, "mrr": "absent" if r["mrr"] is None else r["mrr"]} for r in grid])
    write_csv(out / "prediction_task_ablation.csv", TABLE_S4_HEADER, ablation)
    write_csv(out / "mrr_vs_probe.csv", PLOT_SCHEMAS["mrr_vs_probe.csv"][1], scatter)
    return {"runs": len(runs)}


HANDLERS = {
    "pretrain": cmd_pretrain, "eval-mrr": cmd_eval_mrr, "eval-grid": cmd_eval_grid, "retrieve": cmd_retrieve,
    "probe-linear": cmd_probe_linear, "probe-attentive": cmd_probe_attentive,
    "finetune-predictor": cmd_finetune_predictor, "finetune-multitask": cmd_finetune_multitask,
    "marginalize": cmd_marginalize, "simmatrix": cmd_simmatrix, "selftest": cmd_selftest,
    "plot-data": cmd_plot_data,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def make_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file with [section] headers")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config key (repeatable)")
    common.add_argument("--out", help="output directory (default runs/<subcommand>)")
    common.add_argument("--seed", type=int, help="global seed (overrides config 'seed')")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="iwm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=(HANDLERS[name].__doc__ or name).splitlines()[0])
        if name not in ("pretrain", "selftest", "plot-data"):
            p.add_argument("--checkpoint", help="checkpoint directory written by pretrain")
        if name == "eval-grid":
            p.add_argument("--cell", action="append", metavar="PRESET:PREDICTOR=CKPT")
        if name == "finetune-predictor":
            p.add_argument("--ablation", action="store_true",
                           help="run all 8 (null latents, teacher, single token) combinations")
        if name == "selftest":
            p.add_argument("what", nargs="?", default="grad", help="suite to run (grad)")
        if name == "plot-data":
            p.add_argument("--inputs", nargs="+", metavar="RUN_DIR")
    return parser


def _error_code(exc: BaseException) -> int:
    from .pretrain import TrainingDiverged

    if isinstance(exc, (CliError, ConfigError)):
        return EXIT_USAGE
    if isinstance(exc, DatasetError):
        return EXIT_DATA
    if isinstance(exc, (CheckpointError, CheckpointVersionError)):
        return EXIT_CHECKPOINT
    if isinstance(exc, TrainingDiverged):
        return EXIT_DIVERGED
    return EXIT_OTHER


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = make_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args)
        out = out_dir(args, cfg)
        result = HANDLERS[args.command](args, cfg, out)
        print(json.dumps({"ok": True, "command": args.command, **(result or {})}, sort_keys=True, default=str))
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # every failure becomes one structured line
        err = {"ok": False, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return _error_code(exc)


if __name__ == "__main__":
    sys.exit(main())
