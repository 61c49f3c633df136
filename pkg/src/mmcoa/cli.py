"""Command-line entry point: ``mmcoa <train|attack|eval|interpolate|report|datasets>``.

Exit codes: 0 success, 1 validation error (bad config, flags, dataset,
mismatched artifacts), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import torch

from ._util import TOOL_VERSION, write_json, write_text
from .attacks import ImageAttackBatch, attack_prompt_set, export_image_corpus, export_text_corpus, pgd_image_attack
from .config import ConfigError, ExperimentConfig, config_to_yaml, load_config
from .data import REGISTRY, DatasetError, load_dataset
from .encoders import CheckpointError, DualEncoder, load_checkpoint, read_checkpoint, save_checkpoint
from .evaluation import (
    EvalReport,
    ProtocolError,
    StructureError,
    feature_similarity_diagnostic,
    interpolation_sweep,
    render_eval_table,
    render_retrieval_table,
    save_retrieval,
)
from .pipeline import Workspace, candidates_for, eval_stage, initial_model, prepare, retrieval_stage, train_stage
from .training import FewShotError

log = logging.getLogger("mmcoa")

VALIDATION_ERRORS = (ConfigError, DatasetError, ProtocolError, FewShotError, StructureError, CheckpointError)


class UsageError(ValueError):
    pass


class ReportError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Helpers


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
    if args.device is not None:
        cfg = dataclasses.replace(cfg, device=args.device)
    if cfg.device != "cpu":
        raise ConfigError(f"device {cfg.device!r} is not supported; this build runs on cpu only")
    return cfg


def _stamp(cfg: ExperimentConfig, **extra) -> dict:
    return {"config_hash": cfg.hash(), "tool_version": TOOL_VERSION, **extra}


def _write_jsonl(path: Path, records: list[dict]) -> None:
    write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _load(path: str) -> DualEncoder:
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _labels(paths: list[str]) -> list[str]:
    stems = [Path(p).stem for p in paths]
    if len(set(stems)) == len(stems):
        return stems
    return [f"{Path(p).parent.name}-{Path(p).stem}" for p in paths]


def _eval_row_record(cfg, epoch: int, report: EvalReport) -> dict:
    return _stamp(cfg, type="eval", epoch=epoch,
                  accuracy={a: report.average(a) for a in report.attacks()})


# ---------------------------------------------------------------------------
# Subcommands


def cmd_train(args) -> int:
    cfg = _config(args)
    out = cfg.resolved_output_dir()
    ws = prepare(cfg)
    if args.checkpoint:
        if len(args.checkpoint) != 1:
            raise UsageError("train accepts at most one --checkpoint (the starting weights)")
        model = _load(args.checkpoint[0])
    else:
        model = initial_model(cfg, ws)
    write_text(out / "config.yaml", config_to_yaml(cfg))
    write_json(out / "config_hash.json", _stamp(cfg, method=cfg.train.method, seed=cfg.seed))
    save_checkpoint(model, out / "base.pt", cfg.hash(), {"stage": "base"})

    records: list[dict] = [_stamp(cfg, type="header", method=cfg.train.method, seed=cfg.seed)]
    if cfg.eval_every_epoch:
        records.append(_eval_row_record(cfg, 0, eval_stage(cfg, ws, model)))

    def on_step(rec, _model):
        records.append({"type": "step", **rec})

    def on_epoch(epoch, trained):
        save_checkpoint(trained, out / "checkpoints" / f"epoch_{epoch + 1:03d}.pt", cfg.hash(),
                        {"stage": "epoch", "epoch": epoch + 1})
        if cfg.eval_every_epoch:
            records.append(_eval_row_record(cfg, epoch + 1, eval_stage(cfg, ws, trained)))
        _write_jsonl(out / "train_log.jsonl", records)
        log.info("epoch %d done", epoch + 1)

    result = train_stage(cfg, ws, model, on_step=on_step, on_epoch=on_epoch)
    save_checkpoint(result.model, out / "final.pt", cfg.hash(), {"stage": "final", "epochs": cfg.train.epochs})
    _write_jsonl(out / "train_log.jsonl", records)
    losses = result.epoch_losses()
    print(f"trained {cfg.train.method} for {cfg.train.epochs} epochs; mean loss per epoch: "
          f"{[round(v, 4) for v in losses]}")
    print(f"config hash {cfg.hash()}; outputs in {out}")
    return 0


def _attack_corpus(cfg: ExperimentConfig, ws: Workspace, model: DualEncoder, out: Path,
                   checkpoint: str, batch_size: int = 256) -> None:
    data, budget = ws.eval_set, cfg.eval.budget
    batches = []
    for start in range(0, len(data), batch_size):
        ids = list(range(start, min(start + batch_size, len(data))))
        batches.append(pgd_image_attack(model, data.images[start:start + batch_size], ws.prompts,
                                        data.labels[start:start + batch_size], budget, seed=cfg.seed,
                                        example_ids=ids))
    merged = ImageAttackBatch(torch.cat([b.adversarial for b in batches]),
                              torch.cat([b.objective_trace for b in batches], dim=1),
                              torch.cat([b.perturbation_norm for b in batches]))
    provenance = _stamp(cfg, checkpoint=Path(checkpoint).name, checkpoint_sha=_file_sha(Path(checkpoint)),
                        dataset=data.name, budget=budget.to_dict())
    export_image_corpus(out / "image", merged, data.ids, budget.hash(), provenance)
    if budget.text_budget > 0:
        _, results = attack_prompt_set(model, ws.prompts, budget, candidates_for(ws, model))
        export_text_corpus(out / "text", results, list(ws.prompts.class_names), budget.hash())
        write_json(out / "text" / "manifest.json", {**provenance, "file": "texts.jsonl",
                                                    "max_edits": max(int(r.perturbation_norm) for r in results)})


def cmd_attack(args) -> int:
    cfg = _config(args)
    if not args.checkpoint or len(args.checkpoint) != 1:
        raise UsageError("attack needs exactly one --checkpoint")
    out = Path(args.out) if args.out else cfg.resolved_output_dir() / "attack"
    ws = prepare(cfg)
    _attack_corpus(cfg, ws, _load(args.checkpoint[0]), out, args.checkpoint[0])
    print(f"adversarial corpus written to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    if not args.checkpoint:
        raise UsageError("eval needs at least one --checkpoint")
    out = (Path(args.out) if args.out else cfg.resolved_output_dir()) / "eval"
    ws = prepare(cfg)
    reports, retrieval = {}, {}
    for label, path in zip(_labels(args.checkpoint), args.checkpoint):
        model = _load(path)
        report = eval_stage(cfg, ws, model)
        report.metadata.update(checkpoint=Path(path).name, checkpoint_sha=_file_sha(Path(path)),
                               checkpoint_config_hash=getattr(model, "checkpoint_hash", ""), label=label)
        report.save(out / f"{label}.json")
        reports[label] = report
        if cfg.eval.retrieval:
            rr = retrieval_stage(cfg, ws, model)
            save_retrieval(out / f"{label}.retrieval.json", rr, cfg.hash())
            retrieval[f"{label}"] = rr[0:2]
            retrieval[f"{label}+co"] = rr[2:4]
        if cfg.eval.features:
            diag = feature_similarity_diagnostic(model, ws.eval_set, cfg.eval.budget, ws.prompts, seed=cfg.seed)
            diag.export(out / f"{label}_features", cfg.hash())
    header = f"# config_hash {cfg.hash()}  tool_version {TOOL_VERSION}\n"
    table = header + render_eval_table(reports)
    write_text(out / "eval_table.txt", table)
    print(table)
    if retrieval:
        rtable = header + render_retrieval_table(retrieval)
        write_text(out / "retrieval_table.txt", rtable)
        print(rtable)
    return 0


def cmd_interpolate(args) -> int:
    cfg = _config(args)
    if not args.checkpoint or len(args.checkpoint) != 2:
        raise UsageError("interpolate needs two --checkpoint flags: base first, fine-tuned second")
    grid = cfg.interpolate_grid
    if args.grid:
        try:
            grid = tuple(float(g) for g in args.grid.split(","))
        except ValueError as exc:
            raise UsageError(f"--grid must be comma-separated numbers: {exc}") from exc
    out = (Path(args.out) if args.out else cfg.resolved_output_dir()) / "interpolation"
    ws = prepare(cfg)
    base, ft = (_load(p) for p in args.checkpoint)
    sweep = interpolation_sweep(base, ft, grid, ws.eval_set, ws.prompts, cfg.eval.attacks, cfg.eval.budget,
                                candidates_for(ws, base), seed=cfg.seed, config_hash=cfg.hash())
    sweep.save(out / "interpolation.json")
    from .plots import plot_interpolation

    plot_interpolation(sweep, out / "interpolation.png")
    for i, lam in enumerate(sweep.lambdas):
        robust = "  ".join(f"{a} {v[i]:6.2f}" for a, v in sweep.robust.items())
        print(f"lambda {lam:4.2f}  clean {sweep.clean[i]:6.2f}  {robust}")
    return 0


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def collect_run(run_dir: Path) -> dict:
    """Every artifact under ``run_dir`` that carries a config hash, keyed by relative path."""
    found: dict[str, dict] = {}
    for path in sorted(run_dir.rglob("*.json")):
        if path.name.startswith(".") or path.name == "summary.json":
            continue
        payload = json.loads(path.read_text())
        if isinstance(payload, dict) and "config_hash" in payload:
            found[str(path.relative_to(run_dir))] = payload
    log_path = run_dir / "train_log.jsonl"
    if log_path.exists():
        found["train_log.jsonl"] = {"records": _read_jsonl(log_path)}
        header = found["train_log.jsonl"]["records"][0]
        found["train_log.jsonl"]["config_hash"] = header.get("config_hash", "")
    for path in sorted(run_dir.rglob("*.pt")):
        found[str(path.relative_to(run_dir))] = {"config_hash": read_checkpoint(path)["config_hash"]}
    return found


def cmd_report(args) -> int:
    run_dirs = [Path(d) for d in args.runs]
    for d in run_dirs:
        if not d.is_dir():
            raise UsageError(f"run directory {d} does not exist")
    runs = {str(d): collect_run(d) for d in run_dirs}
    hashes = {(run, name): art["config_hash"] for run, arts in runs.items() for name, art in arts.items()}
    distinct = sorted(set(hashes.values()))
    if len(distinct) > 1 and not args.force:
        detail = "\n".join(f"  {run}/{name}: {h}" for (run, name), h in sorted(hashes.items()))
        raise ReportError(f"artifacts carry {len(distinct)} different config hashes; pass --force to merge anyway\n"
                          + detail)
    out = Path(args.out) if args.out else run_dirs[0]
    lines = ["# Run summary", "", f"tool version {TOOL_VERSION}; config hashes: {', '.join(distinct) or 'none'}"]
    if len(distinct) > 1:
        lines.append("WARNING: merged with --force across mismatched config hashes.")
    curves: dict[str, dict[str, list]] = {}
    for run, arts in runs.items():
        lines += ["", f"## {run}", ""]
        train_log = arts.get("train_log.jsonl")
        if train_log:
            recs = train_log["records"]
            header = recs[0]
            steps = [r for r in recs if r.get("type") == "step"]
            lines.append(f"method {header.get('method')}, seed {header.get('seed')}, {len(steps)} steps")
            by_epoch: dict[int, list[float]] = {}
            for r in steps:
                by_epoch.setdefault(r["epoch"], []).append(r["loss"])
            for e, v in sorted(by_epoch.items()):
                lines.append(f"- epoch {e + 1}: mean loss {sum(v) / len(v):.4f}")
            label = f"{Path(run).name} ({header.get('method')})"
            for r in recs:
                if r.get("type") == "eval":
                    for attack, acc in r["accuracy"].items():
                        curves.setdefault(label, {}).setdefault(attack, []).append((r["epoch"], acc))
        evals = {Path(k).stem: EvalReport.from_dict(v) for k, v in arts.items()
                 if k.startswith("eval/") and "rows" in v}
        if evals:
            lines += ["", "```", render_eval_table(evals).rstrip(), "```"]
        interp = arts.get("interpolation/interpolation.json")
        if interp:
            lines += ["", "weight interpolation (lambda: clean / robust per attack)"]
            for i, lam in enumerate(interp["lambdas"]):
                robust = ", ".join(f"{a} {v[i]:.2f}" for a, v in interp["robust"].items())
                lines.append(f"- {lam:.2f}: clean {interp['clean'][i]:.2f}; {robust}")
    if curves:
        from .plots import plot_iteration_curves

        plot_iteration_curves(curves, out / "iteration_curves.png", ",".join(distinct))
        lines += ["", "![accuracy against training epochs](iteration_curves.png)"]
    text = "\n".join(lines) + "\n"
    write_text(out / "summary.md", text)
    write_json(out / "summary.json", {"config_hash": distinct[0] if len(distinct) == 1 else distinct,
                                      "tool_version": TOOL_VERSION, "runs": list(runs), "curves": curves,
                                      "forced": len(distinct) > 1})
    print(text)
    return 0


def validate_dataset(name: str) -> list[str]:
    entry = REGISTRY[name]
    problems = entry.validate()
    seen: dict[str, str] = {}
    for split in entry.splits:
        ds = load_dataset(name, split)
        if ds.class_names != entry.class_names:
            problems.append(f"{split}: class names differ from the registry entry")
        counts = torch.bincount(ds.labels, minlength=len(entry.class_names))
        if (counts == 0).any():
            problems.append(f"{split}: classes without examples: "
                            f"{[entry.class_names[i] for i in (counts == 0).nonzero().flatten().tolist()]}")
        if ds.images.min() < 0 or ds.images.max() > 1:
            problems.append(f"{split}: pixel values outside [0, 1]")
        for img in ds.images:
            h = hashlib.sha1(img.numpy().tobytes()).hexdigest()
            if h in seen and seen[h] != split:
                problems.append(f"splits {seen[h]!r} and {split!r} share an image")
                break
            seen[h] = split
    return problems


def cmd_datasets(args) -> int:
    if args.action == "list":
        for name, e in REGISTRY.items():
            print(f"{name:16s} {len(e.class_names):3d} classes  splits={','.join(e.splits)}  "
                  f"loader={e.loader_kind}  license: {e.license_note}")
        return 0
    names = args.names or list(REGISTRY)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise DatasetError(f"unknown datasets {unknown}; registered: {sorted(REGISTRY)}")
    failed = False
    for name in names:
        problems = validate_dataset(name)
        print(f"{name}: {'ok' if not problems else '; '.join(problems)}")
        failed |= bool(problems)
    return 1 if failed else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmcoa", description="Multimodal contrastive adversarial training toolkit")
    parser.add_argument("--version", action="version", version=TOOL_VERSION)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, checkpoint_help):
        p.add_argument("--config", required=True, help="experiment YAML")
        p.add_argument("--seed", type=int, default=None, help="override the root seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--checkpoint", action="append", default=[], help=checkpoint_help)
        p.add_argument("--device", default=None)

    common(sub.add_parser("train", help="fine-tune with the configured method"), "starting weights (optional)")
    common(sub.add_parser("attack", help="write an adversarial corpus"), "victim checkpoint")
    common(sub.add_parser("eval", help="clean and robust accuracy"), "checkpoint to evaluate (repeatable)")
    p = sub.add_parser("interpolate", help="sweep weight interpolation between two checkpoints")
    common(p, "base checkpoint, then fine-tuned checkpoint")
    p.add_argument("--grid", default=None, help="comma-separated lambdas, e.g. 0,0.25,0.5,0.75,1")
    p = sub.add_parser("report", help="merge run artifacts into one summary")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true", help="merge artifacts with different config hashes")
    p = sub.add_parser("datasets", help="inspect the dataset registry")
    p.add_argument("action", choices=("list", "validate"))
    p.add_argument("names", nargs="*")
    return parser


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "interpolate": cmd_interpolate,
            "report": cmd_report, "datasets": cmd_datasets}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ReportError, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
