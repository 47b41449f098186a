"""Command-line entry point: ``ria <subcommand> [--config FILE] [flags]``.

Precedence for every setting: built-in defaults < ``--config`` file < flags
(named flags and repeated ``--set section.key=value``). Every run writes its
primary artifact and a JSON manifest next to it; failures print one JSON
error record on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .config import RunConfig, config_digest, load_config, tiny_config
from .errors import ContractError, RiaError

log = logging.getLogger("ria")

EXIT_FAILURE = 1


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    code_version: str = __version__
    started: str = ""
    finished: str = ""
    argv: list[str] = field(default_factory=list)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- argument parsing ------------------------------------------------------------

def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _assignment(text: str) -> tuple[str, str, str]:
    key, sep, value = text.partition("=")
    section, dot, name = key.partition(".")
    if not sep or not dot or section not in ("model", "train", "data"):
        raise argparse.ArgumentTypeError(f"expected section.key=value with section model/train/data, got {text!r}")
    return section, name.strip(), value


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", type=Path, help="configuration file ([model], [train], [data] sections)")
    p.add_argument("--set", dest="assignments", action="append", type=_assignment, default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="model/training seed (overrides config)")
    p.add_argument("--precision", choices=("float32", "float64"), help="numeric precision mode")
    p.add_argument("--out", type=Path, default=Path(out_default), help=f"primary artifact path (default {out_default})")
    p.add_argument("--manifest", type=Path, help="manifest path (default: <out>.manifest.json)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _data_flags(p: argparse.ArgumentParser, required: bool = False) -> None:
    p.add_argument("--data", type=Path, required=required,
                   help="impression log (JSON lines, optionally gzip)" + ("" if required else "; generated from [data] if absent"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ria", description="Ranking-infused listwise CTR toolkit.")
    parser.add_argument("--version", action="version", version=f"ria {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", help="write a synthetic impression log")
    _common(p, "impressions.jsonl.gz")
    p.add_argument("--n-requests", type=int, help="number of requests")
    p.add_argument("--gamma", type=float, help="planted context-effect strength")
    p.add_argument("--noise-seed", type=int, help="generator seed")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common(p, "model.ckpt")
    _data_flags(p)
    p.add_argument("--epochs", type=int, help="maximum epochs")
    p.add_argument("--layers", type=int, help="LMH depth I")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch-size", type=int, help="records per mini-batch")
    p.add_argument("--report", type=Path, help="per-epoch report path (default: <out>.report.txt)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a log")
    _common(p, "eval.txt")
    _data_flags(p, required=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint written by train")
    p.add_argument("--pooling", choices=("global", "grouped"), default="global", help="AUC pooling")

    p = sub.add_parser("depth-sweep", help="train one model per (LMH depth, seed)")
    _common(p, "sweep.tsv")
    _data_flags(p)
    p.add_argument("--depths", type=_csv_ints, default=[1, 2, 4], help="comma-separated LMH depths")
    p.add_argument("--seeds", type=_csv_ints, default=[0, 1, 2, 3, 4], help="comma-separated seeds")
    p.add_argument("--epochs", type=int, help="maximum epochs per run")
    p.add_argument("--plot", type=Path, help="plot path (default: <out> with .png suffix)")

    p = sub.add_parser("select", help="pick the reward-maximizing target list for requests")
    _common(p, "selection.tsv")
    _data_flags(p, required=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint written by train")
    p.add_argument("--request-id", action="append", default=[], help="request to rerank (repeatable; default: first)")
    p.add_argument("--budget", type=int, default=10_000, help="maximum lists scored per request")

    p = sub.add_parser("cache-sim", help="simulate rank-stage caching and rerank-stage reuse")
    _common(p, "cache-report.txt")
    _data_flags(p)
    p.add_argument("--checkpoint", type=Path, help="checkpoint (default: freshly initialized model)")
    p.add_argument("--mode", choices=("cached", "recompute", "verify"), default="verify", help="rerank route")
    p.add_argument("--requests", type=int, default=100, help="requests to simulate")
    p.add_argument("--budget", type=int, default=64, help="target lists scored per request")
    p.add_argument("--ttl", type=float, default=60.0, help="cache entry lifetime in seconds")
    p.add_argument("--capacity", type=int, help="cache capacity in entries")
    p.add_argument("--dump", type=Path, help="write the cache inspection dump here")

    p = sub.add_parser("sparsity", help="co-exposure counts of item k-tuples")
    _common(p, "sparsity.tsv")
    _data_flags(p)
    p.add_argument("--k-max", type=int, help="largest tuple size (default m)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the joint loss")
    _common(p, "gradcheck.txt")
    p.add_argument("--probes", type=int, default=200, help="number of sampled parameters")
    p.add_argument("--tolerance", type=float, default=1e-5, help="pass threshold on max relative error")
    return parser


# -- helpers ---------------------------------------------------------------------

def _run_config(args: argparse.Namespace, model_flags: dict[str, Any] | None = None,
                data_flags: dict[str, Any] | None = None) -> RunConfig:
    model = {"seed": args.seed, "precision": args.precision, **(model_flags or {})}
    data = dict(data_flags or {})
    for section, key, value in args.assignments:
        (data if section == "data" else model)[key] = value
    return load_config(args.config, model, data)


def _records(args: argparse.Namespace, run: RunConfig, manifest: RunManifest) -> list:
    from .data import generate_synthetic, load_impressions

    if getattr(args, "data", None) is not None:
        manifest.inputs["data"] = str(args.data)
        return list(load_impressions(args.data))
    manifest.inputs["data"] = f"synthetic:{config_digest(run.data.to_dict())}"
    return list(generate_synthetic(run.data))


def _write(path: Path, text: str, manifest: RunManifest, key: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    manifest.outputs[key] = str(path)


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(args, manifest: RunManifest) -> str:
    from .data import empirical_ctr, generate_synthetic, write_impressions

    run = _run_config(args, data_flags={"n_requests": args.n_requests, "gamma": args.gamma,
                                        "noise_seed": args.noise_seed})
    manifest.config_digest = config_digest(run.data.to_dict())
    manifest.seed = run.data.noise_seed
    records = list(generate_synthetic(run.data))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    count = write_impressions(args.out, records)
    manifest.outputs["data"] = str(args.out)
    return f"records={count}\nctr={empirical_ctr(records):.10f}\nout={args.out}\n"


def cmd_train(args, manifest: RunManifest) -> str:
    from .train import train

    run = _run_config(args, {"epochs": args.epochs, "I": args.layers, "learning_rate": args.lr,
                             "batch_size": args.batch_size})
    manifest.config_digest = run.model.digest()
    manifest.seed = run.model.seed
    records = _records(args, run, manifest)
    result = train(records, run.model)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_bytes(result.checkpoint)
    manifest.outputs["checkpoint"] = str(args.out)
    lines = [e.to_text() for e in result.epochs]
    if result.initial_val is not None:
        lines.insert(0, result.initial_val["listwise"].to_text("initial_val_listwise_"))
    lines.append(f"best_epoch={result.best_epoch}")
    text = "\n".join(lines) + "\n"
    _write(args.report or args.out.with_name(args.out.name + ".report.txt"), text, manifest, "report")
    return text


def cmd_eval(args, manifest: RunManifest) -> str:
    from .checkpoint import load_checkpoint
    from .data import load_impressions
    from .model import collate
    from .train import evaluate_model

    model = load_checkpoint(args.checkpoint)
    manifest.inputs.update(checkpoint=str(args.checkpoint), data=str(args.data))
    manifest.config_digest = model.cfg.digest()
    manifest.seed = model.cfg.seed
    reports = evaluate_model(model, collate(list(load_impressions(args.data)), model.cfg), args.pooling)
    text = reports["listwise"].to_text() + "\n" + reports["pointwise"].to_text("pointwise_") + "\n"
    _write(args.out, text, manifest, "report")
    return text


def cmd_depth_sweep(args, manifest: RunManifest) -> str:
    from .data import split_by_request
    from .train import depth_sweep, plot_sweep

    run = _run_config(args, {"epochs": args.epochs})
    manifest.config_digest = config_digest({"model": run.model.to_dict(), "data": run.data.to_dict(),
                                            "depths": args.depths, "seeds": args.seeds})
    manifest.seed = run.model.seed
    train_recs, val_recs = split_by_request(_records(args, run, manifest), run.model.val_fraction)
    result = depth_sweep(train_recs, val_recs, run.model, args.depths, args.seeds)
    text = result.to_text()
    _write(args.out, text, manifest, "table")
    plot = args.plot or args.out.with_suffix(".png")
    if result.rows:
        plot_sweep(result, plot)
        manifest.outputs["plot"] = str(plot)
    return text


def cmd_select(args, manifest: RunManifest) -> str:
    from .checkpoint import load_checkpoint
    from .data import load_impressions
    from .selection import enumerate_target_lists, select_best_list

    model = load_checkpoint(args.checkpoint)
    manifest.inputs.update(checkpoint=str(args.checkpoint), data=str(args.data))
    manifest.config_digest = model.cfg.digest()
    manifest.seed = model.cfg.seed
    records = {r.request_id: r for r in load_impressions(args.data)}
    wanted = args.request_id or list(records)[:1]
    lines = ["request_id\tlists\titems\titem_ids\tpctr\treward"]
    for rid in wanted:
        if rid not in records:
            raise ContractError(f"request {rid!r} not in {args.data}", "cli")
        rec = records[rid]
        lists = enumerate_target_lists(len(rec.candidates), model.cfg.m, args.budget, model.cfg.seed)
        best = select_best_list(rec, lists, model)
        lines.append("\t".join([rid, str(len(lists)), ",".join(map(str, best.items)),
                                ",".join(map(str, best.item_ids)),
                                ",".join(f"{p:.10f}" for p in best.per_position_pctr), f"{best.reward:.10f}"]))
    text = "\n".join(lines) + "\n"
    _write(args.out, text, manifest, "selection")
    return text


def cmd_cache_sim(args, manifest: RunManifest) -> str:
    from .cache import ReprCache
    from .checkpoint import load_checkpoint
    from .model import RiaModel
    from .pipeline import PipelineRun, pipeline_report
    from .selection import enumerate_target_lists

    run = _run_config(args, data_flags={"n_requests": args.requests})
    if args.checkpoint is not None:
        model = load_checkpoint(args.checkpoint)
        manifest.inputs["checkpoint"] = str(args.checkpoint)
    else:
        model = RiaModel(run.model)
    manifest.config_digest = model.cfg.digest()
    manifest.seed = model.cfg.seed
    records = _records(args, run, manifest)
    records = records[: args.requests]
    cache = ReprCache(ttl=args.ttl, capacity=args.capacity)
    pipe = PipelineRun()
    for rec in records:
        pipe.precompute(rec, model, cache)
    for rec in records:
        lists = enumerate_target_lists(len(rec.candidates), model.cfg.m, args.budget, model.cfg.seed)
        pipe.rerank(rec, lists, model, cache, args.mode, fallback=args.mode == "cached")
    text = f"mode={args.mode}\n" + pipeline_report(pipe, cache).to_text()
    _write(args.out, text, manifest, "report")
    if args.dump is not None:
        _write(args.dump, cache.dump(), manifest, "dump")
    return text


def cmd_sparsity(args, manifest: RunManifest) -> str:
    from .data import sparsity_report

    run = _run_config(args)
    manifest.config_digest = config_digest(run.data.to_dict())
    manifest.seed = run.data.noise_seed
    records = _records(args, run, manifest)
    k_max = args.k_max or (len(records[0].target_page) if records else run.data.m)
    rows = sparsity_report(records, k_max)
    lines = ["k\tdistinct_tuples\toccurrences\tmean_count"]
    lines += [f"{r.k}\t{r.distinct}\t{r.occurrences}\t{r.mean_count:.10f}" for r in rows]
    text = "\n".join(lines) + "\n"
    _write(args.out, text, manifest, "table")
    return text


def cmd_gradcheck(args, manifest: RunManifest) -> str:
    from .gradcheck import model_gradcheck

    if args.config is None and not args.assignments:
        cfg = tiny_config(**({"seed": args.seed} if args.seed is not None else {}))
    else:
        cfg = _run_config(args).model
    if args.precision is not None:
        cfg = cfg.replace(precision=args.precision)
    manifest.config_digest = cfg.digest()
    manifest.seed = cfg.seed
    report = model_gradcheck(cfg, n_probes=args.probes, seed=cfg.seed)
    worst = report.worst()
    ok = report.max_rel_err < args.tolerance
    text = (f"probes={len(report.probes)}\nmax_rel_err={report.max_rel_err:.3e}\n"
            f"tolerance={args.tolerance:.0e}\nworst={worst.name if worst else ''}\n"
            f"status={'pass' if ok else 'fail'}\n")
    _write(args.out, text, manifest, "report")
    if not ok:
        raise ContractError(f"gradient check failed: max_rel_err={report.max_rel_err:.3e}", "ria-train")
    return text


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "depth-sweep": cmd_depth_sweep,
    "select": cmd_select,
    "cache-sim": cmd_cache_sim,
    "sparsity": cmd_sparsity,
    "gradcheck": cmd_gradcheck,
}


def error_record(exc: BaseException) -> dict[str, Any]:
    if isinstance(exc, RiaError):
        return exc.as_record()
    return {"error": type(exc).__name__, "module": "cli", "message": str(exc)}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    manifest = RunManifest(args.command, "", 0, started=_now(),
                           argv=list(argv if argv is not None else sys.argv[1:]))
    if args.config is not None:
        manifest.inputs["config"] = str(args.config)
    try:
        text = COMMANDS[args.command](args, manifest)
    except (RiaError, OSError, ValueError) as exc:
        print(json.dumps(error_record(exc), sort_keys=True), file=sys.stderr)
        return EXIT_FAILURE
    manifest.finished = _now()
    manifest.write(args.manifest or args.out.with_name(args.out.name + ".manifest.json"))
    sys.stdout.write(text)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
