"""Command-line entry point: ``xrec <command> [flags]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from dataclasses import asdict
from pathlib import Path

from .emissions import DISCREPANCY_NOTE, GPU_PROFILES, EmissionsParams, emissions_estimate

log = logging.getLogger("xrec")

COMMANDS = ("gen-data", "train-gnn", "train-adapter", "generate", "evaluate", "report", "emissions")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files and run_config
# ---------------------------------------------------------------------------

def read_kv(path) -> dict[str, str]:
    """Flat ``key = value`` file; blank lines and ``#`` comments ignored."""
    out = {}
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file {path} not found")
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_kv(path, values: dict) -> None:
    lines = [f"{k} = {_fmt(v)}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    return "" if v is None else str(v)


def update_run_config(run_dir: Path, values: dict) -> None:
    path = run_dir / "run_config"
    merged = read_kv(path) if path.exists() else {}
    merged.update({k: _fmt(v) for k, v in values.items()})
    write_kv(path, merged)


def _coerce(action: argparse.Action, text: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise CliError(f"config key {action.dest!r} expects true/false, got {text!r}")
        return low in ("true", "1", "yes")
    conv = action.type or str
    try:
        value = conv(text)
    except (TypeError, ValueError):
        raise CliError(f"config key {action.dest!r}: cannot parse {text!r}") from None
    if action.choices is not None and value not in action.choices:
        raise CliError(f"config key {action.dest!r}: {value!r} is not one of {list(action.choices)}")
    return value


def apply_config_file(sub: argparse.ArgumentParser, path) -> None:
    """Use a key-value file as defaults for ``sub`` so command-line flags still win."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, text in read_kv(path).items():
        if key not in actions:
            raise CliError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(actions))}")
        defaults[key] = _coerce(actions[key], text)
    sub.set_defaults(**defaults)
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False


def effective(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "config", "command", "verbose")}


# ---------------------------------------------------------------------------
# timing and emissions
# ---------------------------------------------------------------------------

def log_emissions(path: Path, command: str, profile: str, seconds: float) -> float:
    kg = emissions_estimate(EmissionsParams.for_profile(profile, max(seconds, 1e-9) / 3600.0))
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["command", "gpu_profile", "seconds", "kg_co2e"])
        w.writerow([command, profile, f"{seconds:.3f}", f"{kg:.9f}"])
    return kg


def _timed(args, run_dir: Path, fn):
    t0 = time.perf_counter()
    result = fn()
    seconds = time.perf_counter() - t0
    target = Path(args.emissions_log) if args.emissions_log else run_dir / "emissions.csv"
    kg = log_emissions(target, args.command, args.gpu_profile, seconds)
    log.info("%s took %.1fs (%.6f kg CO2e on %s)", args.command, seconds, kg, args.gpu_profile)
    return result


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"{what} not found at {path}")
    return path


def cmd_gen_data(args) -> None:
    from .datagen import WorldConfig, generate_world, write_dataset

    cfg = WorldConfig(num_users=args.num_users, num_items=args.num_items, num_topics=args.num_topics,
                      interactions_per_user=args.interactions_per_user, seed=args.seed,
                      concentration=args.concentration, profile_signal=args.profile_signal)
    world = generate_world(cfg)
    write_dataset(args.out, world.samples, world.profiles)
    print(f"wrote {len(world.samples)} samples to {args.out}")


def _load_data(path):
    from .datagen import load_dataset

    _need(Path(path), "dataset directory")
    return load_dataset(path)


def _id_space(samples, profiles):
    nu = max([*profiles.users, *(s.uid for s in samples)], default=-1) + 1
    ni = max([*profiles.items, *(s.iid for s in samples)], default=-1) + 1
    return nu, ni


def cmd_train_gnn(args) -> None:
    from .datagen import train_graph
    from .graph import GnnConfig, InteractionGraph, k_core_filter, train_gnn
    from .pipeline import save_embeddings

    samples, profiles = _load_data(args.data)
    run = Path(args.run)
    run.mkdir(parents=True, exist_ok=True)
    nu, ni = _id_space(samples, profiles)
    graph = train_graph(samples, nu, ni)
    if args.k_core:
        core = k_core_filter(graph, args.k_core)
        log.info("k-core(%d) keeps %d of %d interactions", args.k_core, core.num_edges, graph.num_edges)
        # ids stay in the original space so lookups by dataset ids keep working
        graph = InteractionGraph(nu, ni, [(int(core.user_ids[u]), int(core.item_ids[i])) for u, i in core.edges])
    cfg = GnnConfig(num_layers=args.layers, embed_dim=args.dim, learning_rate=args.lr, l2_lambda=args.l2,
                    epochs=args.epochs, seed=args.seed)
    table = _timed(args, run, lambda: train_gnn(graph, cfg))
    save_embeddings(run / "gnn_embeddings.bin", table)
    update_run_config(run, {f"gnn_{k}": v for k, v in asdict(cfg).items()} | {"data": args.data})
    print(f"wrote {run / 'gnn_embeddings.bin'}")


def cmd_train_adapter(args) -> None:
    from .lm import ToyLmConfig, load_lm, save_lm
    from .pipeline import (AblationFlags, TrainConfig, load_embeddings, make_adapters,
                           pretrain_explainer_lm, train_adapter)
    from .adapter import save_adapters

    samples, profiles = _load_data(args.data)
    run = Path(args.run)
    run.mkdir(parents=True, exist_ok=True)
    emb_path = Path(args.embeddings) if args.embeddings else run / "gnn_embeddings.bin"
    table = load_embeddings(_need(emb_path, "GNN embeddings (run train-gnn first)"))
    flags = AblationFlags.from_name(args.ablation)
    train = [s for s in samples if s.split == "train"]
    if not train:
        raise CliError("dataset has no training samples")
    cfg = TrainConfig(learning_rate=args.lr, weight_decay=args.weight_decay, seed=args.seed,
                      early_stopping=args.early_stopping)

    def work():
        if args.lm:
            lm = load_lm(_need(Path(args.lm), "LM checkpoint"))
        else:
            lm_cfg = ToyLmConfig(seed=args.seed, max_epochs=args.lm_epochs)
            lm = pretrain_explainer_lm(train, profiles, table, lm_cfg, warm_up=not args.no_warm_up)
        adapters = make_adapters(table.dim, lm.config.d_lm, seed=args.seed, num_experts=args.experts,
                                 dropout_rate=args.dropout, noise_factor=args.noise)
        return lm, train_adapter(lm, adapters, table, train, profiles, cfg, flags)

    lm, result = _timed(args, run, work)
    if args.lm and Path(args.lm).resolve() != (run / "lm.bin").resolve():
        shutil.copyfile(args.lm, run / "lm.bin")
    elif not args.lm:
        save_lm(run / "lm.bin", lm)
    save_adapters(run / "adapters.bin", result.adapters, extra={"ablation": args.ablation})
    with open(run / "loss_trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "loss", "atl"])
        for idx, loss, atl in result.trace:
            w.writerow([idx, repr(loss), repr(atl)])
    update_run_config(run, {
        "ablation": args.ablation, **asdict(flags), "learning_rate": cfg.learning_rate,
        "weight_decay": cfg.weight_decay, "epochs": cfg.epochs, "batch_size": cfg.batch_size,
        "seed": cfg.seed, "early_stopping": cfg.early_stopping, "stopped_early": result.stopped_early,
        "samples_processed": len(result.trace), "lm_digest": lm.frozen_digest,
        "num_experts": args.experts, "dropout_rate": args.dropout, "noise_factor": args.noise,
    })
    print(f"trained adapters on {len(result.trace)} samples; final ATL {result.trace[-1][2]:.4f}")


def _split(samples, name: str, fraction: float, seed: int):
    from .pipeline import subsample

    chosen = [s for s in samples if s.split == name]
    if not chosen:
        raise CliError(f"dataset has no {name!r} samples")
    return subsample(chosen, fraction, seed)


def cmd_generate(args) -> None:
    from .adapter import load_adapters
    from .lm import load_lm
    from .pipeline import AblationFlags, generate_explanations, load_embeddings

    samples, profiles = _load_data(args.data)
    run = Path(args.run)
    lm = load_lm(_need(run / "lm.bin", "LM checkpoint"))
    adapters, extra = load_adapters(_need(run / "adapters.bin", "adapter checkpoint"))
    table = load_embeddings(_need(run / "gnn_embeddings.bin", "GNN embeddings"))
    ablation = args.ablation or extra.get("ablation", "full")
    flags = AblationFlags.from_name(ablation)
    chosen = _split(samples, args.split, args.fraction, args.seed)
    gens = _timed(args, run, lambda: generate_explanations(
        lm, adapters, table, chosen, profiles, flags, mode=args.decode, seed=args.seed,
        max_new=args.max_new, workers=args.workers))
    out = Path(args.out) if args.out else run / "generated.jsonl"
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for g in gens:
            rec = {"uid": g.sample.uid, "iid": g.sample.iid, "generated": g.text}
            if g.error:
                rec["error"] = g.error
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    update_run_config(run, {"generate_ablation": ablation, "generate_split": args.split,
                            "generate_fraction": args.fraction, "decode": args.decode})
    failed = sum(not g.ok for g in gens)
    print(f"wrote {len(gens)} generations to {out}" + (f" ({failed} failed)" if failed else ""))


def cmd_evaluate(args) -> None:
    from .datagen import read_jsonl
    from .evaluation import JudgeConfig, aggregate, render_report, score_generations, write_rows
    from .lm import load_lm
    from .pipeline import subsample

    samples, _ = _load_data(args.data)
    truth = {(s.uid, s.iid): s.explanation for s in samples}
    recs = list(read_jsonl(_need(Path(args.generated), "generations file"), ("uid", "iid", "generated")))
    for r in recs:
        if (int(r["uid"]), int(r["iid"])) not in truth:
            raise CliError(f"generation for ({r['uid']}, {r['iid']}) has no ground truth in {args.data}")
    recs = subsample(recs, args.fraction, args.seed)
    triples = [(f"{r['uid']}:{r['iid']}", r["generated"], truth[(int(r["uid"]), int(r["iid"]))]) for r in recs]
    lm = load_lm(_need(Path(args.lm), "LM checkpoint")) if args.lm else None
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    if lm is None:
        metrics = [m for m in metrics if m == "judge"]
    judge = JudgeConfig(endpoint=args.judge_endpoint, model=args.judge_model, stub_mode=not args.live_judge,
                        timeout=args.judge_timeout, max_retries=args.judge_retries,
                        concurrency=args.judge_concurrency)
    external = None
    if args.bleurt:
        external = {}
        with open(_need(Path(args.bleurt), "BLEURT scores file"), newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                external[row["sample_id"]] = float(row["value"])
    rows = score_generations(triples, lm, judge, metrics=metrics, external=external)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "rows.csv", rows)
    texts = [c for _, c, _ in triples if c is not None]
    report = aggregate(rows, name=args.name, texts=texts)
    (out / "report.md").write_text(render_report([report]), encoding="utf-8")
    print(f"scored {len(triples)} samples; wrote {out / 'rows.csv'} and {out / 'report.md'}")


def cmd_report(args) -> None:
    from .evaluation import aggregate, read_rows, render_report

    reports = []
    for spec in args.rows:
        name, _, path = spec.rpartition("=")
        path = Path(path)
        name = name or path.parent.name
        rows = read_rows(_need(path, "rows file"))
        texts = None
        gen = path.parent / "generated.jsonl"
        if gen.exists():
            from .datagen import read_jsonl
            texts = [r["generated"] for r in read_jsonl(gen, ("generated",)) if r["generated"] is not None]
        reports.append(aggregate(rows, name=name, texts=texts))
    doc = render_report(reports, fmt=args.format)
    if args.out:
        Path(args.out).write_text(doc, encoding="utf-8")
    print(doc, end="")


def cmd_emissions(args) -> None:
    params = EmissionsParams(hours=args.hours, power_kw=GPU_PROFILES[args.gpu_profile],
                             carbon_intensity=args.carbon_intensity, pue=args.pue)
    print(f"{emissions_estimate(params):.6f} kg CO2e")
    if args.note:
        print(DISCREPANCY_NOTE)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _positive_fraction(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError("fraction must be in (0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    from .pipeline import VARIANTS

    p = argparse.ArgumentParser(prog="xrec", description="Synthetic explainable-recommendation pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value file supplying defaults for any flag")
        sp.set_defaults(func=func)
        return sp

    def timing(sp):
        sp.add_argument("--gpu-profile", choices=sorted(GPU_PROFILES), default="h100")
        sp.add_argument("--emissions-log", help="CSV to append to (default: <run>/emissions.csv)")

    sp = add("gen-data", cmd_gen_data, "generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--num-users", type=int, default=200)
    sp.add_argument("--num-items", type=int, default=200)
    sp.add_argument("--num-topics", type=int, default=8)
    sp.add_argument("--interactions-per-user", type=int, default=15)
    sp.add_argument("--concentration", type=float, default=0.05)
    sp.add_argument("--profile-signal", type=float, default=0.5)

    sp = add("train-gnn", cmd_train_gnn, "train LightGCN embeddings on the training split")
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--dim", type=int, default=32)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--l2", type=float, default=1e-4)
    sp.add_argument("--epochs", type=int, default=400, help="cap; training stops earlier on a loss plateau")
    sp.add_argument("--k-core", type=int, default=0, help="filter the training graph to its k-core first")
    sp.add_argument("--seed", type=int, default=0)
    timing(sp)

    sp = add("train-adapter", cmd_train_adapter, "train the MoE adapters against a frozen LM")
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--embeddings", help="GNN embeddings (default: <run>/gnn_embeddings.bin)")
    sp.add_argument("--lm", help="frozen LM checkpoint; pretrained from the training split when omitted")
    sp.add_argument("--lm-epochs", type=int, default=12)
    sp.add_argument("--no-warm-up", action="store_true", help="pretrain the LM with uninformative slots")
    sp.add_argument("--ablation", choices=list(VARIANTS), default="full")
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--weight-decay", type=float, default=1e-6)
    sp.add_argument("--experts", type=int, default=8)
    sp.add_argument("--dropout", type=float, default=0.2)
    sp.add_argument("--noise", type=float, default=0.01)
    sp.add_argument("--early-stopping", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    timing(sp)

    sp = add("generate", cmd_generate, "generate explanations for a split")
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--out", help="JSONL output (default: <run>/generated.jsonl)")
    sp.add_argument("--split", choices=("train", "valid", "test"), default="test")
    sp.add_argument("--fraction", type=_positive_fraction, default=1.0)
    sp.add_argument("--ablation", choices=list(VARIANTS), help="default: the ablation the adapters were trained with")
    sp.add_argument("--decode", choices=("greedy", "temperature"), default="greedy")
    sp.add_argument("--max-new", type=int, default=40)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    timing(sp)

    sp = add("evaluate", cmd_evaluate, "score generations against ground truth")
    sp.add_argument("--data", required=True)
    sp.add_argument("--generated", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--lm", help="frozen LM for embedding and likelihood metrics")
    sp.add_argument("--name", default="run")
    sp.add_argument("--metrics", default="judge,embed_p,embed_r,embed_f1,likelihood")
    sp.add_argument("--fraction", type=_positive_fraction, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--live-judge", action="store_true", help="call a chat-completion endpoint instead of the stub")
    sp.add_argument("--judge-endpoint", default="http://localhost:8000/v1")
    sp.add_argument("--judge-model", default="gpt-3.5-turbo")
    sp.add_argument("--judge-timeout", type=float, default=30.0)
    sp.add_argument("--judge-retries", type=int, default=3)
    sp.add_argument("--judge-concurrency", type=int, default=4)
    sp.add_argument("--bleurt", help="CSV of externally computed scores (sample_id,value)")

    sp = add("report", cmd_report, "render a comparison table from rows.csv files")
    sp.add_argument("rows", nargs="+", help="NAME=path/to/rows.csv (NAME defaults to the parent directory)")
    sp.add_argument("--format", choices=("markdown", "text"), default="markdown")
    sp.add_argument("--out")

    sp = add("emissions", cmd_emissions, "estimate kg CO2e for a runtime")
    sp.add_argument("--hours", type=float, required=True)
    sp.add_argument("--gpu-profile", choices=sorted(GPU_PROFILES), default="h100")
    sp.add_argument("--carbon-intensity", type=float, default=0.22)
    sp.add_argument("--pue", type=float, default=1.2)
    sp.add_argument("--note", action="store_true", help="also print the published-table discrepancy note")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        # a first pass finds --config so the file can seed the subcommand's defaults
        if argv and argv[0] in COMMANDS and "--config" in argv[1:]:
            k = argv.index("--config")
            if k + 1 >= len(argv):
                parser.error("--config needs a path")
            sub = parser._subparsers._group_actions[0].choices[argv[0]]
            apply_config_file(sub, argv[k + 1])
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"xrec: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
        if getattr(args, "run", None):
            # echo every effective setting, namespaced by command
            update_run_config(Path(args.run), {f"{args.command.replace('-', '_')}.{k}": v
                                               for k, v in effective(args).items()})
    except CliError as exc:
        print(f"xrec: error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"xrec: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
