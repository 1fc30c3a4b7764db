"""Command-line entry point: ``gtrec <subcommand> ...``.

Every subcommand writes a manifest next to its output holding the resolved
configuration and sha256 hashes of the files it read and wrote.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .corpus import SplitSpec, load_interactions
from .diagnostics import informativeness_data, run_informativeness
from .embeddings import encode_texts, load_embeddings, write_embeddings
from .enrichment import (
    ContextCache,
    HTTPProvider,
    MockProvider,
    ReplayProvider,
    context_key,
    enrich,
)
from .errors import GTRecError, VariantMismatch
from .evaluation import MetricsReport, evaluate, improvement_table
from .model import Checkpoint, variant_from_name
from .synth import make_world
from .training import TrainConfig, load_config, prepare_for_config, train, write_log

logger = logging.getLogger("gtrec")


# ---------------------------------------------------------------- manifest helpers


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hashes(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.iterdir()):
                if f.is_file() and not f.name.endswith("manifest.json"):
                    out[str(f)] = sha256_file(f)
        elif p.exists():
            out[str(p)] = sha256_file(p)
    return out


def write_manifest(target: Path, subcommand: str, config: dict, inputs, outputs, seeds) -> Path:
    """``<out>.manifest.json`` for a file output, ``<dir>/manifest.json`` for a directory."""
    target = Path(target)
    path = target / "manifest.json" if target.is_dir() else target.with_name(target.name + ".manifest.json")
    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "inputs": _hashes(inputs),
        "outputs": _hashes(outputs),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _data_paths(args) -> None:
    """Fill --log/--items/--contexts from --data DIR when not given explicitly."""
    data = getattr(args, "data", None)
    if not data:
        return
    d = Path(data)
    for attr, name in (("log", "interactions.jsonl"), ("items", "items.emb"), ("contexts", "contexts.emb")):
        if getattr(args, attr, None) is None and (d / name).exists():
            setattr(args, attr, str(d / name))


def _maybe_embeddings(path):
    return None if path is None else load_embeddings(path)


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    world = make_world(n_users=args.users, n_items=args.items, dim=args.dim, mode=args.mode, seed=args.seed)
    out = Path(args.out)
    paths = world.write(out, embeddings=not args.no_embeddings)
    write_manifest(out, "synth", vars_clean(args), [], list(paths.values()), {"seed": args.seed})
    print(f"wrote {len(world.log)} interactions for {args.users} users to {out}")
    return 0


def cmd_enrich(args) -> int:
    interactions = load_interactions(args.input)
    if args.provider == "mock":
        provider = MockProvider(args.seed)
    elif args.provider == "replay":
        if not args.replay:
            raise GTRecError("--provider replay needs --replay PATH")
        provider = ReplayProvider(args.replay)
    else:
        provider = HTTPProvider()
    cache = ContextCache(args.cache)
    contexts = enrich(interactions, provider, cache, bucket=args.bucket,
                      template_version=args.template, max_workers=args.workers,
                      strict=not args.lenient)
    cache.sort()
    cache.save()
    write_manifest(Path(args.cache), "enrich", vars_clean(args), [args.input], [args.cache],
                   {"seed": args.seed})
    print(f"{len(contexts)} contexts in {args.cache}")
    return 0


def _item_texts(path) -> dict[str, str]:
    texts = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            genres = row.get("genres") or []
            if isinstance(genres, str):
                genres = genres.split("|")
            texts[str(row["item_id"])] = f"{row.get('title', '')} | {', '.join(genres)}"
    return texts


def cmd_mock_embed(args) -> int:
    if args.contexts:
        cache = ContextCache(args.contexts)
        texts = {context_key(b, loc): ctx.text() for (b, loc, _), ctx in cache.entries.items()}
        source = args.contexts
    else:
        texts = _item_texts(args.items)
        source = args.items
    matrix = encode_texts(texts, dim=args.dim, seed=args.seed)
    write_embeddings(args.out, matrix)
    write_manifest(Path(args.out), "mock-embed", vars_clean(args), [source], [args.out],
                   {"seed": args.seed})
    print(f"{len(matrix)} x {matrix.dim} embeddings -> {args.out}")
    return 0


def cmd_diagnose(args) -> int:
    _data_paths(args)
    interactions = load_interactions(args.log)
    data = informativeness_data(interactions, load_embeddings(args.items), load_embeddings(args.contexts),
                                bucket=args.bucket)
    report = run_informativeness(data, ks=args.k, rng=args.seed, n_samples=args.samples,
                                 n_bootstrap=args.bootstrap)
    report.save(args.out)
    write_manifest(Path(args.out), "diagnose", vars_clean(args), [args.log, args.items, args.contexts],
                   [args.out], {"seed": args.seed})
    print(report.render_text(), end="")
    return 0


def resolve_train_config(args) -> TrainConfig:
    """Defaults, then the config file, then explicit command-line flags."""
    config = load_config(args.config) if args.config else TrainConfig()
    if args.variant is not None:
        config = replace(config, variant=variant_from_name(args.variant))
    overrides = {k: getattr(args, k) for k in ("seed", "lr", "batch_size", "patience") if getattr(args, k) is not None}
    if args.epochs is not None:
        overrides["max_epochs"] = args.epochs
    if args.split is not None:
        overrides["split"] = replace(config.split, mode=args.split)
    if args.grad_check:
        overrides["grad_check_mode"] = True
    return replace(config, **overrides)


def cmd_train(args) -> int:
    _data_paths(args)
    config = resolve_train_config(args)
    interactions = load_interactions(args.log)
    data = prepare_for_config(config, interactions, _maybe_embeddings(args.items), _maybe_embeddings(args.contexts))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(config, data, callback=lambda r: logger.info(json.dumps(r, sort_keys=True)))
    result.checkpoint.save(out / "model.ckpt")
    write_log(out / "train_log.jsonl", result.log)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    write_manifest(out, "train", config.to_dict(), [args.config, args.log, args.items, args.contexts],
                   [out], {"seed": config.seed})
    last = result.log[-1]
    print(f"trained {len(result.log)} epochs, best epoch {result.best_epoch}, "
          f"final loss {last['train_loss']:.4f}")
    return 0


def cmd_eval(args) -> int:
    _data_paths(args)
    ckpt = Checkpoint.load(args.checkpoint)
    config = TrainConfig.from_dict(ckpt.meta["config"]) if "config" in ckpt.meta else TrainConfig(
        variant=ckpt.variant, backbone=ckpt.backbone)
    if args.split is not None:
        config = replace(config, split=replace(config.split, mode=args.split))
    interactions = load_interactions(args.log)
    data = prepare_for_config(config, interactions, _maybe_embeddings(args.items), _maybe_embeddings(args.contexts))
    if tuple(data.vocab.keys) != tuple(ckpt.item_keys):
        raise VariantMismatch("checkpoint item vocabulary differs from the supplied log")
    model = ckpt.build_model(data.item_meta, data.context_table)
    name = args.name or ckpt.meta.get("variant_name") or ckpt.variant.architecture
    report = evaluate(model, data, with_context=args.with_context, ks=args.k, variant_name=name)
    report.save(args.out)
    write_manifest(Path(args.out), "eval", {**vars_clean(args), "train_config": config.to_dict()},
                   [args.checkpoint, args.log, args.items, args.contexts], [args.out], {"seed": config.seed})
    print(" ".join(f"HR@{k}={report.hr[k]:.4f} NDCG@{k}={report.ndcg[k]:.4f}" for k in report.ks))
    return 0


def cmd_report(args) -> int:
    # shell globs such as m_*.json also catch the manifests written beside metrics files
    args.metrics = [p for p in args.metrics if not p.endswith(".manifest.json")]
    reports = [MetricsReport.load(p) for p in args.metrics]
    if Path(args.baseline).exists():
        baseline = MetricsReport.load(args.baseline)
    else:
        matches = [r for r in reports if r.variant == args.baseline]
        if not matches:
            raise GTRecError(f"no metrics file with variant {args.baseline!r}")
        baseline = matches[0]
    others = [r for r in reports if r is not baseline and r.variant != baseline.variant]
    table = improvement_table(others, baseline)
    text = table.render_csv() if args.format == "csv" else table.render_text()
    Path(args.out).write_text(text)
    write_manifest(Path(args.out), "report", vars_clean(args), list(args.metrics), [args.out], {})
    print(text, end="")
    return 0


# ---------------------------------------------------------------- parser


def vars_clean(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gtrec", description="Geo-temporal context for sequential recommenders.")
    p.add_argument("--version", action="version", version=f"gtrec {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("planted", "null"), default="planted")
    s.add_argument("--users", type=int, default=200)
    s.add_argument("--items", type=int, default=100)
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-embeddings", action="store_true", help="skip writing planted embedding files")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("enrich", help="fetch one context per (time bucket, location)")
    s.add_argument("--input", required=True, help="interaction log (JSONL)")
    s.add_argument("--cache", required=True, help="context cache (JSONL), created if absent")
    s.add_argument("--bucket", choices=("day", "week"), default="day")
    s.add_argument("--provider", choices=("http", "mock", "replay"), default="mock")
    s.add_argument("--replay", help="recorded responses for --provider replay")
    s.add_argument("--template", default="v1")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--seed", type=int, default=0, help="mock provider seed")
    s.add_argument("--lenient", action="store_true", help="skip keys the provider keeps failing on")
    s.set_defaults(func=cmd_enrich)

    s = sub.add_parser("mock-embed", help="deterministic stand-in text encoder")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--contexts", help="context cache to embed")
    g.add_argument("--items", help="items JSONL (item_id, title, genres) to embed")
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mock_embed)

    s = sub.add_parser("diagnose", help="informativeness test of context vs item embeddings")
    s.add_argument("--data", help="directory holding interactions.jsonl, items.emb, contexts.emb")
    s.add_argument("--log")
    s.add_argument("--items")
    s.add_argument("--contexts")
    s.add_argument("--bucket", choices=("day", "week"), default="day")
    s.add_argument("--k", type=int, nargs="+", default=[10, 20, 50, 100])
    s.add_argument("--samples", type=int, default=1, help="context draws per user")
    s.add_argument("--bootstrap", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("train", help="train one model variant")
    s.add_argument("--config", help="TOML or JSON training config")
    s.add_argument("--data")
    s.add_argument("--log")
    s.add_argument("--items")
    s.add_argument("--contexts")
    s.add_argument("--variant", help="e.g. SASRec, M, Id+M+GT_train, Loss-[Pairwise_sem]")
    s.add_argument("--split", choices=("general", "explorer"))
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--grad-check", action="store_true", help="finite-difference check before training")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="full-catalog evaluation of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--log")
    s.add_argument("--items")
    s.add_argument("--contexts")
    s.add_argument("--split", choices=("general", "explorer"))
    ctx = s.add_mutually_exclusive_group()
    ctx.add_argument("--with-context", dest="with_context", action="store_true", default=None)
    ctx.add_argument("--without-context", dest="with_context", action="store_false")
    s.add_argument("--k", type=int, nargs="+", default=[1, 5, 10])
    s.add_argument("--name", help="variant label used in reports")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="percentage improvement table over a baseline")
    s.add_argument("--metrics", nargs="+", required=True)
    s.add_argument("--baseline", required=True, help="metrics file or variant label")
    s.add_argument("--format", choices=("text", "csv"), default="text")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GTRecError as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        if exc.hint:
            err["hint"] = exc.hint
        print(json.dumps(err), file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
