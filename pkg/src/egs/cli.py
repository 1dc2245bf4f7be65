"""``egs`` command line: synth, train, embed, eval, selfcheck.

Exit codes: 0 success, 1 validation error (bad flags or config), 2 runtime or
data error (missing files, corrupt containers, id mismatches).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .errors import ConfigError, DomainError, EGSError

log = logging.getLogger("egs")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; here 2 means a runtime failure, so route usage errors to 1
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _echo(path: Path, payload: dict) -> None:
    from .fsutil import atomic_write_text
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _args_dict(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
            if k not in ("func", "inject_fault")}


def _dir_is_nonempty(path: Path) -> bool:
    return path.exists() and (not path.is_dir() or any(path.iterdir()))


# --- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import SyntheticSceneSpec, generate_synthetic
    out = Path(args.out)
    if _dir_is_nonempty(out) and not args.force:
        print(f"error: {out} exists and is not empty (use --force to overwrite)", file=sys.stderr)
        return EXIT_INVALID
    if args.force and out.exists():
        import shutil
        shutil.rmtree(out)
    try:
        spec = SyntheticSceneSpec(classes=args.classes, side=args.side, seed=args.seed,
                                  drone_train=args.drone_train, drone_test=args.drone_test)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    manifest = generate_synthetic(spec, out)
    print(f"wrote {len(manifest)} classes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import desk_config, load_config
    from .data import scan_dataset
    from .plotting import plot_loss_curve, read_loss_log
    from .trainer import train

    config = load_config(args.config) if args.config else desk_config()
    if args.max_steps is not None:
        config.train.max_steps = args.max_steps
        config.validate()
    manifest = scan_dataset(args.data, "train")
    for w in manifest.warnings:
        print(f"warning: {w}", file=sys.stderr)
    t0 = time.perf_counter()
    every = max(1, args.log_every)

    def progress(step, steps, loss):
        if step == 1 or step % every == 0 or step == steps:
            total, nce, ce = loss.values()
            print(f"{step}/{steps}\ttotal={total:.4f}\tinfonce={nce:.4f}\tce={ce:.4f}\t"
                  f"{time.perf_counter() - t0:.1f}s", flush=True)

    result = train(manifest, config, out_dir=args.out, resume=args.resume, progress=progress)
    out = Path(args.out)
    rows = read_loss_log(out / "loss.log")
    if rows:
        plot_loss_curve(rows, out / "loss_curve.png")
    last = result.checkpoints[-1] if result.checkpoints else None
    print(f"final checkpoint: {last}" if last else "no steps run")
    return EXIT_OK


def cmd_embed(args) -> int:
    from .data import scan_dataset
    from .pipeline import embed_view
    from .retrieval import write_embeddings
    from .trainer import load_checkpoint, model_from_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    model, config = model_from_checkpoint(ckpt)
    manifest = scan_dataset(args.data, args.split)
    side = args.side or config.train.image_side
    ids, emb = embed_view(model, manifest, args.view, side)
    out = Path(args.out)
    write_embeddings(out, ids, emb)
    _echo(out.with_name(out.name + ".config.json"), {"command": "embed", "args": _args_dict(args),
                                                    "model": config.to_dict(), "count": int(len(ids))})
    print(f"wrote {len(ids)} {args.view} embeddings (dim {emb.shape[1]}) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .errors import DataError
    from .plotting import plot_recall_curve
    from .retrieval import METRIC_NAMES, GalleryIndex, evaluate, read_embeddings, write_metrics

    qids, Q = read_embeddings(args.query_emb)
    gids, G = read_embeddings(args.gallery_emb)
    if len(Q) == 0:
        raise DataError("query file holds no embeddings")
    report = evaluate(Q, qids, GalleryIndex(G, gids), args.direction)
    out = Path(args.out)
    write_metrics(out, report)
    _echo(out.with_name(out.name + ".config.json"), {"command": "eval", "args": _args_dict(args)})
    if not args.no_plot:
        plot_recall_curve(report, out.with_name(out.stem + "_recall.png"))
    means = report.means
    print("\t".join(("direction", "queries", "gallery") + METRIC_NAMES))
    print("\t".join([report.direction, str(len(report.query_ids)), str(report.gallery_size)]
                    + [f"{means[m]:.4f}" for m in METRIC_NAMES]))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from . import selfcheck

    faults = [args.inject_fault] if args.inject_fault else []
    t0 = time.perf_counter()

    def show(res):
        status = "PASS" if res.passed else "FAIL"
        print(f"{status}\t{res.suite}\t{res.name}\t{res.detail}\t{res.seconds:.2f}s", flush=True)

    results = selfcheck.run(faults=faults, report=show)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        print("failed suites: " + ", ".join(sorted({r.suite for r in failed})))
        return EXIT_RUNTIME
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="egs", description="Rotation-equivariant cross-view retrieval at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic paired drone/satellite dataset")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--classes", type=int, default=32)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--drone-train", type=int, default=4, help="drone images per class in train/")
    s.add_argument("--drone-test", type=int, default=2, help="held-out drone images per class in test/")
    s.add_argument("--force", action="store_true", help="replace an existing output directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on root/train and write checkpoints + loss.log")
    t.add_argument("--config", type=Path, help="JSON config (defaults to the built-in desk config)")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in --out")
    t.add_argument("--max-steps", type=int, help="override train.max_steps")
    t.add_argument("--log-every", type=int, default=20)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="export EGSE embeddings for one view of a split")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--view", required=True, choices=("drone", "satellite"))
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--side", type=int, help="resize side (defaults to the training side)")
    e.add_argument("--out", required=True, type=Path)
    e.set_defaults(func=cmd_embed)

    v = sub.add_parser("eval", help="rank a gallery for every query and report AP / Recall@K")
    v.add_argument("--query-emb", required=True, type=Path)
    v.add_argument("--gallery-emb", required=True, type=Path)
    v.add_argument("--out", required=True, type=Path, help="metrics JSON path")
    v.add_argument("--direction", default="drone->satellite", choices=("drone->satellite", "satellite->drone"))
    v.add_argument("--no-plot", action="store_true", help="skip the recall-curve PNG")
    v.set_defaults(func=cmd_eval)

    c = sub.add_parser("selfcheck", help="run every property suite")
    c.add_argument("--inject-fault", choices=("rotation",), help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_selfcheck)
    return p


def _limit_threads():
    raw = os.environ.get("EGS_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"EGS_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"EGS_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        limiter = _limit_threads()
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (EGSError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
