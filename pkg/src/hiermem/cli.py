"""Command line entry point (``hiermem``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import graphs
from .config import EngineConfig, ServiceConfig, load_config
from .engine import Engine, format_stats, run_bench
from .errors import HierMemError
from .harness import load_suite, report_to_csv
from .update import EpisodeRecord

logger = logging.getLogger(__name__)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hiermem", description="Hierarchical graph memory for multi-agent systems.")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--store", help="store file (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("init", help="create an empty store")

    c = sub.add_parser("commit", help="commit an episode JSON file")
    c.add_argument("episode")

    r = sub.add_parser("retrieve", help="print the retrieval result for a query as JSON")
    r.add_argument("query")
    r.add_argument("--roles", required=True, help="comma-separated role labels")
    r.add_argument("--k", type=int)
    r.add_argument("--m", type=int)
    r.add_argument("--hops", type=int)

    s = sub.add_parser("stats", help="node and edge counts per tier")
    s.add_argument("--json", action="store_true")

    e = sub.add_parser("export", help="export one tier")
    e.add_argument("--tier", required=True, help="query | insight | interaction:<query_id>")
    e.add_argument("--format", choices=("dot", "json"), default="dot")

    b = sub.add_parser("bench", help="run a task suite and write the CSV report")
    b.add_argument("suite")
    b.add_argument("--no-memory", action="store_true")
    b.add_argument("--out", help="CSV path (default: stdout)")
    b.add_argument("--epochs", type=int, default=1)
    b.add_argument("--save-store", help="also save the resulting store here")

    sub.add_parser("validate", help="run the store invariant walk")

    sv = sub.add_parser("serve", help="run the HTTP service")
    sv.add_argument("--host")
    sv.add_argument("--port", type=int)
    return p


def _roles(text: str) -> list[tuple[str, str]]:
    roles = [r.strip() for r in text.split(",") if r.strip()]
    return [(r, r) for r in roles]


def _config(args: argparse.Namespace) -> EngineConfig:
    cfg = load_config(args.config)
    if args.store:
        cfg.store_path = args.store
    return cfg


def run(args: argparse.Namespace, out=None) -> int:
    out = out or sys.stdout
    cfg = _config(args)
    cmd = args.command
    if cmd == "init":
        path = Path(cfg.store_path)
        if path.exists():
            raise HierMemError(f"store {str(path)!r} already exists")
        Engine(cfg).save()
        print(f"initialized empty store at {path}", file=out)
        return 0
    if cmd == "bench":
        suite = load_suite(args.suite)
        result = run_bench(cfg, suite, use_memory=not args.no_memory, epochs=args.epochs)
        text = report_to_csv(result.report)
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
            print(
                f"final success rate {result.report.final_success_rate:.4f}, "
                f"total tokens {result.report.total_tokens}",
                file=sys.stderr,
            )
        else:
            out.write(text)
        if args.save_store:
            graphs.save(result.store, args.save_store)
        return 0

    engine = Engine.open(cfg)
    if cmd == "commit":
        try:
            doc = json.loads(Path(args.episode).read_text(encoding="utf-8"))
            episode = EpisodeRecord.from_dict(doc)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise HierMemError(f"cannot read episode {args.episode}: {exc}") from None
        summary = engine.commit(episode)
        print(json.dumps(summary.to_dict(), sort_keys=True), file=out)
    elif cmd == "retrieve":
        overrides = {k: getattr(args, k) for k in ("k", "m", "hops") if getattr(args, k) is not None}
        result = engine.retrieve(args.query, _roles(args.roles), overrides)
        print(json.dumps(result.to_dict(), sort_keys=True, indent=1), file=out)
    elif cmd == "stats":
        stats = engine.stats()
        print(json.dumps(stats, sort_keys=True) if args.json else format_stats(stats), file=out)
    elif cmd == "export":
        out.write(engine.export(args.tier, args.format))
    elif cmd == "validate":
        engine.validate()
        print("store is valid", file=out)
    elif cmd == "serve":
        from .service import serve

        svc = cfg.service or ServiceConfig()
        if args.host:
            svc.host = args.host
        if args.port:
            svc.port = args.port
        cfg.service = svc
        serve(cfg, engine)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except HierMemError as exc:
        stage = getattr(exc, "stage", None)
        print(f"error [{stage}]: {exc}" if stage else f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
