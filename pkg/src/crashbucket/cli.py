"""Command line entry point: ``crashbucket {prepare,embed,cluster,evaluate,run}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from .embed import DEFAULT_DIM, EmbeddingError, ProviderConfig
from .ingest import CorpusError
from .metrics import EvaluationError
from .pipeline import RunConfig, StageError, cmd_cluster, cmd_embed, cmd_evaluate, cmd_prepare, cmd_run
from .preprocess import SourceConfig
from .search import SearchParams

LOCK_NAME = ".crashbucket.lock"

STAGES = {
    "prepare": cmd_prepare,
    "embed": cmd_embed,
    "cluster": cmd_cluster,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-o", "--out", type=Path, required=True, help="output directory (owned by one run at a time)")
    common.add_argument("-v", "--verbose", action="store_true")

    inputs = common.add_argument_group("inputs")
    inputs.add_argument("--corpus", type=Path, help="directory of <id>.trace / <id>.asan files")
    inputs.add_argument("--truth", type=Path, help="ground-truth CSV with id,label[,bug_type]")

    prep = common.add_argument_group("preprocessing")
    prep.add_argument("--sources", default="full,coarse,asan", help="comma list drawn from full,coarse,asan")
    prep.add_argument("--asan-keep-traces", action="store_true", help="keep stack traces inside cleaned ASan reports")

    emb = common.add_argument_group("embedding (API key is read from $DEDUP_API_KEY)")
    emb.add_argument("--provider", choices=("offline", "remote"), default="offline")
    emb.add_argument("--model", default=None, help="model name sent to the provider")
    emb.add_argument("--endpoint", default="", help="base URL of an OpenAI-compatible embeddings API")
    emb.add_argument("--dim", type=int, default=DEFAULT_DIM, help="truncation dimension")
    emb.add_argument("--seed", type=int, default=0, help="offline hashing seed")
    emb.add_argument("--batch-size", type=int, default=100)
    emb.add_argument("--workers", type=int, default=1, help="concurrent provider batches")
    emb.add_argument("--cache", type=Path, default=None, help="embedding cache file (default $DEDUP_CACHE or <out>/embedding_cache.jsonl)")

    clu = common.add_argument_group("clustering")
    clu.add_argument("--num-steps", type=int, default=64)
    clu.add_argument("--min-dist", type=float, default=None)
    clu.add_argument("--max-dist", type=float, default=None)
    clu.add_argument("--dump-tree", action="store_true", help="write condensed_tree.jsonl")

    parser = argparse.ArgumentParser(prog="crashbucket", description="group crashes that share a root cause")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "prepare": "parse, clean and collapse exact duplicates",
        "embed": "embed prepared texts into unit vectors",
        "cluster": "cluster vectors and write clusters.csv",
        "evaluate": "score clusters.csv against ground truth",
        "run": "all stages in sequence",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    provider_kwargs = dict(
        kind=args.provider,
        endpoint=args.endpoint,
        batch_size=args.batch_size,
        target_dim=args.dim,
        seed=args.seed,
        offline_dim=max(args.dim, DEFAULT_DIM),
        max_workers=args.workers,
    )
    if args.model:
        provider_kwargs["model"] = args.model
    return RunConfig(
        out_dir=args.out,
        corpus=args.corpus,
        sources=SourceConfig.parse(args.sources, args.asan_keep_traces),
        provider=ProviderConfig(**provider_kwargs),
        search=SearchParams(args.num_steps, args.min_dist, args.max_dist),
        cache_path=args.cache,
        truth=args.truth,
        dump_tree=args.dump_tree,
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        config = config_from_args(args)
    except ValueError as exc:
        parser.error(str(exc))

    config.out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(config.out_dir / LOCK_NAME))
    try:
        with lock.acquire(timeout=0):
            STAGES[args.command](config)
    except Timeout:
        print(f"error: {config.out_dir} is in use by another run", file=sys.stderr)
        return 3
    except (StageError, CorpusError, EmbeddingError, EvaluationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
