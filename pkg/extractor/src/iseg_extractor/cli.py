"""Extractor command line: write attention dumps from images."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .extract import DEFAULT_TIMESTEP, ExtractionJob, extract
from .model import load_bundle
from .tokenize import DEFAULT_BACKGROUND_WORDS


def cmd_extract(args) -> int:
    bundle = load_bundle(args.model)
    job = ExtractionJob(
        image=args.image,
        categories=[c.strip() for c in args.categories.split(",") if c.strip()],
        prompt=args.prompt,
        background_words=tuple(args.background.split(",")) if args.background
        else DEFAULT_BACKGROUND_WORDS,
        gamma=args.gamma,
        pathway=args.pathway,
        timestep=args.timestep,
        noise_seed=args.seed,
    )
    out = extract(job, bundle, args.out)
    print(f"extract: wrote {out}")
    return 0


def cmd_init_toy(args) -> int:
    from .toy import init_toy_checkpoint

    path = init_toy_checkpoint(args.out, seed=args.seed, image_size=args.image_size)
    print(f"init-toy: wrote randomly initialized checkpoint to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iseg-extract",
        description="Capture attention tensors from one diffusion forward pass.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="run one image and write an attention dump")
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", help="override the photograph-of template")
    p.add_argument("--categories", required=True, help="comma-separated names")
    p.add_argument("--background", help="comma-separated background words")
    p.add_argument("--gamma", type=float, default=1.6)
    p.add_argument("--pathway", choices=("offline", "embedding-scaling"),
                   default="offline")
    p.add_argument("--timestep", type=int, default=DEFAULT_TIMESTEP)
    p.add_argument("--seed", type=int, default=0, help="noise sample seed")
    p.add_argument("--model", required=True, help="checkpoint directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("init-toy",
                       help="create a seeded random-weight checkpoint directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=128)
    p.set_defaults(func=cmd_init_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
