"""Command-line front end: refine, synth, eval, seed, inspect.

Every command writes a ``manifest.json`` capturing the resolved
parameters, input digests and output digests, which is sufficient to
reproduce the run bit-for-bit. Precedence for settings is CLI flag >
config file > built-in default; the config file is plain ``key = value``
lines with ``#`` comments. Verbosity comes from the ISEG_LOG
environment variable (debug/info/warning).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attn import (
    DEFAULT_GAMMA,
    DEFAULT_ITERATIONS,
    DEFAULT_LAMBDA,
    DEFAULT_TAU,
    CategoryMaps,
    TokenMeta,
    entropy_reduce,
    iterative_refine,
    minmax_normalize,
    refined_self_attention_power,
)
from .dumpio import fuse_cross_attention, read_dump_file
from .evalkit import SegMask, assemble_multi, binarize_single, miou, read_mask_png, write_mask_png
from .fixtures import NoiseSpec, degradation_study, seed_from_interaction

log = logging.getLogger("iseg")

DEFAULT_LAMBDA_GRID = "0,0.001,0.005,0.01,0.05,0.1"
DEFAULT_ITER_GRID = "1,2,4,6,8,10,12"


def _setup_logging() -> None:
    level = os.environ.get("ISEG_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _read_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _resolve(cli_value, config: dict[str, str], key: str, default, cast):
    if cli_value is not None:
        return cli_value
    if key in config:
        return cast(config[key])
    return default


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, params: dict,
                    inputs: dict[str, Path], outputs: list[Path]) -> Path:
    manifest = {
        "tool": "iseg",
        "version": __version__,
        "command": command,
        "parameters": params,
        "inputs": {name: _sha256_file(p) for name, p in inputs.items()},
        "outputs": {p.name: _sha256_file(p) for p in outputs},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _parse_levels(text: str | None):
    if text is None or text == "all":
        return None
    levels = set()
    for item in text.split(","):
        item = item.strip().lower()
        h, _, w = item.partition("x")
        levels.add((int(h), int(w)))
    return levels


def _parse_geometry(text: str) -> list[tuple[int, int]]:
    pts = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        r, _, c = part.partition(",")
        pts.append((int(r), int(c)))
    return pts


def _save_maps_npz(path: Path, maps: CategoryMaps, shape, names: list[str]) -> None:
    np.savez(path, maps=maps.data, shape=np.asarray(shape),
             names=np.asarray(names, dtype=object), iteration=maps.iteration)


def _upsample_nearest(labels: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    h, w = labels.shape
    oh, ow = out_hw
    rows = (np.arange(oh) * h) // oh
    cols = (np.arange(ow) * w) // ow
    return labels[rows][:, cols]


def _category_channels(fused: np.ndarray, meta: TokenMeta,
                       bg_mode: str) -> tuple[CategoryMaps, list[str], int | None]:
    """Split the fused HWxT map into per-category channels.

    Multi-token categories average their token columns into one channel.
    In bg_channel mode the background word columns form an extra, last
    channel.
    """
    groups = meta.groups()
    if not groups:
        raise SystemExit("dump declares no category tokens")
    channels = [fused[:, list(g)].mean(axis=1) for g in groups]
    names = [" ".join(meta.tokens[i] for i in g) for g in groups]
    bg_channel = None
    if bg_mode == "bg_channel":
        if not meta.background_indices:
            raise SystemExit("bg_channel mode requires background token indices in the dump")
        channels.append(fused[:, sorted(meta.background_indices)].mean(axis=1))
        bg_channel = len(channels) - 1
    return CategoryMaps(np.stack(channels)), names, bg_channel


def cmd_refine(args) -> int:
    config = _read_config(args.config)
    n_iters = _resolve(args.iters, config, "iters", DEFAULT_ITERATIONS, int)
    lam = _resolve(args.lam, config, "lambda", DEFAULT_LAMBDA, float)
    gamma = _resolve(args.gamma, config, "gamma", DEFAULT_GAMMA, float)
    tau = _resolve(args.tau, config, "tau", DEFAULT_TAU, float)
    levels_text = _resolve(args.levels, config, "levels", None, str)
    bg_mode = _resolve(args.bg_mode, config, "bg-mode", "threshold", str)
    normalize = _resolve(args.normalize, config, "normalize", "minmax", str)

    dump_path = Path(args.dump)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump = read_dump_file(dump_path)
    if dump.pathway == "embedding-scaling" and gamma != 1.0:
        log.warning("dump already carries gamma=%g via embedding scaling; "
                    "offline gamma=%g will enhance again", dump.gamma_applied, gamma)

    meta = TokenMeta(dump.token_meta.tokens, dump.token_meta.category_indices,
                     dump.token_meta.background_indices, gamma,
                     dump.token_meta.category_groups)
    stack = fuse_cross_attention(dump, meta, _parse_levels(levels_text))
    initial, names, bg_channel = _category_channels(stack.fused, meta, bg_mode)

    a_ent = entropy_reduce(dump.self_attention, lam)
    refined = iterative_refine(initial, a_ent, n_iters, normalize=normalize)

    shape = dump.working_resolution
    palette = {i + 1: name for i, name in enumerate(names)}
    mask = assemble_multi(refined, shape, tau, background_mode=bg_mode,
                          bg_channel=bg_channel, palette=palette)
    if dump.image_size is not None:
        mask = SegMask(_upsample_nearest(mask.labels, dump.image_size), palette)

    mask_path = out_dir / "mask.png"
    write_mask_png(mask, mask_path)
    maps_path = out_dir / "maps.npz"
    _save_maps_npz(maps_path, refined, shape, names)
    params = {
        "iters": n_iters, "lambda": lam, "gamma": gamma, "tau": tau,
        "levels": levels_text or "all", "bg_mode": bg_mode,
        "normalize": normalize, "timestep": dump.timestep,
        "pathway": dump.pathway, "image_id": dump.image_id,
    }
    _write_manifest(out_dir, "refine", params, {"dump": dump_path},
                    [mask_path, mask_path.with_suffix(".png.palette.json"), maps_path])
    print(f"refine: wrote {mask_path} ({len(names)} categories, "
          f"{n_iters} iterations, lambda={lam}, gamma={gamma})")
    return 0


def cmd_synth(args) -> int:
    config = _read_config(args.config)
    scenes = _resolve(args.scenes, config, "scenes", 100, int)
    side = _resolve(args.side, config, "side", 64, int)
    beta = _resolve(args.beta, config, "beta", 0.3, float)
    jitter = _resolve(args.jitter, config, "jitter", 2.0, float)
    leak = _resolve(args.leak, config, "leak", 0.3, float)
    tau = _resolve(args.tau, config, "tau", DEFAULT_TAU, float)
    seed = _resolve(args.seed, config, "seed", 0, int)
    lambdas = tuple(float(x) for x in
                    _resolve(args.lambdas, config, "lambdas", DEFAULT_LAMBDA_GRID, str).split(","))
    iters = tuple(int(x) for x in
                  _resolve(args.iters_grid, config, "iters-grid", DEFAULT_ITER_GRID, str).split(","))
    if scenes < 1:
        raise SystemExit("scene count must be >= 1")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = NoiseSpec(offdiag_leak=beta, jitter=jitter, seed=seed)
    result = degradation_study(scenes, spec, lambdas, iters,
                               side=side, tau=tau, leak=leak, seed=seed)

    means = result.cell_means()
    header = "lambda\\N " + " ".join(f"{n:>7d}" for n in result.iterations)
    print(header)
    for lam in result.lambdas:
        cells = " ".join(f"{means[(lam, n)]:7.4f}" for n in result.iterations)
        print(f"{lam:<9g}{cells}")

    csv_path = out_dir / "study.csv"
    summary_path = out_dir / "summary.json"
    result.write_csv(csv_path)
    result.write_summary_json(summary_path)
    params = {
        "scenes": scenes, "side": side, "beta": beta, "jitter": jitter,
        "leak": leak, "tau": tau, "seed": seed,
        "lambdas": list(lambdas), "iterations": list(result.iterations),
    }
    _write_manifest(out_dir, "synth", params, {}, [csv_path, summary_path])
    return 0


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    pred_files = {p.name: p for p in sorted(pred_dir.glob("*.png"))}
    gt_files = {p.name: p for p in sorted(gt_dir.glob("*.png"))}
    unmatched = sorted(set(pred_files) ^ set(gt_files))
    if unmatched:
        for name in unmatched:
            where = "pred" if name in pred_files else "gt"
            print(f"unmatched ({where} only): {name}", file=sys.stderr)
        return 1
    if not pred_files:
        print("no mask pairs found", file=sys.stderr)
        return 1

    per_image = {}
    mious, accs = [], []
    for name in sorted(pred_files):
        report = miou(read_mask_png(pred_files[name]), read_mask_png(gt_files[name]))
        per_image[name] = report.to_dict()
        mious.append(report.miou)
        accs.append(report.acc)

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "dataset": {
            "miou": float(np.mean(mious)),
            "acc": float(np.mean(accs)),
            "image_count": len(per_image),
        },
        "images": per_image,
    }
    out_path.write_text(json.dumps(payload, indent=2, sort_keys=True,
                                   allow_nan=True) + "\n")
    inputs = {f"pred/{n}": p for n, p in pred_files.items()}
    inputs.update({f"gt/{n}": p for n, p in gt_files.items()})
    _write_manifest(out_path.parent, "eval",
                    {"pred": str(pred_dir), "gt": str(gt_dir)}, inputs, [out_path])
    print(f"eval: {len(per_image)} images, "
          f"mIoU={payload['dataset']['miou']:.4f} ACC={payload['dataset']['acc']:.4f}")
    return 0


def cmd_seed(args) -> int:
    config = _read_config(args.config)
    n_iters = _resolve(args.iters, config, "iters", DEFAULT_ITERATIONS, int)
    lam = _resolve(args.lam, config, "lambda", DEFAULT_LAMBDA, float)
    tau = _resolve(args.tau, config, "tau", DEFAULT_TAU, float)
    if n_iters < 1:
        raise SystemExit("iteration count must be >= 1")

    dump_path = Path(args.dump)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump = read_dump_file(dump_path)
    shape = dump.working_resolution
    seed_map = seed_from_interaction(args.kind, _parse_geometry(args.geometry), shape)
    a_ent = entropy_reduce(dump.self_attention, lam)
    refined = iterative_refine(seed_map, a_ent, n_iters)
    mask = binarize_single(refined.data[0], tau, shape)

    mask_path = out_dir / "mask.png"
    write_mask_png(mask, mask_path)
    params = {"kind": args.kind, "geometry": args.geometry,
              "iters": n_iters, "lambda": lam, "tau": tau}
    _write_manifest(out_dir, "seed", params, {"dump": dump_path},
                    [mask_path, mask_path.with_suffix(".png.palette.json")])
    print(f"seed: wrote {mask_path}")
    return 0


def cmd_inspect(args) -> int:
    from PIL import Image

    dump_path = Path(args.dump)
    dump = read_dump_file(dump_path)
    h, w = dump.working_resolution
    pts = _parse_geometry(args.pixel)
    if len(pts) != 1:
        print(f"--pixel wants a single 'r,c' pair, got {args.pixel!r}", file=sys.stderr)
        return 1
    r, c = pts[0]
    if not (0 <= r < h and 0 <= c < w):
        print(f"pixel ({r}, {c}) outside {h}x{w} grid", file=sys.stderr)
        return 1
    lam = args.lam if args.lam is not None else DEFAULT_LAMBDA
    a_ent = entropy_reduce(dump.self_attention, lam)
    powered = refined_self_attention_power(a_ent, args.power)
    row = powered.data[r * w + c].reshape(h, w)
    img = (minmax_normalize(row.ravel()).reshape(h, w) * 255).round().astype(np.uint8)

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="L").save(out_path, format="PNG")
    _write_manifest(out_path.parent, "inspect",
                    {"pixel": [r, c], "power": args.power, "lambda": lam},
                    {"dump": dump_path}, [out_path])
    print(f"inspect: wrote {out_path} ({h}x{w})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iseg",
        description="Training-free segmentation by iterative attention refinement.")
    parser.add_argument("--version", action="version", version=f"iseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("refine", help="run the full refinement pipeline on a dump")
    p.add_argument("dump")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--levels", help='e.g. "16x16,32x32" or "all"')
    p.add_argument("--bg-mode", choices=("threshold", "bg_channel"))
    p.add_argument("--normalize", choices=("minmax", "none"))
    p.add_argument("--config")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("synth", help="synthetic degradation study over a (lambda, N) grid")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int)
    p.add_argument("--side", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--jitter", type=float)
    p.add_argument("--leak", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambdas", help=f'default "{DEFAULT_LAMBDA_GRID}"')
    p.add_argument("--iters-grid", help=f'default "{DEFAULT_ITER_GRID}"')
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("seed", help="segment from a point/line/box interaction")
    p.add_argument("dump")
    p.add_argument("--kind", required=True, choices=("point", "line", "box"))
    p.add_argument("--geometry", required=True, help='"r,c" pairs joined by ";"')
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_seed)

    p = sub.add_parser("inspect", help="render one pixel's refined affinity row")
    p.add_argument("dump")
    p.add_argument("--pixel", required=True, help='"r,c"')
    p.add_argument("--power", type=int, default=1)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(f"error: {exc.code}", file=sys.stderr)
            return 1
        return int(exc.code or 0)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
