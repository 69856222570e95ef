"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as dio
from .errors import DepthAlignError, NumericalError
from .fields import SparseDepth
from .filtering import filter_outliers
from .metrics import evaluate, sparsification_auc
from .pipeline import PIPELINE_MODES, PRIOR_KINDS, build_prior, complete, evaluate_modes, reconstruct_depth
from .scenegen import OUTLIER_MODES, Scene, SceneConfig, derive_seed, synth_scene

__all__ = ["main", "build_parser", "write_scene", "read_scene", "EXIT_OK", "EXIT_USAGE", "EXIT_DATA", "EXIT_DIVERGENCE"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3

logger = logging.getLogger("depthalign")

SCENE_FILES = {
    "gt": "gt.pfm",
    "relative": "relative.pfm",
    "guidance": "guidance.pfm",
    "sparse": "sparse.pfm",
    "outlier_labels": "outliers.pfm",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_subparser(sub, name, help_):
    return sub.add_parser(name, help=help_, description=help_)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="depthalign", description="Sparse-to-dense depth completion by test-time alignment.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = _add_subparser(sub, "synth", "generate a suite of synthetic scenes")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--num", type=int, default=20)
    s.add_argument("--preset", choices=("outdoor", "indoor"), default="outdoor")
    s.add_argument("--outlier-mode", choices=OUTLIER_MODES)
    s.add_argument("--outlier-rate", type=float)
    s.add_argument("--config")
    s.add_argument("--jobs", type=int, default=1)

    c = _add_subparser(sub, "complete", "complete one sparse depth map")
    c.add_argument("--sparse", required=True)
    c.add_argument("--relative", required=True)
    c.add_argument("--guidance", required=True)
    c.add_argument("--prior", choices=PRIOR_KINDS, default="affine")
    c.add_argument("--mode", choices=PIPELINE_MODES, default="aligned")
    c.add_argument("--config")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--gt", help="ground truth for the manifest metrics")
    c.add_argument("--manifest")

    f = _add_subparser(sub, "filter", "prior-based outlier filtering of sparse depth")
    f.add_argument("--relative", required=True)
    f.add_argument("--sparse", required=True)
    f.add_argument("--segments", type=int, default=200)
    f.add_argument("--tau", type=float, default=1.0)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out-mask", required=True)
    f.add_argument("--out-confidence", required=True)
    f.add_argument("--manifest")

    e = _add_subparser(sub, "eval", "score a prediction against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--confidence", help="per-pixel confidence; adds the sparsification AUC")
    e.add_argument("--report", required=True)

    a = _add_subparser(sub, "ablate", "compare sampling methods over a scene suite")
    a.add_argument("--suite", required=True)
    a.add_argument("--modes", default="naive,guided,aligned")
    a.add_argument("--prior", choices=PRIOR_KINDS, default="affine")
    a.add_argument("--config")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--report", required=True)
    a.add_argument("--jobs", type=int, default=1)

    r = _add_subparser(sub, "reconstruct", "noise a depth map and denoise it with the prior")
    r.add_argument("--input", required=True)
    r.add_argument("--prior", choices=PRIOR_KINDS, default="gmrf")
    r.add_argument("--relative", help="reference relative depth (affine prior)")
    r.add_argument("--t-inv", type=int, required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--manifest")
    return p


# -- scene files -----------------------------------------------------------


def write_scene(scene: Scene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    dio.write_pfm(d / SCENE_FILES["gt"], scene.gt)
    dio.write_pfm(d / SCENE_FILES["relative"], scene.relative)
    dio.write_pfm(d / SCENE_FILES["guidance"], scene.guidance)
    dio.write_pfm(d / SCENE_FILES["sparse"], np.where(scene.sparse.mask, scene.sparse.values, np.nan))
    dio.write_pfm(d / SCENE_FILES["outlier_labels"], scene.outlier_labels.astype(np.float32))
    (d / "scene.json").write_text(json.dumps(dio._jsonable(scene.meta), indent=2, sort_keys=True) + "\n")


def read_scene(directory) -> Scene:
    """Load a scene written by :func:`write_scene` (float32 precision)."""
    d = Path(directory)
    arrays = {k: dio.read_pfm(d / name).astype(np.float64) for k, name in SCENE_FILES.items()}
    meta = json.loads((d / "scene.json").read_text()) if (d / "scene.json").exists() else {}
    sparse = SparseDepth.from_dense(arrays["sparse"])
    return Scene(
        gt=arrays["gt"],
        relative=arrays["relative"],
        guidance=arrays["guidance"],
        sparse=sparse,
        outlier_labels=arrays["outlier_labels"] > 0.5,
        cells=np.zeros(sparse.shape, dtype=np.int64),
        planes=np.zeros((0, 3)),
        meta=meta,
    )


def _same_shape(**arrays):
    shapes = {k: np.shape(v)[:2] for k, v in arrays.items()}
    if len(set(shapes.values())) > 1:
        raise dio.ParameterError(f"input shapes differ: {shapes}")


def _seed_everything(run, seed):
    return replace(run, align=replace(run.align, seed=int(seed)))


# -- subcommands -----------------------------------------------------------


def _synth_one(args):
    cfg, seed, index, out = args
    scene = synth_scene(cfg, derive_seed(seed, index))
    write_scene(scene, Path(out) / f"scene_{index:03d}")
    return index


def cmd_synth(args) -> int:
    base = dio.RunConfig(scene=SceneConfig.preset(args.preset))
    cfg = dio.load_config(args.config, base).scene
    if (args.outlier_mode is None) != (args.outlier_rate is None):
        raise UsageError("--outlier-mode and --outlier-rate go together")
    if args.outlier_mode is not None:
        cfg = replace(cfg, outliers=((args.outlier_mode, args.outlier_rate),))
    if args.num < 1:
        raise UsageError("--num must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, args.seed, i, str(out)) for i in range(args.num)]
    _map(_synth_one, jobs, args.jobs)
    dio.write_manifest(
        out / "suite.json",
        {"command": "synth", "seed": args.seed, "num": args.num, "preset": args.preset, "scene_config": cfg.to_dict()},
    )
    return EXIT_OK


def cmd_complete(args) -> int:
    run = _seed_everything(dio.load_config(args.config), args.seed)
    sparse = SparseDepth.from_dense(dio.read_depth(args.sparse))
    relative = dio.read_depth(args.relative)
    guidance = dio.read_depth(args.guidance)
    gt = dio.read_depth(args.gt) if args.gt else None
    _same_shape(sparse=sparse.values, relative=relative, guidance=guidance, **({"gt": gt} if gt is not None else {}))
    prior = build_prior(args.prior, relative, **run.prior)
    t0 = time.perf_counter()
    res = complete(args.mode, prior, sparse, guidance, relative, run.align)
    elapsed = time.perf_counter() - t0
    dio.write_depth(args.out, res.depth)
    if args.manifest:
        doc = {
            "command": "complete",
            "mode": args.mode,
            "prior": args.prior,
            "seed": args.seed,
            "config": run.to_dict(),
            "n_clamped": res.n_clamped,
            "loops": res.loops,
            "timings": {"complete_seconds": elapsed},
        }
        if gt is not None:
            doc["metrics"] = evaluate(res.depth, np.nan_to_num(gt)).to_dict()
        dio.write_manifest(args.manifest, doc)
    return EXIT_OK


def cmd_filter(args) -> int:
    relative = dio.read_depth(args.relative)
    sparse = SparseDepth.from_dense(dio.read_depth(args.sparse))
    _same_shape(relative=relative, sparse=sparse.values)
    res = filter_outliers(relative, sparse, N=args.segments, tau=args.tau, seed=args.seed)
    dio.write_pfm(args.out_mask, res.kept_mask.astype(np.float32))
    dio.write_pfm(args.out_confidence, res.confidence)
    summary = {
        "command": "filter",
        "N": args.segments,
        "tau": args.tau,
        "seed": args.seed,
        "measured": sparse.count,
        "kept": int(res.kept_mask.sum()),
        "segments_used": res.segments.n,
    }
    if args.manifest:
        dio.write_manifest(args.manifest, summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = dio.read_depth(args.pred)
    gt = dio.read_depth(args.gt)
    _same_shape(pred=pred, gt=gt)
    gt = np.nan_to_num(gt)  # missing ground truth is excluded as non-positive
    extras = {}
    if args.confidence:
        conf = dio.read_depth(args.confidence)
        _same_shape(pred=pred, confidence=conf)
        sel = np.isfinite(conf) & (gt > 0) & np.isfinite(pred)
        extras["auc"] = sparsification_auc(np.abs(pred[sel] - gt[sel]), conf[sel])
    report = evaluate(np.nan_to_num(pred), gt, **extras)
    dio.write_manifest(args.report, {"command": "eval", "metrics": report.to_dict()})
    return EXIT_OK


def _ablate_one(args):
    index, directory, modes, run, prior_kind, seed = args
    scene = read_scene(directory)
    reports = evaluate_modes(scene, modes, run.align, prior_kind, run.prior, seed=derive_seed(seed, index))
    return {"scene": Path(directory).name, "metrics": {m: r.to_dict() for m, r in reports.items()}}


def cmd_ablate(args) -> int:
    run = dio.load_config(args.config)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    bad = [m for m in modes if m not in PIPELINE_MODES]
    if bad or not modes:
        raise UsageError(f"unknown modes {bad}; choose from {', '.join(PIPELINE_MODES)}")
    dirs = sorted(p for p in Path(args.suite).iterdir() if p.is_dir() and (p / SCENE_FILES["gt"]).exists())
    if not dirs:
        raise dio.ParameterError(f"no scenes found under {args.suite!r}")
    t0 = time.perf_counter()
    rows = _map(_ablate_one, [(i, str(d), modes, run, args.prior, args.seed) for i, d in enumerate(dirs)], args.jobs)
    summary = {m: {k: float(np.mean([r["metrics"][m][k] for r in rows])) for k in ("rmse", "mae")} for m in modes}
    dio.write_manifest(
        args.report,
        {
            "command": "ablate",
            "modes": modes,
            "prior": args.prior,
            "seed": args.seed,
            "config": run.to_dict(),
            "scenes": rows,
            "mean": summary,
            "timings": {"total_seconds": time.perf_counter() - t0},
        },
    )
    for m in modes:
        print(f"{m:16s} rmse {summary[m]['rmse']:.4f}  mae {summary[m]['mae']:.4f}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    run = dio.load_config(args.config)
    depth = dio.read_depth(args.input)
    relative = dio.read_depth(args.relative) if args.relative else None
    if relative is not None:
        _same_shape(input=depth, relative=relative)
    if not np.all(np.isfinite(depth)):
        raise dio.ParameterError("reconstruct needs a dense input without missing pixels")
    prior = build_prior(args.prior, relative, **run.prior)
    out = reconstruct_depth(prior, depth, args.t_inv, seed=args.seed, num_steps=run.align.num_steps)
    dio.write_depth(args.out, out)
    if args.manifest:
        dio.write_manifest(
            args.manifest,
            {
                "command": "reconstruct",
                "prior": args.prior,
                "t_inv": args.t_inv,
                "seed": args.seed,
                "metrics": evaluate(out, depth).to_dict(),
            },
        )
    return EXIT_OK


def _map(fn, items, jobs):
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


COMMANDS = {
    "synth": cmd_synth,
    "complete": cmd_complete,
    "filter": cmd_filter,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "reconstruct": cmd_reconstruct,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DepthAlignError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
