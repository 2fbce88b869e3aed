"""Command-line entry point: ``vesseldiff <subcommand> ...``.

Every successful run writes ``manifest.json`` beside its outputs. Failures
print one JSON line on stderr and exit with a code that names the failure:

    2  usage error (unknown flag, bad value)
    3  missing input file
    4  config schema violation
    5  invalid input data
    6  numerical failure (divergence, non-finite sample)
    1  anything else
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5, 6
OUT_ROOT_ENV = "VESSELDIFF_OUT"
SYNTH_COLUMNS = ["case", "seed", "split", "ct", "mask", "liver", "vessel_voxels"]

log = logging.getLogger("vesseldiff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------ utilities


def _out_path(p) -> Path:
    p = Path(p)
    root = os.environ.get(OUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    import nibabel
    import scipy
    import skimage
    import torch

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "torch": torch.__version__, "scikit-image": skimage.__version__, "nibabel": nibabel.__version__,
            "vesseldiff": __version__}


def write_manifest(out_dir: Path, args, argv, config=None, inputs=(), outputs=(), extra=None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "seed": getattr(args, "seed", None),
        "config": None if config is None else config.as_dict(),
        "config_hash": None if config is None else config.hash(),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "outputs": [str(p) for p in outputs],
        "versions": _versions(),
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_config(args):
    from .config import RunConfig, load_config

    return load_config(_need(args.config)) if getattr(args, "config", None) else RunConfig()


def _read_synth_manifest(data_dir: Path, split: Optional[str] = None):
    from .data import load_volume, prepare_case

    rows = list(csv.DictReader(open(_need(data_dir / "manifest.csv"))))
    cases = []
    for row in rows:
        if split and row["split"] != split:
            continue
        ct = load_volume(_need(data_dir / row["ct"]), "HU")
        mask = load_volume(_need(data_dir / row["mask"]))
        liver = load_volume(_need(data_dir / row["liver"]))
        cases.append((row["case"], ct, mask, liver))
    return cases


def _prepared(data_dir, split, size):
    from .data import prepare_case

    return [prepare_case(ct, liver, mask, size=size, name=name)
            for name, ct, mask, liver in _read_synth_manifest(Path(data_dir), split)]


# ------------------------------------------------------------------ commands


def cmd_synth(args, argv):
    from .data import save_volume
    from .experiment import SuiteConfig

    if args.cases < 1 or args.size < 8 or args.depth < 3:
        raise ValueError("need cases >= 1, size >= 8 and depth >= 3")
    out = _out_path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suite = SuiteConfig(depth=args.depth, size=args.size, n_branches=args.branches, noise_sigma=args.noise)
    rows = []
    for k in range(args.cases):
        seed = args.seed + k
        ph = suite.phantom(seed)
        name = f"case{k:03d}"
        files = {kind: f"{name}_{kind}.nii.gz" for kind in ("ct", "mask", "liver")}
        save_volume(ph.ct, out / files["ct"])
        save_volume(ph.mask, out / files["mask"])
        save_volume(ph.liver, out / files["liver"])
        split = "test" if k >= args.cases - args.test_cases else "train"
        rows.append({"case": name, "seed": seed, "split": split, **files,
                     "vessel_voxels": int(ph.mask.data.sum())})
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SYNTH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    write_manifest(out, args, argv, outputs=[out / "manifest.csv"])
    print(f"wrote {len(rows)} phantom cases to {out}")


def cmd_graph_build(args, argv):
    from .config import parse_grid
    from .data import load_volume
    from .graph import EdgePolicy, build_graph, full_graph, save_graph

    grid = parse_grid(args.grid)
    vol = load_volume(_need(args.mask))
    if args.full:
        g = full_graph(grid, vol.shape, knn=args.knn or None)
    else:
        policy = EdgePolicy(threshold=args.threshold, background_speed=args.background_speed, spacing=vol.spacing)
        g = build_graph(vol.data > 0, grid, policy)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_graph(g, out)
    write_manifest(out.parent, args, argv, inputs=[args.mask], outputs=[out])
    print(f"{g.num_nodes} nodes, {g.num_edges} edges -> {out}")


def cmd_train(args, argv):
    from .config import save_config
    from .experiment import make_suite, train_tier

    cfg = _load_config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.iterations:
        cfg.train.iterations = args.iterations
    args.seed = cfg.train.seed
    out = _out_path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.data_dir:
        from .experiment import Suite

        suite = Suite(_prepared(args.data_dir, "train", cfg.model.image_size), [])
    else:
        suite = make_suite(cfg.data, cfg.model.image_size)
    result = train_tier(cfg.train, suite, out, cfg.graph.policy())
    save_config(cfg, out / "config.ini")
    write_manifest(out, args, argv, cfg, inputs=[args.config] if args.config else [],
                   outputs=[out / "checkpoint.pt", out / "loss.csv"],
                   extra={"skipped_steps": result.skipped})
    print(f"trained tier {cfg.model.tier} for {cfg.train.iterations} iterations -> {out / 'checkpoint.pt'}")


def _seed_list(args) -> List[int]:
    if args.seed_list:
        return [int(s) for s in args.seed_list.split(",")]
    return [args.seed + k for k in range(args.seeds)]


def cmd_sample(args, argv):
    from .data import Volume, load_volume, prepare_case, save_volume
    from .diffusion import make_linear_schedule
    from .experiment import empty_inference_graph
    from .inference import segment_case
    from .training import load_checkpoint

    model, sched, _ = load_checkpoint(_need(args.checkpoint))
    if args.steps is not None and args.steps != sched.T:
        raise ValueError(f"--steps {args.steps} does not match the checkpoint schedule (T={sched.T})")
    ct = load_volume(_need(args.input), "HU")
    liver = load_volume(_need(args.liver)) if args.liver else Volume(np.ones(ct.shape, np.uint8), ct.spacing)
    case = prepare_case(ct, liver, size=model.cfg.image_size, letterbox=args.letterbox)
    graph = empty_inference_graph(model) if args.graph == "empty" else None
    seeds = _seed_list(args)
    mask, res = segment_case(model, case, sched, seeds, args.ensemble_mode, args.postprocess == "on", graph,
                             args.batch_size, restore=True)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(Volume(mask.astype(np.uint8), ct.spacing), out)
    write_manifest(out.parent, args, argv, inputs=[args.checkpoint, args.input], outputs=[out],
                   extra={"seeds": seeds, "steps": sched.T, "ensemble_size": res.ensemble_size})
    print(f"{int(mask.sum())} foreground voxels -> {out}")


def _case_name(path) -> str:
    stem = Path(path).name.split(".")[0]
    for suffix in ("_mask", "_pred", "_seg"):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def _pair_dirs(pred_dir, gt_dir):
    """Match masks in two directories by case name (``_mask``/``_pred``/``_seg`` suffixes ignored)."""
    def scan(d):
        d = Path(_need(d))
        files = sorted(f for f in d.iterdir() if f.name.endswith((".nii", ".nii.gz")))
        # synth output keeps CT and liver volumes next to the masks
        files = [f for f in files if not f.name.split(".")[0].endswith(("_ct", "_liver"))]
        return {_case_name(f): f for f in files}

    preds, gts = scan(pred_dir), scan(gt_dir)
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise FileNotFoundError(f"no prediction for case(s) {missing} in {pred_dir}")
    return [(name, preds[name], gts[name]) for name in sorted(gts)]


def cmd_eval(args, argv):
    from .data import load_volume
    from .metrics import evaluate_case, write_report_csv

    if len(args.pred) != len(args.gt):
        raise UsageError("--pred and --gt must be given the same number of times")
    if bool(args.pred_dir) != bool(args.gt_dir):
        raise UsageError("--pred-dir and --gt-dir go together")
    pairs = [(_case_name(p), p, g) for p, g in zip(args.pred, args.gt)]
    if args.pred_dir:
        pairs += _pair_dirs(args.pred_dir, args.gt_dir)
    if not pairs:
        raise UsageError("give --pred/--gt pairs or --pred-dir/--gt-dir")
    if args.case and len(pairs) == 1:
        pairs = [(args.case,) + pairs[0][1:]]
    reports = []
    for name, p, g in pairs:
        pred, gt = load_volume(_need(p)), load_volume(_need(g))
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch between {p} and {g}")
        reports.append(evaluate_case(name, pred.data > 0, gt.data > 0, gt.spacing, args.min_volume))
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(reports, out)
    write_manifest(out.parent, args, argv, inputs=[p for _, p, _ in pairs] + [g for _, _, g in pairs], outputs=[out])
    for r in reports:
        print(f"{r.case}: dsc={r.dsc} cldice={r.cldice} con={r.con_label}")


def cmd_attn_dump(args, argv):
    import torch

    from .config import parse_grid
    from .data import Volume, load_volume, prepare_case
    from .diffusion import forward_sample, mask_to_signed
    from .graph import full_graph
    from .graph_attention import make_graph_batch
    from .training import load_checkpoint

    model, sched, _ = load_checkpoint(_need(args.checkpoint))
    if not model.uses_graph:
        raise ValueError("checkpoint has no graph branch")
    if not 1 <= args.t <= sched.T:
        raise ValueError(f"--t must lie in [1, {sched.T}]")
    ct = load_volume(_need(args.input), "HU")
    liver = load_volume(_need(args.liver)) if args.liver else Volume(np.ones(ct.shape, np.uint8), ct.spacing)
    case = prepare_case(ct, liver, size=model.cfg.image_size)
    z = case.depth // 2 if args.slice is None else args.slice
    if not 0 <= z < case.depth:
        raise ValueError(f"slice {z} outside [0, {case.depth})")
    grid = parse_grid(args.grid) if args.grid else model.cfg.node_grid
    graph = full_graph(grid, model.cfg.block_shape)
    batch = make_graph_batch([graph], model.cfg.bottleneck_hw, model.cfg.self_loops)
    cond = torch.as_tensor(case.block(z).slices[None])
    gen = torch.Generator().manual_seed(args.seed)
    x_t = torch.randn((1, 1) + cond.shape[-2:], generator=gen)
    t = torch.tensor([args.t])
    attn = model.attention(x_t, cond, t, batch)
    levels = range(len(attn)) if args.level < 0 else [args.level]
    rows = []
    for lvl in levels:
        alpha = attn[lvl]
        if batch.complete:
            a = alpha[0]
            for i in range(graph.num_nodes):
                for j in range(graph.num_nodes):
                    if i != j:
                        rows.append((lvl, i, j, float(a[i, j])))
        else:
            dst, src = batch.edge_index.tolist()
            rows.extend((lvl, d, s, float(v)) for d, s, v in zip(dst, src, alpha.tolist()))
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "dst", "src", "alpha"])
        w.writerows((lvl, d, s, repr(v)) for lvl, d, s, v in rows)
    write_manifest(out.parent, args, argv, inputs=[args.checkpoint, args.input], outputs=[out],
                   extra={"slice": z, "t": args.t, "grid": list(grid)})
    print(f"{len(rows)} attention entries -> {out}")


def cmd_ablate(args, argv):
    from .config import save_config
    from .experiment import (
        Suite, comparison_row, empty_inference_graph, evaluate_model, make_suite, train_tier, write_comparison,
    )
    from .metrics import write_report_csv

    cfg = _load_config(args)
    if args.iterations:
        cfg.train.iterations = args.iterations
    args.seed = cfg.train.seed
    tiers = [t.strip() for t in args.tiers.split(",") if t.strip()]
    out = _out_path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.data_dir:
        size = cfg.model.image_size
        suite = Suite(_prepared(args.data_dir, "train", size), _prepared(args.data_dir, "test", size))
    else:
        suite = make_suite(cfg.data, cfg.model.image_size)
    if not suite.test:
        raise ValueError("ablation needs test cases")
    rows, outputs = [], []
    for tier in tiers:
        from dataclasses import replace

        model_cfg = replace(cfg.model, tier=tier)
        tcfg = replace(cfg.train, model=model_cfg)
        result = train_tier(tcfg, suite, out / tier, cfg.graph.policy())
        graph = empty_inference_graph(result.model) if cfg.sample.graph == "empty" and tier == "ABC" else None
        reports, _ = evaluate_model(result.model, result.schedule, suite.test, cfg.sample.seeds,
                                    cfg.sample.postprocess, graph, cfg.sample.batch_size)
        write_report_csv(reports, out / tier / "metrics.csv")
        outputs += [out / tier / "checkpoint.pt", out / tier / "metrics.csv"]
        rows.append(comparison_row(tier, reports))
    write_comparison(rows, out / "comparison.csv")
    save_config(cfg, out / "config.ini")
    write_manifest(out, args, argv, cfg, inputs=[args.config] if args.config else [],
                   outputs=outputs + [out / "comparison.csv"], extra={"tiers": tiers})
    print(f"compared tiers {','.join(tiers)} -> {out / 'comparison.csv'}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vesseldiff", description="Graph-guided diffusion vessel segmentation.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate phantom CT/mask/liver volumes")
    s.add_argument("--seed", type=int, default=0, help="seed of the first case")
    s.add_argument("--size", type=int, default=64, help="in-plane size in voxels")
    s.add_argument("--depth", type=int, default=16, help="number of slices")
    s.add_argument("--cases", type=int, default=1)
    s.add_argument("--test-cases", type=int, default=0, help="mark the last N cases as test")
    s.add_argument("--branches", type=int, default=9)
    s.add_argument("--noise", type=float, default=20.0, help="CT noise sigma in HU")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("graph-build", help="build a vessel graph from a mask volume")
    s.add_argument("--mask", required=True)
    s.add_argument("--grid", required=True, help="node grid as HxWxD, e.g. 32x32x3")
    s.add_argument("--threshold", type=float, default=None, help="travel-time threshold (mm)")
    s.add_argument("--background-speed", type=float, default=1e-3)
    s.add_argument("--full", action="store_true", help="complete graph over sub-volume centres")
    s.add_argument("--knn", type=int, default=0, help="with --full: keep k nearest neighbours")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_graph_build)

    s = sub.add_parser("train", help="train one model tier")
    s.add_argument("--config", help="run config file (defaults are used when omitted)")
    s.add_argument("--data-dir", help="synth output; phantoms are generated from [data] otherwise")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--iterations", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="segment a CT volume with a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="CT volume (NIfTI, HU)")
    s.add_argument("--liver", help="liver mask used for cropping (whole volume when omitted)")
    s.add_argument("--seeds", type=int, default=1, help="ensemble size")
    s.add_argument("--seed", type=int, default=0, help="first ensemble seed")
    s.add_argument("--seed-list", help="explicit comma-separated seeds")
    s.add_argument("--steps", type=int, default=None, help="must equal the schedule length")
    s.add_argument("--ensemble-mode", choices=("vote", "average"), default="vote")
    s.add_argument("--postprocess", choices=("on", "off"), default="on")
    s.add_argument("--graph", choices=("full", "empty"), default="full")
    s.add_argument("--letterbox", action="store_true", help="pad the liver crop to a square before resizing")
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="score predicted masks against ground truth")
    s.add_argument("--pred", action="append", default=[], help="predicted mask (repeatable)")
    s.add_argument("--gt", action="append", default=[], help="ground-truth mask, paired with --pred in order")
    s.add_argument("--pred-dir", help="directory of predicted masks, paired with --gt-dir by case name")
    s.add_argument("--gt-dir", help="directory of ground-truth masks")
    s.add_argument("--spacing-from-header", action="store_true",
                   help="take voxel spacing from the ground-truth header (always the case; accepted for scripts)")
    s.add_argument("--case", help="case name for a single pair")
    s.add_argument("--min-volume", type=float, default=120.0, help="component volume threshold (mm^3)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("attn-dump", help="write graph attention coefficients for one slice")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--liver")
    s.add_argument("--slice", type=int, default=None)
    s.add_argument("--grid", help="node grid as HxWxD (checkpoint grid by default)")
    s.add_argument("--t", type=int, default=1, help="denoising step")
    s.add_argument("--level", type=int, default=-1, help="feature level (-1 = all)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attn_dump)

    s = sub.add_parser("ablate", help="train and evaluate several tiers on the same data")
    s.add_argument("--config")
    s.add_argument("--data-dir")
    s.add_argument("--tiers", default="A,AB,ABC")
    s.add_argument("--iterations", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": message}), file=sys.stderr)
    return code


def run(argv: Optional[List[str]] = None) -> int:
    from .config import ConfigError
    from .inference import NonFiniteSample
    from .training import NonFiniteLoss, TrainingDiverged

    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args, argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing_file", str(exc))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except (TrainingDiverged, NonFiniteLoss, NonFiniteSample) as exc:
        return _fail(EXIT_NUMERIC, "numerical", str(exc))
    except ValueError as exc:
        return _fail(EXIT_DATA, "invalid_input", str(exc))
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
