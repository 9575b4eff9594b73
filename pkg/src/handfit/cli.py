"""Command-line entry point: ``handfit <subcommand> [flags]``.

Every flag may also come from a JSON file given with ``--config``; keys use
the flag names with dashes or underscores. Flags given on the command line
win over the config file. Failures exit with status 1 and print a single
``error: <Kind>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .assets import load_model_assets, save_model_assets
from .camera import ImagePlane
from .estimator import TrainConfig, initial_params, load_weights, run_hme, save_weights, train
from .imageio import read_netpbm, write_pgm, write_ppm
from .losses import GridDescriptor
from .metrics import DEFAULT_THRESHOLDS, compute_pck_auc, compute_seg_metrics
from .mesh import skeleton_from_params, synthesize_mesh
from .params import SHAPE, check_params
from .pipeline import augment_adapter, evidence_from_record, root_relative, sample_from_record
from .raster import rasterize_hard, render_shaded
from .refine import RefineConfig, testing_refine, write_trace_csv
from .synth import AugmentConfig, load_backgrounds, load_dataset, read_manifest, synthesize_dataset
from .toy import gen_toy_model

log = logging.getLogger("handfit")

REPORT_DECIMALS = 4
RENDER_ALBEDO = (0.8, 0.62, 0.52)
RENDER_BACKGROUND = 0.2


def _round(obj):
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return round(float(obj), REPORT_DECIMALS)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_round(obj), indent=2, sort_keys=True) + "\n")
    return path


def _out_path(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _params_from_json(path):
    data = json.loads(Path(path).read_text())
    h = data["h"] if isinstance(data, dict) else data
    return check_params(np.asarray(h, dtype=np.float64))


# subcommands

def cmd_gen_toy_model(args):
    save_model_assets(gen_toy_model(args.seed), _out_path(args.out))
    print(args.out)


def cmd_synth(args):
    assets = load_model_assets(args.assets)
    cfg = AugmentConfig(seed=args.seed, background_dir=args.background_dir)
    print(synthesize_dataset(assets, args.out, args.count, seed=args.seed, cfg=cfg))


def cmd_train(args):
    assets = load_model_assets(args.assets)
    records = load_dataset(args.data)
    desc = GridDescriptor()
    samples = [sample_from_record(r, desc) for r in records]
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed)
    aug_cfg = AugmentConfig(start_epoch=args.augment_after, seed=args.seed, background_dir=args.background_dir)
    backgrounds = load_backgrounds(args.background_dir) if args.background_dir else None
    hook = None if args.augment_after < 0 else augment_adapter(aug_cfg, assets, desc, backgrounds)
    res = train(samples, cfg, assets, augment=hook)
    save_weights(_out_path(args.out_weights), res.weights, seed=args.seed, epochs=args.epochs)
    trace = {"loss": res.loss_trace, "lambda_fraction": res.lambda_fraction, "n_samples": res.n_samples}
    write_json(Path(str(args.out_weights) + ".trace.json"), trace)
    print(args.out_weights)


def cmd_fit(args):
    assets = load_model_assets(args.assets)
    w, _ = load_weights(args.weights)
    root, entries = read_manifest(args.input_manifest)
    records = load_dataset(args.input_manifest)
    desc = GridDescriptor()
    rcfg = RefineConfig(iterations=args.refine_iters, gamma=args.refine_step)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    for sub in ("pred", "mask") + (("trace",) if args.traces else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for entry, rec in zip(entries, records):
        j2d = rec.j2d + rng.normal(0.0, args.keypoint_noise, rec.j2d.shape) if args.keypoint_noise else None
        z = evidence_from_record(rec, desc, j2d)
        hme = run_hme(z, w, assets)
        h = hme.h
        if args.refine_iters > 0:
            ref = testing_refine(rec.image, z, hme.h, rcfg, assets, desc, j2d_ref=hme.j2d)
            h = ref.h
        name = f"{int(entry['id']):06d}"
        if args.traces and args.refine_iters > 0:
            write_trace_csv(out / "trace" / f"{name}.csv", ref.trace)
        pred = {"h": h.tolist(), "h_hme": hme.h.tolist(), "j3d": skeleton_from_params(h, assets).tolist(),
                "j2d": hme.j2d.tolist()}
        (out / "pred" / f"{name}.json").write_text(json.dumps(pred) + "\n")
        write_pgm(out / "mask" / f"{name}.pgm", rasterize_hard(synthesize_mesh(h, assets)))
        lines.append({"id": entry["id"], "mask": f"mask/{name}.pgm", "gt": f"pred/{name}.json"})
    with open(out / "manifest.jsonl", "w") as fh:
        for e in lines:
            fh.write(json.dumps(e) + "\n")
    print(out / "manifest.jsonl")


def cmd_render(args):
    assets = load_model_assets(args.assets)
    h = _params_from_json(args.params)
    if args.mode == "canonical":
        c = initial_params(assets)
        c[SHAPE] = h[SHAPE]
        h = c
    mesh = synthesize_mesh(h, assets)
    plane = ImagePlane()
    if args.mode == "mask":
        write_pgm(_out_path(args.out), rasterize_hard(mesh, plane))
    else:
        bg = np.full((plane.height, plane.width, 3), RENDER_BACKGROUND)
        write_ppm(_out_path(args.out), render_shaded(mesh, plane, RENDER_ALBEDO, (0.0, 0.0, -1.0), bg))
    print(args.out)


def _load_eval_side(path):
    root, entries = read_manifest(path)
    j3d, masks = [], []
    for e in entries:
        j3d.append(np.asarray(json.loads((root / e["gt"]).read_text())["j3d"], dtype=np.float64))
        masks.append(read_netpbm(root / e["mask"]) if "mask" in e else None)
    return [e["id"] for e in entries], np.array(j3d), masks


def evaluate(pred_path, gt_path, thresholds=DEFAULT_THRESHOLDS, align="root"):
    ids_p, pred, mp = _load_eval_side(pred_path)
    ids_g, gt, mg = _load_eval_side(gt_path)
    if ids_p != ids_g:
        raise ValueError("prediction and ground-truth manifests list different ids")
    if align == "root":
        pred, gt = root_relative(pred), root_relative(gt)
    pa = compute_pck_auc(pred, gt, thresholds)
    report = {"n": len(ids_p), "align": align, "auc": pa["auc"], "mean_error": pa["mean_error"],
              "pck": {f"{t:.4f}": v for t, v in zip(pa["thresholds"], pa["pck"])}}
    pairs = [(a, b) for a, b in zip(mp, mg) if a is not None and b is not None]
    if pairs:
        segs = [compute_seg_metrics(a, b) for a, b in pairs]
        report["seg"] = {k: float(np.mean([s[k] for s in segs])) for k in segs[0]}
    return report


def cmd_eval(args):
    thresholds = np.linspace(args.pck_min, args.pck_max, args.pck_steps)
    report = evaluate(args.pred, args.gt, thresholds, args.align)
    write_json(args.report, report)
    print(args.report)


# argument handling

DEFAULTS = {
    "seed": 0, "count": 500, "epochs": 40, "lr": 1e-3, "batch_size": 8, "augment_after": 20,
    "refine_iters": 50, "refine_step": 1e-3, "keypoint_noise": 0.0, "traces": False, "mode": "mask",
    "pck_min": float(DEFAULT_THRESHOLDS[0]), "pck_max": float(DEFAULT_THRESHOLDS[-1]),
    "pck_steps": len(DEFAULT_THRESHOLDS), "align": "root", "background_dir": None,
}
REQUIRED = {
    "gen-toy-model": ("out",),
    "synth": ("assets", "out"),
    "train": ("assets", "data", "out_weights"),
    "fit": ("assets", "weights", "input_manifest", "out"),
    "render": ("assets", "params", "out"),
    "eval": ("pred", "gt", "report"),
}


def build_parser():
    p = argparse.ArgumentParser(prog="handfit", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)
    # every option defaults to None so config values can fill the gaps
    S = argparse.SUPPRESS

    def add(name, func, *flags):
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="JSON file mirroring the flags")
        for flag, kw in flags:
            sp.add_argument(flag, default=S, **kw)
        sp.set_defaults(func=func)
        return sp

    seed = ("--seed", {"type": int})
    assets = ("--assets", {})
    add("gen-toy-model", cmd_gen_toy_model, seed, ("--out", {}))
    add("synth", cmd_synth, assets, ("--count", {"type": int}), seed, ("--out", {}),
        ("--background-dir", {}))
    add("train", cmd_train, assets, ("--data", {}), ("--epochs", {"type": int}), ("--lr", {"type": float}),
        seed, ("--batch-size", {"type": int}), ("--augment-after", {"type": int}),
        ("--background-dir", {}), ("--out-weights", {}))
    add("fit", cmd_fit, assets, ("--weights", {}), ("--input-manifest", {}),
        ("--refine-iters", {"type": int}), ("--refine-step", {"type": float}),
        ("--keypoint-noise", {"type": float}), seed, ("--traces", {"action": "store_true"}), ("--out", {}))
    add("render", cmd_render, assets, ("--params", {}),
        ("--mode", {"choices": ("mask", "shaded", "canonical")}), ("--out", {}))
    add("eval", cmd_eval, ("--pred", {}), ("--gt", {}), ("--report", {}), ("--pck-min", {"type": float}),
        ("--pck-max", {"type": float}), ("--pck-steps", {"type": int}),
        ("--align", {"choices": ("root", "none")}))
    return p


def resolve_args(ns):
    """Merge command-line flags over config-file values over defaults."""
    merged = dict(DEFAULTS)
    if ns.config:
        cfg = json.loads(Path(ns.config).read_text())
        if not isinstance(cfg, dict):
            raise ValueError("config file must hold a JSON object")
        merged.update({k.replace("-", "_"): v for k, v in cfg.items()})
    merged.update({k: v for k, v in vars(ns).items() if k != "config"})
    missing = [k for k in REQUIRED[ns.command] if merged.get(k) is None]
    if missing:
        raise ValueError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return argparse.Namespace(**merged)


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(ns.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = resolve_args(ns)
        args.func(args)
    except Exception as exc:  # one machine-parsable line per failure
        msg = " ".join(str(exc).split()) or exc.__class__.__name__
        print(f"error: {exc.__class__.__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
