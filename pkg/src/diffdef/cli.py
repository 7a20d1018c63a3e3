"""Command-line entry point.

Every subcommand writes a run manifest next to its outputs: the exact argv,
the effective config, seeds, per-phase timings, and a sha256 digest of each
file produced. Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import config as cfgmod
from . import diffusion, phantoms, selftest
from .atlas import (DiffDefConfig, evaluate_atlas, generate_atlas, linear_atlas,
                    sample_neighborhood, train_diffdef, unbiased_iterative_atlas)
from .autoencoder import train_autoencoder
from .errors import DiffdefError
from .fields import warp_labels
from .fileio import (load_checkpoint, load_cohort, load_model, read_field,
                     save_checkpoint, save_cohort, save_model, write_field,
                     write_manifest)
from .registration import iterative_register, train_regnet


def _write_curve_csv(path, curve):
    keys = list(curve)
    rows = len(curve[keys[0]]) if keys else 0
    with open(path, "w") as f:
        f.write(",".join(["epoch"] + keys) + "\n")
        for i in range(rows):
            f.write(",".join([str(i)] + [f"{curve[k][i]:.8g}" for k in keys]) + "\n")


def _cmd_phantom_gen(args):
    cp = cfgmod.load_config(args.config)
    pk = cfgmod.phantom_kwargs(cp)
    n = args.n if args.n is not None else pk["n"]
    mode = args.mode or pk["mode"]
    excluded = pk["excluded"]
    if args.excluded is not None:
        excluded = [float(v) for v in args.excluded.split(",") if v.strip()]
    t0 = time.time()
    cohort = phantoms.make_cohort(
        n, condition_sampler=mode, seed=args.seed, excluded=excluded,
        gap=args.gap if args.gap is not None else pk["gap"],
        grid=phantoms.Grid((pk["grid"], pk["grid"])),
        radii_range=pk["radii_range"], warp_amplitude=pk["warp_amplitude"],
        noise_sigma=pk["noise_sigma"])
    save_cohort(args.out, cohort)
    outputs = [os.path.join(args.out, p) for p in sorted(os.listdir(args.out))
               if p.endswith((".field", ".json"))]
    write_manifest(os.path.join(args.out, "manifest.json"), args.argv,
                   cfgmod.config_snapshot(cp), {"master": args.seed}, outputs,
                   timings={"generate": time.time() - t0})
    print(f"wrote {len(cohort)} phantoms to {args.out}")
    return 0


def _cmd_train_ae(args):
    cp = cfgmod.load_config(args.config)
    cohort = load_cohort(args.cohort)
    cfg = cfgmod.ae_config(cp, cohort.grid.shape)
    t0 = time.time()
    params = train_autoencoder(cohort, cfg, seed=args.seed)
    save_checkpoint(args.out, params)
    curve_path = args.out + ".curve.csv"
    _write_curve_csv(curve_path, params.meta["curve"])
    write_manifest(args.out + ".manifest.json", args.argv,
                   cfgmod.config_snapshot(cp), {"seed": args.seed},
                   [args.out, curve_path], timings={"train": time.time() - t0})
    print(f"autoencoder checkpoint written to {args.out}")
    return 0


def _cmd_train_regnet(args):
    cp = cfgmod.load_config(args.config)
    cohort = load_cohort(args.cohort)
    cfg = cfgmod.reg_config(cp)
    t0 = time.time()
    params = train_regnet(cohort, cfg, seed=args.seed)
    save_checkpoint(args.out, params)
    curve_path = args.out + ".curve.csv"
    _write_curve_csv(curve_path, {"loss": params.meta["curve"]})
    write_manifest(args.out + ".manifest.json", args.argv,
                   cfgmod.config_snapshot(cp), {"seed": args.seed},
                   [args.out, curve_path], timings={"train": time.time() - t0})
    print(f"regnet checkpoint written to {args.out}")
    return 0


def _cmd_train_diffdef(args):
    cp = cfgmod.load_config(args.config)
    cohort = load_cohort(args.cohort)
    ae_params, _ = load_checkpoint(args.ae)
    regnet_params, _ = load_checkpoint(args.regnet)
    cfg = cfgmod.diffdef_config(cp)
    sched = diffusion.build_schedule(**cfgmod.diffusion_kwargs(cp))
    a_ref = phantoms.reference_atlas(cohort.grid).image
    t0 = time.time()
    model = train_diffdef(cohort, a_ref, ae_params, regnet_params, cfg,
                          seed=args.seed, sched=sched)
    save_model(args.out, model)
    curve_path = args.out + ".curve.csv"
    _write_curve_csv(curve_path, model.curve)
    write_manifest(args.out + ".manifest.json", args.argv,
                   cfgmod.config_snapshot(cp), {"seed": args.seed},
                   [args.out, curve_path], timings={"train": time.time() - t0})
    print(f"model checkpoint written to {args.out}")
    return 0


def _cmd_build_atlas(args):
    model = load_model(args.checkpoint)
    ref = phantoms.reference_atlas(model.grid)
    t0 = time.time()
    phi, atlas = generate_atlas(model, ref.image, args.condition, seed=args.seed,
                                n_steps=args.steps)
    labels = warp_labels(ref.labels, phi)
    paths = [args.out + ".phi.field", args.out + ".atlas.field",
             args.out + ".labels.field"]
    write_field(paths[0], phi)
    write_field(paths[1], atlas)
    write_field(paths[2], labels)
    write_manifest(args.out + ".manifest.json", args.argv, {},
                   {"seed": args.seed, "condition": args.condition}, paths,
                   timings={"sample": time.time() - t0})
    print(f"atlas written to {paths[1]}")
    return 0


def _cmd_baseline(args):
    cp = cfgmod.load_config(args.config)
    cohort = load_cohort(args.cohort)
    dcfg = cfgmod.diffdef_config(cp)
    rcfg = cfgmod.reg_config(cp)
    ref = phantoms.reference_atlas(cohort.grid)
    nbhd = sample_neighborhood(cohort, args.condition, dcfg.n_neighbors,
                               dcfg.sigma, args.seed)
    t0 = time.time()
    if args.method == "linear":
        atlas = linear_atlas(nbhd)
    else:
        atlas = unbiased_iterative_atlas(nbhd, ref.image, rcfg)
    # atlas labels by propagating the reference labels onto the new atlas
    res = iterative_register(atlas, ref.image, rcfg)
    labels = warp_labels(ref.labels, res.phi)
    paths = [args.out + ".atlas.field", args.out + ".labels.field"]
    write_field(paths[0], atlas)
    write_field(paths[1], labels)
    write_manifest(args.out + ".manifest.json", args.argv,
                   cfgmod.config_snapshot(cp),
                   {"seed": args.seed, "condition": args.condition}, paths,
                   timings={"build": time.time() - t0})
    print(f"{args.method} baseline written to {paths[0]}")
    return 0


def _cmd_eval(args):
    cp = cfgmod.load_config(args.config)
    atlas = read_field(args.atlas)
    labels = read_field(args.labels)
    cohort = load_cohort(args.testset)
    rcfg = cfgmod.reg_config(cp)
    t0 = time.time()
    metrics = evaluate_atlas(atlas, labels, cohort.subjects, rcfg)
    payload = metrics.as_dict()
    payload["n_subjects"] = len(cohort)
    with open(args.out, "w") as f:
        json.dump(payload, f, indent=1)
    outputs = [args.out]
    if args.csv:
        cond = float(sum(s.condition for s in cohort.subjects) / len(cohort))
        header = "condition,dsc_mean,dsc_std,folding_pct,smoothness,avg_disp\n"
        row = (f"{cond:.4f},{metrics.dice_mean:.6f},{metrics.dice_std:.6f},"
               f"{metrics.folding_pct:.6f},{metrics.smoothness:.6f},"
               f"{metrics.avg_disp:.6f}\n")
        new = not os.path.exists(args.csv)
        with open(args.csv, "a") as f:
            if new:
                f.write(header)
            f.write(row)
        outputs.append(args.csv)
    write_manifest(args.out + ".manifest.json", args.argv,
                   cfgmod.config_snapshot(cp), {}, outputs,
                   timings={"evaluate": time.time() - t0})
    print(f"dice {metrics.dice_mean:.4f} +/- {metrics.dice_std:.4f}, "
          f"folding {metrics.folding_pct:.4f}%, avg disp {metrics.avg_disp:.2f}")
    return 0


def _cmd_selftest(args):
    results = selftest.run_selftest()
    failures = 0
    for r in results:
        tag = "PASS" if r.ok else "FAIL"
        print(f"{tag} {r.name}: {r.detail}")
        failures += 0 if r.ok else 1
    print(f"{len(results) - failures}/{len(results)} suites passed")
    return 0 if failures == 0 else 1


def _build_parser():
    p = argparse.ArgumentParser(prog="diffdef",
                                description="conditional atlas construction toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom-gen", help="generate a phantom cohort")
    g.add_argument("--n", type=int, default=None)
    g.add_argument("--mode", choices=["uniform", "heldout"], default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--excluded", default=None, help="comma-separated condition values")
    g.add_argument("--gap", type=float, default=None)
    g.add_argument("--config", default=None)
    g.set_defaults(func=_cmd_phantom_gen)

    g = sub.add_parser("train-ae", help="pretrain the field autoencoder")
    g.add_argument("--cohort", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", default=None)
    g.set_defaults(func=_cmd_train_ae)

    g = sub.add_parser("train-regnet", help="train the registration net")
    g.add_argument("--cohort", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", default=None)
    g.set_defaults(func=_cmd_train_regnet)

    g = sub.add_parser("train-diffdef", help="joint conditional-diffusion training")
    g.add_argument("--config", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cohort", required=True)
    g.add_argument("--ae", required=True, help="autoencoder checkpoint")
    g.add_argument("--regnet", required=True, help="registration net checkpoint")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_train_diffdef)

    g = sub.add_parser("build-atlas", help="sample a conditional atlas")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--condition", type=float, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--steps", type=int, default=None)
    g.add_argument("--out", required=True, help="output prefix")
    g.set_defaults(func=_cmd_build_atlas)

    g = sub.add_parser("baseline", help="conventional atlas baselines")
    g.add_argument("--method", choices=["linear", "iterative"], required=True)
    g.add_argument("--condition", type=float, required=True)
    g.add_argument("--cohort", required=True)
    g.add_argument("--out", required=True, help="output prefix")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", default=None)
    g.set_defaults(func=_cmd_baseline)

    g = sub.add_parser("eval", help="registration-based atlas evaluation")
    g.add_argument("--atlas", required=True)
    g.add_argument("--labels", required=True)
    g.add_argument("--testset", required=True)
    g.add_argument("--out", required=True, help="metrics JSON path")
    g.add_argument("--csv", default=None, help="append an aggregate CSV row")
    g.add_argument("--config", default=None)
    g.set_defaults(func=_cmd_eval)

    g = sub.add_parser("selftest", help="run the built-in oracle suites")
    g.set_defaults(func=_cmd_selftest)
    return p


def run_command(argv) -> int:
    """Dispatch one subcommand; in-process equivalent of the console script."""
    parser = _build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    args.argv = ["diffdef"] + list(argv)
    try:
        return args.func(args)
    except DiffdefError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
