"""Command-line entry point: train, spectrum, surface, compare, gen-data."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .data import CsvFormatError, gen_dataset, write_csv
from .errors import ConfigError, NumericError
from .losssurface import grid_eval, plane_from_points, write_grid_csv, write_plane_json
from .posterior import load_posterior

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def cmd_train(args):
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    out = args.out or cfg.output_dir or "runs/" + f"{cfg.mode}-seed{cfg.seed}"
    report = harness.run_experiment(cfg, out_dir=out, canonical=args.canonical)
    m = report["metrics"]
    line = f"{cfg.mode} seed={cfg.seed} acc={m['acc']:.2f} ece={m['ece']:.4f} nll={m['nll']:.4f}"
    if "spectroscopy" in report:
        line += f" lambda1={report['spectroscopy']['mean_lambda1']:.4g}"
    print(line)
    print(f"report: {Path(out) / 'report.json'}")


def cmd_spectrum(args):
    """Recompute the spectroscopy of a finished run from its saved artifacts."""
    path = Path(args.report)
    report = harness.load_report(path)
    cfg = harness.config_from_dict(report["config"])
    artifacts = report.get("artifacts") or {}
    if not artifacts:
        raise ConfigError(f"{path} lists no artifacts; rerun train with --out")
    train, test, _ = harness.load_data(cfg)
    data = train if cfg.eval.hessian_data == "train" else test
    params = harness.load_params(path.parent / artifacts["weights"])
    post = load_posterior(path.parent / artifacts["posterior"]) if "posterior" in artifacts else None
    model = harness.build_model(cfg, train)
    weights = harness.draw_weights(cfg, params, post)
    spec = harness.spectroscopy(cfg, model, weights, data)
    out = {"flatness": spec["flatness"].to_dict()}
    if "weyl" in spec:
        out["weyl"] = spec["weyl"].to_dict()
    stored = (report.get("spectroscopy") or {}).get("mean_lambda1")
    out["matches_report"] = stored is not None and stored == out["flatness"]["mean_lambda1"]
    print(json.dumps(out, indent=2, sort_keys=True))


def cmd_surface(args):
    cfg = harness.load_config(args.config)
    train, test, _ = harness.load_data(cfg)
    data = train if args.data == "train" else test
    w0, w1, w2 = (harness.load_params(p) for p in (args.w0, args.w1, args.w2))
    model = harness.build_model(cfg, train)
    if w0.size != model.num_params:
        raise ConfigError(f"weight files hold {w0.size} parameters, config model has {model.num_params}")
    plane = plane_from_points(w0, w1, w2)
    extent = tuple(args.extent) if args.extent else plane.default_extent()
    resolution = (args.resolution, args.resolution)
    grid = grid_eval(model, plane, extent, resolution, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_grid_csv(out / "surface.csv", plane, extent, resolution, grid)
    write_plane_json(out / "plane.json", plane, extent, resolution)
    print(f"wrote {out / 'surface.csv'} and {out / 'plane.json'}")


def cmd_compare(args):
    text, table = harness.compare_runs(args.paths)
    print(text)
    if args.json:
        harness.atomic_write(args.json, json.dumps(table, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args):
    kw = {}
    if args.kind == "blobs":
        kw = {"classes": args.classes, "dim": args.dim, "center_distance": args.center_distance}
    train, test = gen_dataset(args.kind, args.n_per_class, args.noise, args.seed, **kw)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(train, out)
    print(f"wrote {len(train)} rows to {out}")
    if args.test_out:
        write_csv(test, args.test_out)
        print(f"wrote {len(test)} rows to {args.test_out}")


def build_parser():
    p = argparse.ArgumentParser(prog="sabma", description="Flat-posterior fine-tuning experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one experiment from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--canonical", action="store_true", help="omit wall-clock fields for byte-stable reports")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("spectrum", help="recompute Hessian spectra for a saved run")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_spectrum)

    f = sub.add_parser("surface", help="loss on the plane through three weight files")
    f.add_argument("--w0", required=True)
    f.add_argument("--w1", required=True)
    f.add_argument("--w2", required=True)
    f.add_argument("--config", required=True)
    f.add_argument("--out", default=".")
    f.add_argument("--resolution", type=int, default=21)
    f.add_argument("--extent", type=float, nargs=4, metavar=("AMIN", "AMAX", "BMIN", "BMAX"))
    f.add_argument("--data", choices=("train", "test"), default="train")
    f.set_defaults(func=cmd_surface)

    c = sub.add_parser("compare", help="tabulate reports, grouped by config hash")
    c.add_argument("paths", nargs="+")
    c.add_argument("--json", help="also write the table as JSON")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    g.add_argument("--kind", required=True, choices=("two_moons", "spirals", "blobs"))
    g.add_argument("--n-per-class", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--test-out")
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--center-distance", type=float, default=10.0)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (NumericError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CsvFormatError, FileNotFoundError, ValueError) as exc:
        # remaining ValueErrors come from bad inputs (collinear planes, bad shapes)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
