"""Command-line interface.

Subcommands::

    stretchq phantom   spec JSON or preset -> dwi.nii, gradient table, truth maps
    stretchq fit       dwi + gradient table -> fit container
    stretchq measures  fit container or dwi -> rtop/qmsd/qmfd.nii, CSV, figure
    stretchq verify    closed-form and quadrature self-checks
    stretchq analyze corr|sweep

Every file written gets a ``.json`` sidecar with the resolved configuration,
its hash (thread count excluded) and the software version. Exit codes: 0
success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .acquisition import (
    DEFAULT_ANGULAR_TOL,
    DEFAULT_B_TOLERANCE,
    effective_diffusion_time,
    format_bvals,
    format_bvecs,
    group_shells,
    match_directions,
    read_gradient_scheme,
)
from .exceptions import DataError, NumericalError
from .fitting import FitOptions, fit_stretched_volume

logger = logging.getLogger("stretchq")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
# keys that do not change results and stay out of the config hash
_NOT_HASHED = {"threads", "verbose", "output", "config", "command", "action"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", help="JSON file of option values; command-line flags take precedence")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _dwi_inputs(p):
    p.add_argument("--dwi", help="4-D diffusion-weighted NIfTI")
    p.add_argument("--bvals", help="FSL b-value file [s/mm^2]")
    p.add_argument("--bvecs", help="FSL gradient direction file")
    p.add_argument("--tau", type=float, help="effective diffusion time [s]")
    p.add_argument("--small-delta", type=float, help="gradient duration [s], with --big-delta instead of --tau")
    p.add_argument("--big-delta", type=float, help="gradient separation [s]")
    p.add_argument("--mask", help="3-D NIfTI, nonzero voxels are processed")
    p.add_argument("--b-tolerance", type=float, default=DEFAULT_B_TOLERANCE, help="shell grouping tolerance")


def _fit_options(p):
    p.add_argument("--shells", type=float, nargs="+", help="b-values of the shells entering the fit")
    p.add_argument("--angular-tol", type=float, default=DEFAULT_ANGULAR_TOL,
                   help="degrees within which directions on different shells are matched")
    p.add_argument("--max-iter", type=int, default=FitOptions.max_iter)
    p.add_argument("--xtol", type=float, default=FitOptions.xtol)
    p.add_argument("--gtol", type=float, default=FitOptions.gtol)


def build_parser():
    parser = _Parser(prog="stretchq", description="q-space measures from stretched-exponential fits")
    parser.add_argument("--version", action="version", version=f"stretchq {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs = {}

    p = subs["phantom"] = sub.add_parser("phantom", help="simulate a multi-shell acquisition")
    _common(p)
    p.add_argument("--spec", help="phantom description (JSON)")
    p.add_argument("--preset", choices=("human", "sweep", "two-region", "mild"))
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--noise", choices=("none", "rician"))
    p.add_argument("--snr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", help="output directory")

    p = subs["fit"] = sub.add_parser("fit", help="fit (D, alpha) per voxel and direction")
    _common(p)
    _dwi_inputs(p)
    _fit_options(p)
    p.add_argument("-o", "--output", help="fit container path")

    p = subs["measures"] = sub.add_parser("measures", help="RTOP, QMSD and QMFD maps at one shell")
    _common(p)
    _dwi_inputs(p)
    _fit_options(p)
    p.add_argument("--fit", help="fit container from 'stretchq fit' (instead of fitting --dwi)")
    p.add_argument("--shell", type=float, help="b-value of the shell to evaluate at")
    p.add_argument("--estimator", default="direct", choices=("direct", "expansion", "gaussian", "dti"))
    p.add_argument("--e-source", default="fitted", choices=("fitted", "measured"))
    p.add_argument("--sh-resample", nargs=3, metavar=("L", "LAMBDA", "N"),
                   help="resample onto N directions through an order-L SH fit first")
    p.add_argument("--dti-convention", default="gaussian", choices=("gaussian", "3pi"))
    p.add_argument("--labels", help="integer label volume for per-region CSV rows")
    p.add_argument("--float64", action="store_true", help="write maps as float64 instead of float32")
    p.add_argument("-o", "--output", help="output directory")

    p = subs["verify"] = sub.add_parser("verify", help="check estimators against closed forms and quadrature")
    _common(p)
    p.add_argument("--suite", default="gaussian", choices=("gaussian", "oracle", "all"))
    p.add_argument("--fields", type=int, default=20, help="random fields in the oracle suite")
    p.add_argument("--seed", type=int, default=0)

    p = subs["analyze"] = sub.add_parser("analyze", help="correlation matrices and b_max sweeps")
    asub = p.add_subparsers(dest="action", parser_class=_Parser)
    a = subs["analyze corr"] = asub.add_parser("corr", help="Pearson correlations between maps")
    _common(a)
    a.add_argument("--map", action="append", metavar="NAME=PATH", help="map to compare (repeat)")
    a.add_argument("--mask")
    a.add_argument("-o", "--output", help="output directory")
    a = subs["analyze sweep"] = asub.add_parser("sweep", help="measure stability versus b_max")
    _common(a)
    _dwi_inputs(a)
    a.add_argument("--bmax", type=float, nargs="+", help="largest fitted b-value of each configuration")
    a.add_argument("--b-eval", type=float, default=3000.0, help="fixed evaluation shell")
    a.add_argument("--estimator", default="direct", choices=("direct", "expansion"))
    a.add_argument("-o", "--output", help="output directory")
    return parser, subs


def parse_args(argv):
    """Parse ``argv``; values from ``--config`` act as defaults for the flags."""
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("stretchq: error: a subcommand is required")
    if args.command == "analyze" and getattr(args, "action", None) is None:
        raise UsageError("stretchq analyze: error: choose 'corr' or 'sweep'")
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise DataError(f"config {args.config} must hold a JSON object")
        key = args.command if args.command != "analyze" else f"analyze {args.action}"
        sp = subs[key]
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(k.replace("-", "_") for k in cfg) - known)
        if unknown:
            raise UsageError(f"stretchq: error: unknown config key(s): {', '.join(unknown)}")
        sp.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        raise UsageError("stretchq: error: --threads must be >= 1")
    return args


# ---------------------------------------------------------------------------
# helpers


def resolved_config(args):
    return {k: v for k, v in sorted(vars(args).items()) if v is not None}


def config_hash(args):
    cfg = {k: v for k, v in resolved_config(args).items() if k not in _NOT_HASHED}
    cfg["command"] = args.command + (f" {args.action}" if getattr(args, "action", None) else "")
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def write_sidecar(path, args, **extra):
    side = {
        "software": f"stretchq {__version__}",
        "config_hash": config_hash(args),
        "config": {k: v for k, v in resolved_config(args).items() if k not in ("verbose", "threads")},
    }
    side.update(extra)
    with open(f"{path}.json", "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return str(v)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"stretchq {args.command}: error: missing required option(s): {flags}")


def _outdir(args):
    _require(args, "output")
    os.makedirs(args.output, exist_ok=True)
    return args.output


def _tau(args):
    if args.tau is not None:
        tau = args.tau
    elif args.small_delta is not None and args.big_delta is not None:
        tau = effective_diffusion_time(args.small_delta, args.big_delta)
    else:
        raise UsageError(f"stretchq {args.command}: error: give --tau or both --small-delta and --big-delta")
    if not tau > 0:
        raise UsageError(f"stretchq {args.command}: error: tau must be positive, got {tau}")
    return tau


def _load_dwi(args):
    from .volume_io import read_nifti

    _require(args, "dwi", "bvals", "bvecs")
    tau = _tau(args)
    scheme = read_gradient_scheme(args.bvals, args.bvecs, tau)
    for w in scheme.warnings:
        logger.warning(w)
    vol = read_nifti(args.dwi)
    if vol.dims[3] != scheme.n_measurements:
        raise DataError(
            f"{args.dwi} has {vol.dims[3]} volumes but the gradient table has {scheme.n_measurements} entries"
        )
    mask = _load_mask(args.mask, vol.dims[:3]) if getattr(args, "mask", None) else None
    return vol, scheme, mask


def _load_mask(path, spatial):
    from .volume_io import read_nifti

    m = read_nifti(path).data[..., 0]
    if m.shape != tuple(spatial):
        raise DataError(f"mask {path} has shape {m.shape}, expected {tuple(spatial)}")
    return m > 0


def _fit_opts(args):
    return FitOptions(xtol=args.xtol, gtol=args.gtol, max_iter=args.max_iter)


def _fit(args, vol, scheme, mask):
    grouping = group_shells(scheme, args.b_tolerance)
    bundles = match_directions(scheme, grouping, args.angular_tol)
    logger.info("fitting %d direction bundle(s) on shells %s", bundles.canonical.shape[0],
                ", ".join(f"{b:g}" for b in bundles.shell_b_centers))
    return fit_stretched_volume(vol.data, scheme, bundles, mask, args.shells, _fit_opts(args), args.threads,
                                b_tolerance=args.b_tolerance)


def _write_map(path, arr, affine, args, dtype="float32", **meta):
    from .volume_io import Volume4D, write_nifti

    write_nifti(Volume4D(np.asarray(arr, dtype=float), affine, header={"descrip": "stretchq map"}), path, dtype)
    write_sidecar(path, args, **meta)


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args):
    from .phantom import generate_phantom, spec_from_dict
    from .plotting import plot_map_panels
    from .qspace import QMaps
    from .volume_io import summarize_maps, write_csv, write_nifti

    out = _outdir(args)
    if args.spec:
        with open(args.spec) as fh:
            d = json.load(fh)
    else:
        d = {"preset": args.preset or "human"}
    for key in ("dims", "seed", "snr"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    if args.noise is not None:
        d["noise"] = args.noise
    spec = spec_from_dict(d)
    vol, truth = generate_phantom(spec)
    scheme = spec.scheme

    path = os.path.join(out, "dwi.nii")
    write_nifti(vol, path, "float64")
    meta = {"tau": scheme.tau, "dims": list(spec.dims), "noise": spec.noise, "snr": spec.snr, "seed": spec.seed,
            "regions": truth.region_names, "shells": sorted({float(b) for b in scheme.bvals if b > 0})}
    write_sidecar(path, args, **meta)
    for ext, text in (("bval", format_bvals(scheme)), ("bvec", format_bvecs(scheme))):
        with open(os.path.join(out, f"dwi.{ext}"), "w") as fh:
            fh.write(text)
    maps = {"labels": truth.labels.astype(float), "truth_alpha": truth.alpha,
            "truth_rtop": truth.rtop, "truth_qmsd": truth.qmsd, "truth_qmfd": truth.qmfd}
    for name, arr in maps.items():
        _write_map(os.path.join(out, f"{name}.nii"), arr, vol.affine, args, "float64", **meta)
    qm = QMaps(truth.rtop, truth.qmsd, truth.qmfd, {"estimator": "truth", "shell_b": None})
    regions = {name or f"region_{i}": truth.labels == i for i, name in enumerate(truth.region_names)}
    csv_path = os.path.join(out, "truth.csv")
    write_csv(summarize_maps(qm, regions), csv_path)
    write_sidecar(csv_path, args, **meta)
    plot_map_panels(qm, os.path.join(out, "truth.png"), title="ground truth")
    logger.info("phantom written to %s", out)
    return EXIT_OK


def cmd_fit(args):
    from .volume_io import write_fit

    _require(args, "output")
    vol, scheme, mask = _load_dwi(args)
    fit = _fit(args, vol, scheme, mask)
    os.makedirs(os.path.dirname(os.path.abspath(args.output)), exist_ok=True)
    n_bad = int((~fit.converged[fit.mask]).sum())
    if n_bad:
        logger.warning("%d voxel-direction fit(s) did not converge", n_bad)
    write_fit(fit, args.output, f"stretchq {__version__}", affine=vol.affine)
    write_sidecar(args.output, args, tau=fit.tau, fit_shells=fit.fit_shells, shell_b=fit.shell_b,
                  n_directions=int(fit.directions.shape[0]), n_unconverged=n_bad)
    return EXIT_OK


def cmd_measures(args):
    from .plotting import plot_map_panels
    from .qspace import compute_dti_maps, compute_gaussian_maps, compute_maps
    from .volume_io import read_fit, read_nifti, summarize_maps, write_csv

    out = _outdir(args)
    est = args.estimator
    vol = scheme = mask = None
    if args.fit and est in ("direct", "expansion"):
        fit, fmeta = read_fit(args.fit, with_metadata=True)
        affine = np.array(fmeta.get("affine", np.eye(4).ravel()), dtype=float).reshape(4, 4)
        if args.mask:
            mask = _load_mask(args.mask, fit.shape)
        if args.e_source == "measured":
            vol, _, _ = _load_dwi(args)
    else:
        vol, scheme, mask = _load_dwi(args)
        affine = vol.affine
        fit = _fit(args, vol, scheme, mask) if est in ("direct", "expansion") else None
    if est != "dti":
        _require(args, "shell")

    if est in ("direct", "expansion"):
        sh = None
        if args.sh_resample:
            L, lam, n = args.sh_resample
            sh = (int(L), float(lam), int(n))
        qm = compute_maps(fit, args.shell, est, args.e_source, None if vol is None else vol.data, mask,
                          args.b_tolerance, sh)
    elif est == "gaussian":
        qm = compute_gaussian_maps(vol.data, scheme, args.shell, mask, b_tolerance=args.b_tolerance)
    else:
        qm = compute_dti_maps(vol.data, scheme, args.shells, mask, args.dti_convention,
                              b_tolerance=args.b_tolerance)

    meta = dict(qm.metadata)
    dtype = "float64" if args.float64 else "float32"
    for name, arr in qm.items():
        _write_map(os.path.join(out, f"{name}.nii"), arr, affine, args, dtype, measure=name, **meta)

    valid = np.isfinite(qm.rtop)
    regions = {"all": valid}
    if args.labels:
        labels = read_nifti(args.labels).data[..., 0]
        if labels.shape != valid.shape:
            raise DataError(f"labels {args.labels} have shape {labels.shape}, expected {valid.shape}")
        for lab in np.unique(labels[valid]):
            regions[f"label_{int(lab)}"] = valid & (labels == lab)
    csv_path = os.path.join(out, "summary.csv")
    write_csv(summarize_maps(qm, regions), csv_path)
    write_sidecar(csv_path, args, **meta)
    plot_map_panels(qm, os.path.join(out, "maps.png"))
    return EXIT_OK


def cmd_verify(args):
    from .verification import format_table, gaussian_suite, oracle_suite

    checks = []
    if args.suite in ("gaussian", "all"):
        checks += gaussian_suite()
    if args.suite in ("oracle", "all"):
        checks += oracle_suite(n_fields=args.fields, seed=args.seed)
    print(format_table(checks))
    n_fail = sum(not c.passed for c in checks)
    print(f"{len(checks) - n_fail}/{len(checks)} checks passed")
    return EXIT_OK if n_fail == 0 else EXIT_NUMERICAL


def cmd_corr(args):
    from .analysis import correlation_matrix, correlation_rows, scatter_pairs
    from .plotting import plot_correlogram
    from .volume_io import read_nifti, write_csv

    out = _outdir(args)
    if not args.map or len(args.map) < 2:
        raise UsageError("stretchq analyze corr: error: give at least two --map NAME=PATH")
    maps = {}
    for item in args.map:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"stretchq analyze corr: error: expected NAME=PATH, got {item!r}")
        maps[name] = read_nifti(path).data[..., 0]
    shapes = {m.shape for m in maps.values()}
    if len(shapes) != 1:
        raise DataError(f"maps differ in shape: {sorted(shapes)}")
    mask = _load_mask(args.mask, shapes.pop()) if args.mask else None
    names, rho = correlation_matrix(maps, mask)
    path = os.path.join(out, "correlation.csv")
    write_csv(correlation_rows(names, rho), path, ["map"] + names)
    write_sidecar(path, args, maps=names)
    fields, rows = scatter_pairs(maps, mask)
    path = os.path.join(out, "scatter.csv")
    write_csv(rows, path, fields)
    write_sidecar(path, args, maps=names)
    plot_correlogram(maps, os.path.join(out, "correlogram.png"), mask)
    print("\n".join(f"{a:>12} " + " ".join(f"{v:8.4f}" for v in row) for a, row in zip(names, rho)))
    return EXIT_OK


def cmd_sweep(args):
    from .analysis import SWEEP_FIELDS, bmax_sweep
    from .plotting import plot_sweep
    from .volume_io import write_csv

    out = _outdir(args)
    _require(args, "bmax")
    vol, scheme, mask = _load_dwi(args)
    res = bmax_sweep(vol.data, scheme, args.bmax, mask, args.b_eval, args.estimator, threads=args.threads,
                     b_tolerance=args.b_tolerance)
    path = os.path.join(out, "sweep.csv")
    write_csv(res.rows(), path, SWEEP_FIELDS)
    write_sidecar(path, args, tau=scheme.tau, estimator=res.estimator, b_eval=res.b_eval,
                  pairing=res.reference, b_max=res.b_max)
    plot_sweep(res, os.path.join(out, "sweep.png"))
    return EXIT_OK


COMMANDS = {"phantom": cmd_phantom, "fit": cmd_fit, "measures": cmd_measures, "verify": cmd_verify,
            "analyze corr": cmd_corr, "analyze sweep": cmd_sweep}


def run(argv=None):
    """Run the CLI and return its exit code."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        level = logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2)
        logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s",
                            force=True)
        key = args.command if args.command != "analyze" else f"analyze {args.action}"
        return COMMANDS[key](args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"stretchq: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"stretchq: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main():
    sys.exit(run())
