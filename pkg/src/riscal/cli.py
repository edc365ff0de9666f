"""
Command-line entry point: ``riscal <command> [options]``.

Output files default to the directory in ``RISCAL_OUTPUT_DIR`` (or
``./results``). Configuration errors exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .channel import ConfigError, build_realization, realization_snr, scale_noise_to_snr, synthesize_observations
from .config import EXPERIMENT_KINDS, ExperimentSpec, load_config
from .crlb import SingularFimError, localization_bounds
from .geometry import C_LIGHT, forward_map
from .harness import (
    BLIND_VARIANTS, DEFAULT_BLIND_THRESHOLD, STATE_METRICS, blind_map_table, channel_errors, experiment_blind_map,
    output_dir, run_experiment, run_trial, state_errors,
)


def _out_path(arg, default_name: str) -> Path:
    return Path(arg) if arg else output_dir() / default_name


def _realization(args, loaded):
    seed = loaded.realization_seed if args.realization_seed is None else args.realization_seed
    real = build_realization(loaded.scenario, seed)
    if args.snr is not None:
        real = scale_noise_to_snr(real, args.snr)
    return real


def _write_rows(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def cmd_simulate(args, loaded) -> str:
    real = _realization(args, loaded)
    obs = synthesize_observations(real, args.seed)
    rows = [(g, k, m, repr(float(v.real)), repr(float(v.imag)))
            for (g, k, m), v in np.ndenumerate(obs.y)]
    path = _write_rows(_out_path(args.out, "observations.csv"), ("g", "k", "m", "re", "im"), rows)
    return f"wrote {obs.y.size} samples at SNR {realization_snr(real):.2f} dB to {path}"


def cmd_estimate(args, loaded) -> str:
    real = _realization(args, loaded)
    res = run_trial(real, args.seed, loaded.search, dither=False)
    truth = forward_map(real.state, real.config.bs)
    rows = []
    for stage, eta in (("coarse", res.coarse), ("refined", res.refined)):
        if eta is None:
            continue
        for name, v, t in zip(eta.NAMES, eta.to_vector(C_LIGHT), truth.to_vector(C_LIGHT)):
            rows.append((stage, name, repr(float(v)), repr(float(t))))
    summary = f"trial failed at {res.failure}" if not res.ok else ""
    if res.rounds:
        est = res.estimate()
        for name, v, t in zip(("pU_x", "pU_y", "pU_z", "pR_x", "pR_y", "pR_z", "o3", "delta"),
                              est.to_vector(), real.state.to_vector()):
            rows.append((f"Q{len(res.rounds) - 1}", name, repr(float(v)), repr(float(t))))
        err = state_errors(est, real.state)
        summary = (f"p_U error {err['p_U']:.4g} m, p_R error {err['p_R']:.4g} m, "
                   f"o3 error {np.degrees(err['o3']):.4g} deg")
    elif res.refined is not None:
        summary += f"; refined tau_R error {channel_errors(res.refined, truth)['tau_R']:.4g} m"
    path = _write_rows(_out_path(args.out, "estimate.csv"), ("stage", "parameter", "estimate", "truth"), rows)
    return f"{summary} ({path})"


def cmd_bounds(args, loaded) -> str:
    real = _realization(args, loaded)
    known = tuple(args.known)
    try:
        eb = localization_bounds(real, known=known)
    except SingularFimError as exc:
        raise ConfigError(f"singular Fisher information: {exc}") from exc
    if args.out:
        _write_rows(Path(args.out), ("metric", "eb"), [(k, repr(float(eb[k]))) for k in STATE_METRICS if k in eb])
    parts = [f"EB(p_U)={eb['p_U']:.4g} m", f"EB(p_R)={eb['p_R']:.4g} m"]
    if "o3" in eb:
        parts.append(f"EB(o3)={np.degrees(eb['o3']):.4g} deg")
    if "delta" in eb:
        parts.append(f"EB(delta)={eb['delta']:.4g} m")
    return f"SNR {realization_snr(real):.2f} dB: " + ", ".join(parts)


def cmd_experiment(args, loaded) -> str:
    d = dict(loaded.experiment)
    if d.get("kind") not in (None, args.kind):
        d = {}
    for key in ("trials", "master_seed"):
        v = getattr(args, key)
        if v is not None:
            d[key] = v
    if args.sweep is not None:
        d["sweep"] = args.sweep
    spec = ExperimentSpec.from_dict(d, args.kind)
    seed = loaded.realization_seed if args.realization_seed is None else args.realization_seed
    table = run_experiment(loaded.scenario, spec, seed, loaded.search, workers=args.workers)
    path = table.write_csv(_out_path(args.out or spec.output, f"{args.kind}.csv"))
    return f"{args.kind}: {len(table.rows)} rows over {len(spec.sweep)} sweep points -> {path}"


def cmd_blindmap(args, loaded) -> str:
    variants = tuple(dict.fromkeys(args.variant or BLIND_VARIANTS))
    seed = loaded.realization_seed if args.realization_seed is None else args.realization_seed
    bm = experiment_blind_map(loaded.scenario, None, seed, variants=variants, grid=args.grid,
                              height=args.height, threshold=args.threshold, workers=args.workers)
    path = bm.write_csv(_out_path(args.out, "blindmap.csv"))
    blind_map_table(bm).write_csv(path.with_name(path.stem + "_summary.csv"))
    if args.png:
        for v in variants:
            bm.write_png(path.with_name(f"{path.stem}_{v}.png"), v)
    s = [bm.summary(v) for v in variants]
    text = "; ".join(f"{x['variant']}: blind {100 * x['blind_fraction']:.1f}%, p95 {x['p95']:.3g} m" for x in s)
    return f"{text} -> {path}"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riscal", description="Active-RIS joint localization and calibration.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML scenario/experiment file (defaults to the packaged scenario)")
    common.add_argument("--out", help="output file")
    common.add_argument("--realization-seed", type=int, help="seed of gains, combiner and RIS profiles")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write one noisy observation set as CSV")
    s.add_argument("--snr", type=float, help="rescale the noise to this SNR [dB]")
    s.add_argument("--seed", type=int, default=0, help="pilot and noise seed")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", parents=[common], help="run the estimation pipeline on one observation")
    s.add_argument("--snr", type=float, help="rescale the noise to this SNR [dB]")
    s.add_argument("--seed", type=int, default=0, help="pilot and noise seed")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("bounds", parents=[common], help="print error bounds of the localization state")
    s.add_argument("--snr", type=float, help="rescale the noise to this SNR [dB]")
    s.add_argument("--known", action="append", default=[], choices=("o3", "delta"),
                   help="treat this parameter as known (repeatable)")
    s.set_defaults(func=cmd_bounds)

    s = sub.add_parser("experiment", parents=[common], help="run a Monte-Carlo study")
    s.add_argument("kind", choices=EXPERIMENT_KINDS)
    s.add_argument("--trials", type=int)
    s.add_argument("--master-seed", type=int)
    s.add_argument("--sweep", type=float, nargs="+", help="sweep values (SNR dB, P_var dBm, scatter points "
                                                          "or spacing in wavelengths)")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("blindmap", parents=[common], help="EB(p_U) map over the room")
    s.add_argument("--variant", action="append", choices=BLIND_VARIANTS, help="variant to compute (repeatable)")
    s.add_argument("--grid", type=int, default=50, help="cells per side")
    s.add_argument("--height", type=float, default=1.0)
    s.add_argument("--threshold", type=float, default=DEFAULT_BLIND_THRESHOLD,
                   help="EB above which a cell counts as blind [m]")
    s.add_argument("--png", action="store_true", help="also render heat maps (needs matplotlib)")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_blindmap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        loaded = load_config(args.config)
        msg = args.func(args, loaded)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"riscal: error: {exc}", file=sys.stderr)
        return 2
    print(msg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
