"""Command-line front end: certify, sweep, simulate, inspect, audit."""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import config as config_mod
from .certify import (
    CertificationReport,
    amplitude_audit,
    certify_coherent,
    certify_finite,
    certify_tomography,
    min_entropy,
    worker_count,
)
from .config import RunConfig
from .dsp import process_dataset, psd, read_trc, tone_snr_db, write_histogram_csv, write_trc
from .fock import gamma_map_operators, povm_elements
from .problems import TOMOGRAPHY, settings_fingerprint
from .quadrature import OutcomeDistribution, ProbeEnsemble, model_distribution
from .scan import ModelSettings, optimize_settings
from .simulate import simulate_dataset
from .solver import SolverOptions

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_NUMERICAL = 3

AXIS_KEYS = {
    "snr_db": "noise.snr_db",
    "gamma": "noise.gamma",
    "delta": "bins.delta",
    "R": "bins.R",
    "n_states": "ensemble.n_states",
    "alpha_bar": "ensemble.alpha_bar",
    "eta": "ensemble.eta",
    "cutoff": "cutoff",
    "r": "r",
}

log = logging.getLogger("qrngcert")


def _solver_options(cfg: RunConfig) -> SolverOptions:
    s = cfg.solver
    return SolverOptions(max_iter=s.max_iter, feas_tol=s.feas_tol, gap_tol=s.gap_tol)


def _write_json(path: Path, data: dict) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj))


# ---------------------------------------------------------------- distribution CSV


def write_distribution_csv(path, amplitudes: Sequence[float], counts) -> Path:
    """One row per probe state: ``alpha, count_0, ..., count_{d-1}``."""
    counts = np.asarray(counts)
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", *[f"count_{k}" for k in range(counts.shape[1])]])
        for a, row in zip(amplitudes, counts):
            w.writerow([repr(float(a)), *[int(c) for c in row]])
    return path


def read_distribution_csv(path) -> tuple[list[float], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "alpha":
        raise ValueError("distribution CSV must start with an 'alpha,count_0,...' header")
    amps = [float(r[0]) for r in rows[1:]]
    counts = np.array([[int(c) for c in r[1:]] for r in rows[1:]], dtype=np.int64)
    return amps, counts


# ---------------------------------------------------------------- certify


def _tomography_report(cfg: RunConfig, opts) -> tuple[Optional[CertificationReport], str]:
    noise = cfg.noise.build()
    bins = cfg.bins.build(noise)
    povm = povm_elements(noise, bins, cfg.cutoff)
    if noise.gamma:
        povm = gamma_map_operators(povm, noise.gamma)
    fp = settings_fingerprint(ProbeEnsemble((0.0,)), bins, cfg.cutoff, TOMOGRAPHY, noise.gamma, 1.0, noise.sigma_n)
    res = certify_tomography(povm, fingerprint=fp, opts=opts)
    if res.p_g is None:
        return None, res.status
    p = min(1.0, res.p_g)
    report = CertificationReport(
        p_g=p, h_min=min_entropy(p), p_g_finite=p, h_min_finite=min_entropy(p), epsilon=cfg.epsilon, r=1.0,
        mode=TOMOGRAPHY, fingerprint=fp, samples_per_state=None,
        meta={"status": res.status, "solver_status": res.solver_status, "finite_size": "not applicable"},
    )
    return report, res.status


def run_certify(cfg: RunConfig, out: Path) -> tuple[Optional[CertificationReport], str]:
    """Certification for one configuration; returns the report (or None) and a status."""
    opts = _solver_options(cfg)
    if cfg.mode == "tomo":
        return _tomography_report(cfg, opts)
    noise = cfg.noise.build()
    bins = cfg.bins.build(noise)
    src = cfg.input.source
    if src == "model":
        ens = cfg.ensemble.build()
        data = model_distribution(ens, noise, bins)
        exact = certify_coherent(ens, data, bins, cfg.cutoff, noise.gamma, cfg.r, opts)
        if exact.certificate is None:
            return None, exact.status
        totals = [cfg.input.samples] * ens.n_states
        fin, report = certify_finite(ens, data, bins, cfg.cutoff, cfg.epsilon, noise.gamma, cfg.r, opts, totals)
        # the asymptotic value comes from the exact program; both certificates are valid
        p_g = min(1.0, exact.p_g)
        p_fin = min(report.p_g_finite, 1.0) if report is not None else 1.0
        report = CertificationReport(
            p_g=p_g, h_min=min_entropy(p_g), p_g_finite=max(p_fin, p_g), h_min_finite=min_entropy(max(p_fin, p_g)),
            epsilon=cfg.epsilon, r=cfg.r, mode=exact.certificate.mode, fingerprint=exact.certificate.fingerprint,
            samples_per_state=totals,
            meta={"status": exact.status, "solver_status": exact.solver_status, "source": "model",
                  "finite_size_status": fin.status, **(report.meta if report is not None else {})},
        )
        return report, exact.status
    if src == "csv":
        amps, counts = read_distribution_csv(cfg.input.csv)
        ens = ProbeEnsemble(tuple(amps), cfg.ensemble.eta)
        obs = OutcomeDistribution.from_counts(counts)
        res, report = certify_finite(ens, obs, bins, cfg.cutoff, cfg.epsilon, noise.gamma, cfg.r, opts)
        if report is not None:
            report.meta.update(status=res.status, source="csv")
        return report, res.status
    # raw traces: the first probe trace is the generation state (vacuum)
    shot = read_trc(cfg.input.shot)
    traces = [read_trc(p) for p in cfg.input.traces]
    ds = process_dataset(shot, traces, workers=worker_count(cfg.workers or None))
    amps = [0.0] + [a.alpha for a in ds.amplitudes[1:]]
    counts = ds.counts(bins)
    out.mkdir(parents=True, exist_ok=True)
    for i, c in enumerate(counts):
        write_histogram_csv(out / f"histogram_{i}.csv", bins, c)
    write_distribution_csv(out / "distribution.csv", amps, counts)
    ens = ProbeEnsemble(tuple(amps), cfg.ensemble.eta)
    res, report = certify_finite(ens, OutcomeDistribution.from_counts(counts), bins, cfg.cutoff, cfg.epsilon,
                                 noise.gamma, cfg.r, opts)
    if report is not None:
        report.meta.update(
            status=res.status, source="trc", f_dlo_hz=ds.f_dlo_hz, phi_dlo=ds.phi_dlo, shot_noise_level=ds.snl,
            amplitudes=[{"alpha": a.alpha, "stderr": a.stderr} for a in ds.amplitudes],
            normalized_variance=[float(s.values.var()) for s in ds.series],
        )
    return report, res.status


def _exit_code(status: str) -> int:
    if status in ("optimal", "bounded"):
        return EXIT_OK
    if status == "infeasible":
        return EXIT_INFEASIBLE
    return EXIT_NUMERICAL


def cmd_certify(cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    report, status = run_certify(cfg, out)
    if report is None:
        _write_json(out / "status.json", {"status": status, "r": cfg.r, "mode": cfg.mode})
        print(f"no certificate: {status}")
        return _exit_code(status)
    _write_json(out / "report.json", report.to_dict())
    print(f"h_min={report.h_min:.6f} h_min_finite={report.h_min_finite:.6f} ({status})")
    return _exit_code(status)


# ---------------------------------------------------------------- sweep


def _point_entropy(cfg: RunConfig, opts) -> tuple[float, Optional[float], str]:
    noise = cfg.noise.build()
    bins = cfg.bins.build(noise)
    ens = cfg.ensemble.build()
    data = model_distribution(ens, noise, bins)
    res = certify_coherent(ens, data, bins, cfg.cutoff, noise.gamma, cfg.r, opts)
    if res.p_g is None:
        return -math.inf, None, res.status
    return res.h_min, res.p_g, res.status


def sweep_grid(cfg: RunConfig) -> list[dict]:
    names = list(cfg.sweep.axes)
    return [dict(zip(names, vals)) for vals in itertools.product(*(cfg.sweep.axes[n] for n in names))]


def run_sweep(cfg: RunConfig, workers: Optional[int] = None) -> list[dict]:
    """Evaluate every grid point (optionally maximizing over R and alpha_bar); rows in grid order."""
    opts = _solver_options(cfg)
    grid = sweep_grid(cfg)
    base = cfg.to_dict()
    base.pop("sweep")

    def one(point):
        point_cfg = config_mod.from_dict(base).with_overrides({AXIS_KEYS[k]: v for k, v in point.items()})
        row = dict(point)
        if cfg.sweep.optimize:
            def evaluate(settings):
                c = point_cfg.with_overrides({"bins.R": settings.range_r, "ensemble.alpha_bar": settings.alpha_bar})
                return _point_entropy(c, opts)[0]

            start = ModelSettings(
                point_cfg.bins.delta, point_cfg.ensemble.n_states, point_cfg.noise.snr_db, point_cfg.bins.R,
                point_cfg.ensemble.alpha_bar, point_cfg.ensemble.eta, point_cfg.noise.gamma, point_cfg.cutoff,
            )
            best = optimize_settings(start, evaluate, rounds=cfg.sweep.rounds, xtol=cfg.sweep.xtol)
            point_cfg = point_cfg.with_overrides(
                {"bins.R": best.settings.range_r, "ensemble.alpha_bar": best.settings.alpha_bar}
            )
            row.update(R_opt=best.settings.range_r, alpha_bar_opt=best.settings.alpha_bar)
        h, p, status = _point_entropy(point_cfg, opts)
        row.update(h_min=h if math.isfinite(h) else "", p_g=p if p is not None else "", status=status)
        return row

    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        return list(pool.map(one, grid))


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    rows = run_sweep(cfg, cfg.workers or None)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"{len(rows)} grid points -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------- simulate / inspect / audit


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    s = cfg.simulate
    shot, traces = simulate_dataset(
        s.amplitudes, s.seed, snr_db=float(cfg.noise.snr_db), eta=cfg.ensemble.eta, gamma=cfg.noise.gamma,
        f_mod_hz=s.f_mod_hz, sample_rate_hz=s.sample_rate_hz, n_samples=s.n_samples, adc_bits=s.adc_bits,
        adc_fullscale=s.adc_fullscale, df_hz=s.df_hz, phase=s.phase,
    )
    out.mkdir(parents=True, exist_ok=True)
    write_trc(out / "shot.trc", shot)
    for i, t in enumerate(traces):
        write_trc(out / f"probe_{i}.trc", t)
        if t.meta.get("clipping_warning"):
            print(f"warning: probe_{i} clipped {t.meta['clipped_fraction']:.1%} of samples")
    print(f"wrote shot.trc and {len(traces)} probe traces to {out}")
    return EXIT_OK


def cmd_inspect(paths: Sequence[str], out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        trace = read_trc(p)
        f, power = psd(trace, method="welch")
        stem = Path(p).stem
        with open(out / f"{stem}_psd.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["frequency_hz", "power"])
            w.writerows(zip(f.tolist(), power.tolist()))
        x = np.asarray(trace.samples, dtype=float)
        lim = 2 ** (trace.adc_bits - 1)
        stats = {
            "label": trace.label,
            "n_samples": int(x.size),
            "mean": float(x.mean()),
            "std": float(x.std()),
            "peak_frequency_hz": float(f[1:][np.argmax(power[1:])]),
            "tone_snr_db": tone_snr_db(trace, trace.f_mod_hz),
            "rail_fraction": float(np.mean((x <= -lim) | (x >= lim - 1))),
        }
        _write_json(out / f"{stem}_stats.json", stats)
        print(f"{stem}: peak at {stats['peak_frequency_hz']:.6g} Hz")
    return EXIT_OK


def cmd_audit(cfg: RunConfig, out: Path) -> int:
    noise = cfg.noise.build()
    bins = cfg.bins.build(noise)
    ens = cfg.ensemble.build()
    data = model_distribution(ens, noise, bins)
    points = amplitude_audit(ens, data, bins, cfg.cutoff, cfg.audit_r, noise.gamma, _solver_options(cfg),
                             cfg.workers or None)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "audit.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "h_min", "p_g", "status"])
        for p in points:
            w.writerow([p.r, "" if p.h_min is None else p.h_min, "" if p.p_g is None else p.p_g, p.status])
    print("\n".join(f"r={p.r:g}: {p.status} {'' if p.h_min is None else f'{p.h_min:.6f}'}" for p in points))
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


FLAGS = {
    "mode": ("mode", str),
    "cutoff": ("cutoff", int),
    "epsilon": ("epsilon", float),
    "r": ("r", float),
    "workers": ("workers", int),
    "snr_db": ("noise.snr_db", float),
    "gamma": ("noise.gamma", float),
    "eta": ("ensemble.eta", float),
    "n_states": ("ensemble.n_states", int),
    "alpha_bar": ("ensemble.alpha_bar", float),
    "delta": ("bins.delta", int),
    "R": ("bins.R", float),
    "bins_kind": ("bins.kind", str),
    "source": ("input.source", str),
    "samples": ("input.samples", int),
    "csv": ("input.csv", str),
    "shot": ("input.shot", str),
    "seed": ("simulate.seed", int),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qrngcert", description="Min-entropy certification for homodyne QRNGs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("certify", "sweep", "simulate", "inspect", "audit"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key, e.g. noise.snr_db=10")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "inspect":
            p.add_argument("traces", nargs="+", help=".trc files")
            continue
        for flag, (_, typ) in FLAGS.items():
            p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=typ)
        p.add_argument("--amplitudes", type=float, nargs="+", help="probe amplitudes, first must be 0")
        p.add_argument("--traces", nargs="+", help="probe .trc files (first is the vacuum probe)")
        p.add_argument("--r-values", dest="r_values", type=float, nargs="+", help="audit scalings")
        p.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2,...", help="sweep axis")
        p.add_argument("--optimize", action="store_true", help="maximize over R and alpha_bar at each sweep point")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()
    overrides = {}
    for flag, (key, _) in FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "amplitudes", None):
        overrides["ensemble.amplitudes"] = list(args.amplitudes)
        overrides["simulate.amplitudes"] = list(args.amplitudes)
    if getattr(args, "traces", None) and args.command != "inspect":
        overrides["input.traces"] = list(args.traces)
    if getattr(args, "r_values", None):
        overrides["audit_r"] = list(args.r_values)
    if getattr(args, "optimize", False):
        overrides["sweep.optimize"] = True
    for item in getattr(args, "axis", []):
        name, _, values = item.partition("=")
        overrides[f"sweep.axes.{name}"] = [_parse_value(v) for v in values.split(",")]
    for item in args.set:
        key, _, value = item.partition("=")
        overrides[key] = _parse_value(value)
    if args.out:
        overrides["out"] = args.out
    return cfg.with_overrides(overrides) if overrides else cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args).validate(args.command if args.command != "inspect" else None)
    except (ValueError, TypeError, OSError, tomllib.TOMLDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(cfg.out)
    if args.command == "certify":
        return cmd_certify(cfg, out)
    if args.command == "sweep":
        return cmd_sweep(cfg, out)
    if args.command == "simulate":
        return cmd_simulate(cfg, out)
    if args.command == "inspect":
        return cmd_inspect(args.traces, out)
    return cmd_audit(cfg, out)


if __name__ == "__main__":
    sys.exit(main())
