"""Command line entry point.

Subcommands: make-initial, run, diagnose, reduce-check.  Exit codes: 0 on
success, 1 for configuration errors, 2 for numerical failure, 3 for I/O
errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config
from .diagnostics import (
    DiagnosticsRecord,
    Trajectory,
    check_monotonicity_inequality,
    check_psi_inequality,
    epsilon_regularity_probe,
    monotonicity_Psi,
    monotonicity_Z,
    shi_ratio,
)
from .errors import ConfigError, NonFinite, ReconstructionFailure, SnapshotError
from .flow import FlowState, run
from .snapshot import read_snapshot, write_snapshot
from .sphere import cross_validate
from .tensor import constraint_residuals, energy, field_norm2, tension_and_density

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

RECORD_COLUMNS = ["t", "E", "e_max", "A_max", "B_max", "tension_linf",
                  "dissipation_lhs", "dissipation_rhs", "dt"]


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in r])


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def _load(path) -> tuple[RunConfig, bytes]:
    raw = Path(path).read_bytes()
    return parse_config(raw), raw


def _setup(cfg: RunConfig):
    grid = cfg.grid.build()
    metric = cfg.metric.build(grid)
    return grid, metric


def cmd_make_initial(args) -> int:
    cfg, _ = _load(args.config)
    _, metric = _setup(cfg)
    J = cfg.initial.build(metric.grid, metric)
    write_snapshot(FlowState(J=J), metric, args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg, _ = _load(args.config)
    _, metric = _setup(cfg)
    out = Path(args.out_dir or cfg.output.out_dir)
    snaps = out / "snapshots"
    snaps.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(cfg.canonical_json() + "\n")
    J0 = cfg.initial.build(metric.grid, metric)

    def save(state: FlowState):
        write_snapshot(state, metric, snaps / f"snap_{state.step_index:08d}.acjf")

    res = run(J0, metric, cfg.control, record_every=cfg.output.record_every,
              snapshot_every=cfg.output.snapshot_every, on_snapshot=save)
    if cfg.output.snapshot_every == 0 and res.final.step_index > 0:
        save(res.final)
    rows = [[getattr(r, c) for c in RECORD_COLUMNS] for r in res.records]
    _write_csv(out / "records.csv", RECORD_COLUMNS, rows)
    final = {c: getattr(res.records[-1], c) for c in RECORD_COLUMNS}
    verdict = {
        "verdict": res.verdict,
        "reason": res.reason,
        "t_signal": res.t_signal,
        "error": res.error,
        "steps": res.final.step_index,
        "projections": res.final.projections_applied,
        "final_record": final,
        "doubling_windows": [asdict(w) for w in res.windows],
        "delta_lemma32": cfg.control.delta_lemma32,
        "delta_note": "delta is a configured stand-in for the unspecified constant",
        "config_sha256": cfg.digest(),
    }
    (out / "verdict.json").write_text(json.dumps(_json_safe(verdict), indent=2, sort_keys=True) + "\n")
    print(f"{res.verdict}: {res.reason}")
    return EXIT_NUMERIC if res.nonfinite else EXIT_OK


def _find_snapshots(d: Path):
    if not d.is_dir():
        raise OSError(f"trajectory directory {d} not found")
    files = sorted(d.glob("*.acjf")) or sorted((d / "snapshots").glob("*.acjf"))
    if not files:
        raise OSError(f"no snapshots in {d}")
    return files


def cmd_diagnose(args) -> int:
    cfg, _ = _load(args.config)
    _, metric = _setup(cfg)
    tdir = Path(args.traj)
    files = _find_snapshots(tdir)
    traj = Trajectory(metric)
    for f in files:
        s = read_snapshot(f, metric)
        traj.append(s.state.t, s.state.J)
    shi = dict(zip([t for t in traj.times if t > 0], shi_ratio(traj, 2)))
    probes = [p.build() for p in cfg.probes]
    zs = []
    for p in probes:
        keep = [k for k, t in enumerate(traj.times) if t < p.T0]
        z = np.full(len(traj), np.nan)
        sub = Trajectory(metric, [traj.times[k] for k in keep], [traj.fields[k] for k in keep])
        if keep:
            z[keep] = monotonicity_Z(sub, p)
        zs.append(z)
    header = ["t", "E", "e_max", "A_max", "B_max", "tension_linf", "shi_m2"] + [f"Z_{i}" for i in range(len(probes))]
    rows = []
    for k, (t, J) in enumerate(zip(traj.times, traj.fields)):
        T, e = tension_and_density(J, metric)
        a, b, _, _ = constraint_residuals(J, metric)
        rec = DiagnosticsRecord(t, energy(J, metric), float(e.max()), a, b,
                                float(np.sqrt(field_norm2(T, metric).max())), shi_m2=shi.get(t))
        rows.append([rec.t, rec.E, rec.e_max, rec.A_max, rec.B_max, rec.tension_linf, rec.shi_m2]
                    + [float(z[k]) for z in zs])
    _write_csv(tdir / "diagnostics.csv", header, rows)

    E0 = energy(traj.fields[0], metric)
    prow, mono = [], []
    for i, (pc, p) in enumerate(zip(cfg.probes, probes)):
        entry = {"probe": i}
        z = zs[i]
        ok = ~np.isnan(z)
        try:
            rep = check_monotonicity_inequality(np.array(traj.times)[ok], z[ok], p, E0)
            entry["Z"] = asdict(rep)
        except ValueError as exc:
            entry["Z"] = {"skipped": str(exc)}
        psis = []
        for R in pc.R_list:
            try:
                rr = epsilon_regularity_probe(traj, p, R, args.sigma, args.eps0)
                psis.append((R, rr.Psi))
                prow.append([i, R, rr.Psi, rr.hypothesis_met, rr.c, rr.c_normalized])
            except ValueError as exc:
                prow.append([i, R, "", "", "", ""])
                entry.setdefault("Psi_skipped", []).append(f"R={R}: {exc}")
        if len(psis) >= 2:
            rep = check_psi_inequality([a for a, _ in psis], [b for _, b in psis], p, E0)
            entry["Psi"] = asdict(rep)
        mono.append(entry)
    _write_csv(tdir / "probes.csv", ["probe", "R", "Psi", "hypothesis_met", "c", "c_normalized"], prow)
    (tdir / "monotonicity.json").write_text(json.dumps(_json_safe(mono), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_reduce_check(args) -> int:
    cfg, _ = _load(args.config)
    _, metric = _setup(cfg)
    if not metric.is_flat:
        raise ConfigError("metric.tag", "reduce-check needs the flat metric")
    out = Path(args.out_dir or cfg.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    J0 = cfg.initial.build(metric.grid, metric)
    rep = cross_validate(J0, cfg.control.t_end, cfg.control, metric, tol=args.tol)
    _write_csv(out / "reduce.csv", ["t", "distance"], zip(rep.times, rep.distances))
    print(f"max distance {rep.max_distance:.3e} ({'pass' if rep.passed else 'fail'} at tol {rep.tol:g})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="acflow", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("make-initial", help="write the configured initial field")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_initial)

    p = sub.add_parser("run", help="integrate the flow")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None, help="override output.out_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("diagnose", help="post-process a trajectory directory")
    p.add_argument("--config", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--eps0", type=float, default=1.0)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("reduce-check", help="compare tensor and sphere flows")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_reduce_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ReconstructionFailure) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFinite as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, SnapshotError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
