"""JSON run configuration: parsing, defaults, validation and builders."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .diagnostics import MonotonicityProbe
from .errors import ConfigError
from .flow import StepControl
from .grid import DIM, GridSpec, MetricField, build_flat_metric, build_perturbed_metric
from .initial import BubbleSpec, bubble_structure, kahler_standard, random_perturbation


@dataclass
class GridConfig:
    N: list
    L: list
    thin_axes: list = field(default_factory=list)

    def build(self) -> GridSpec:
        pts = [1 if a in self.thin_axes else self.N[a] for a in range(DIM)]
        return GridSpec(tuple(pts), tuple(self.L))


@dataclass
class MetricConfig:
    tag: str = "flat"
    amplitude: float = 0.0
    seed: int = 0

    def build(self, grid: GridSpec) -> MetricField:
        if self.tag == "flat":
            return build_flat_metric(grid)
        return build_perturbed_metric(grid, self.amplitude, self.seed)


@dataclass
class InitialConfig:
    kind: str = "kahler"
    perturbation: dict | None = None
    bubble: dict | None = None

    def build(self, grid: GridSpec, metric: MetricField) -> np.ndarray:
        base = kahler_standard(grid)
        if self.kind == "kahler":
            return base
        if self.kind == "perturbation":
            p = self.perturbation
            return random_perturbation(base, p["amplitude"], p["seed"], metric)
        b = self.bubble
        spec = BubbleSpec(tuple(b["p"]), b["r0"], b["r"], b["smoothing_width"])
        return bubble_structure(grid, spec)


@dataclass
class ProbeConfig:
    x0: list
    T0: float
    rho_cut: float
    N_weight: float = math.e**2
    R_list: list = field(default_factory=list)

    def build(self) -> MonotonicityProbe:
        return MonotonicityProbe(tuple(self.x0), self.T0, self.rho_cut, self.N_weight)


@dataclass
class OutputConfig:
    snapshot_every: int = 0
    record_every: int = 1
    out_dir: str = "out"


@dataclass
class RunConfig:
    grid: GridConfig
    metric: MetricConfig
    initial: InitialConfig
    control: StepControl
    probes: list
    output: OutputConfig

    def to_dict(self) -> dict:
        return {
            "grid": asdict(self.grid),
            "metric": asdict(self.metric),
            "initial": {k: v for k, v in asdict(self.initial).items() if v is not None},
            "control": asdict(self.control),
            "probes": [asdict(p) for p in self.probes],
            "output": asdict(self.output),
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


# -- parsing helpers -----------------------------------------------------------------


def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError(k, "duplicate key")
        out[k] = v
    return out


def _obj(d, path, allowed, required=()):
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown key")
    for k in required:
        if k not in d:
            raise ConfigError(f"{path}.{k}" if path else k, "missing required key")
    return d


def _num(d, key, path, default=None, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
    p = f"{path}.{key}"
    if key not in d:
        if default is None:
            raise ConfigError(p, "missing required key")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(p, "expected a number")
    if integer:
        if isinstance(v, float) and not v.is_integer():
            raise ConfigError(p, "expected an integer")
        v = int(v)
    else:
        v = float(v)
    if not math.isfinite(v):
        raise ConfigError(p, "must be finite")
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(p, f"must be {'>' if lo_open else '>='} {lo}")
    if hi is not None and (v > hi or (hi_open and v == hi)):
        raise ConfigError(p, f"must be {'<' if hi_open else '<='} {hi}")
    return v


def _vec(d, key, path, n=DIM, default=None, integer=False):
    p = f"{path}.{key}"
    if key not in d:
        if default is None:
            raise ConfigError(p, "missing required key")
        return list(default)
    v = d[key]
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        v = [v] * n
    if not isinstance(v, list) or len(v) != n:
        raise ConfigError(p, f"expected a number or a list of {n} numbers")
    tmp = {str(i): x for i, x in enumerate(v)}
    return [_num(tmp, str(i), p, integer=integer) for i in range(n)]


def _parse_grid(d):
    _obj(d, "grid", {"dim", "N", "L", "thin_axes"}, ("N",))
    if "dim" in d and d["dim"] != DIM:
        raise ConfigError("grid.dim", f"only dim = {DIM} is supported")
    N = _vec(d, "N", "grid", integer=True)
    L = _vec(d, "L", "grid", default=[1.0] * DIM)
    thin = d.get("thin_axes", [])
    if not isinstance(thin, list) or any(isinstance(a, bool) or a not in range(DIM) for a in thin):
        raise ConfigError("grid.thin_axes", "expected a list of axis indices 0..3")
    if len(set(thin)) != len(thin):
        raise ConfigError("grid.thin_axes", "repeated axis")
    cfg = GridConfig(N, L, sorted(thin))
    try:
        cfg.build()
    except ValueError as exc:
        raise ConfigError("grid", str(exc)) from None
    return cfg


def _parse_metric(d):
    _obj(d, "metric", {"tag", "amplitude", "seed"})
    tag = d.get("tag", "flat")
    if tag not in ("flat", "perturbed"):
        raise ConfigError("metric.tag", "expected 'flat' or 'perturbed'")
    amp = _num(d, "amplitude", "metric", 0.0, lo=0.0, hi=0.2, hi_open=True)
    seed = _num(d, "seed", "metric", 0, lo=0, integer=True)
    if tag == "flat" and amp != 0.0:
        raise ConfigError("metric.amplitude", "flat metric takes no amplitude")
    return MetricConfig(tag, amp, seed)


def _parse_initial(d, grid: GridConfig):
    if isinstance(d, str):
        d = {"kind": d}  # shorthand: "initial": "kahler"
    _obj(d, "initial", {"kind", "perturbation", "bubble"}, ("kind",))
    kind = d["kind"]
    if kind not in ("kahler", "perturbation", "bubble"):
        raise ConfigError("initial.kind", "expected 'kahler', 'perturbation' or 'bubble'")
    for other in ("perturbation", "bubble"):
        if other in d and other != kind:
            raise ConfigError(f"initial.{other}", f"not used with kind '{kind}'")
    if kind == "kahler":
        return InitialConfig(kind)
    if kind == "perturbation":
        p = _obj(d.get("perturbation", {}), "initial.perturbation", {"amplitude", "seed"}, ("amplitude",))
        amp = _num(p, "amplitude", "initial.perturbation", lo=0.0, hi=0.3, hi_open=True)
        seed = _num(p, "seed", "initial.perturbation", 0, lo=0, integer=True)
        return InitialConfig(kind, perturbation={"amplitude": amp, "seed": seed})
    path = "initial.bubble"
    b = _obj(d.get("bubble", {}), path, {"p", "r0", "r", "smoothing_width"}, ("r0",))
    p = _vec(b, "p", path, default=[0.5 * x for x in grid.L])
    r0 = _num(b, "r0", path, lo=0.0, lo_open=True)
    r = _num(b, "r", path, r0, lo=0.0, lo_open=True)
    if r > r0:
        raise ConfigError(f"{path}.r", "must not exceed r0")
    w = _num(b, "smoothing_width", path, 0.15, lo=0.0, hi=0.5, lo_open=True)
    if grid.thin_axes:
        raise ConfigError(path, "bubble data needs all four axes resolved")
    if not 2 * r0 < min(grid.L):
        raise ConfigError(f"{path}.r0", "bubble does not fit: need 2 r0 < min L")
    floor = 4 * min(grid.L[a] / grid.N[a] for a in range(DIM))
    if r < floor:
        raise ConfigError(f"{path}.r", f"below the resolvability floor 4h = {floor:.6g}")
    return InitialConfig(kind, bubble={"p": p, "r0": r0, "r": r, "smoothing_width": w})


def _parse_control(d):
    path = "control"
    keys = {"scheme", "cfl_safety", "dt_override", "project_every", "t_end",
            "stop_tension_tol", "blowup_e_factor", "delta_lemma32"}
    _obj(d, path, keys, ("t_end",))
    scheme = d.get("scheme", "rk4")
    if scheme not in ("euler", "rk4"):
        raise ConfigError(f"{path}.scheme", "expected 'euler' or 'rk4'")
    dto = d.get("dt_override")
    if dto is not None:
        dto = _num(d, "dt_override", path, lo=0.0, lo_open=True)
    return StepControl(
        scheme=scheme,
        cfl_safety=_num(d, "cfl_safety", path, 0.5, lo=0.0, hi=1.0, lo_open=True),
        dt_override=dto,
        project_every=_num(d, "project_every", path, 10, lo=0, integer=True),
        t_end=_num(d, "t_end", path, lo=0.0),
        stop_tension_tol=_num(d, "stop_tension_tol", path, 1e-6, lo=0.0, lo_open=True),
        blowup_e_factor=_num(d, "blowup_e_factor", path, 10.0, lo=1.0, lo_open=True),
        delta_lemma32=_num(d, "delta_lemma32", path, 0.1, lo=0.0, lo_open=True),
    )


def _parse_probes(lst, grid: GridConfig):
    if not isinstance(lst, list):
        raise ConfigError("probes", "expected a list")
    out = []
    active = [a for a in range(DIM) if a not in grid.thin_axes]
    for i, d in enumerate(lst):
        path = f"probes[{i}]"
        _obj(d, path, {"x0", "T0", "rho_cut", "N_weight", "R_list"}, ("x0", "T0", "rho_cut"))
        x0 = _vec(d, "x0", path)
        T0 = _num(d, "T0", path, lo=0.0, lo_open=True)
        rho = _num(d, "rho_cut", path, lo=0.0, lo_open=True)
        if any(rho > grid.L[a] / 4 + 1e-12 for a in active):
            raise ConfigError(f"{path}.rho_cut", "must not exceed L/4")
        Nw = _num(d, "N_weight", path, math.e**2, lo=1.0, lo_open=True)
        R = d.get("R_list", [])
        if not isinstance(R, list):
            raise ConfigError(f"{path}.R_list", "expected a list")
        tmp = {str(k): x for k, x in enumerate(R)}
        Rmax = min(math.sqrt(T0) / 2.0, 1.0)
        R = [_num(tmp, str(k), f"{path}.R_list", lo=0.0, hi=Rmax, lo_open=True) for k in range(len(R))]
        out.append(ProbeConfig(x0, T0, rho, Nw, R))
    return out


def _parse_output(d):
    _obj(d, "output", {"snapshot_every", "record_every", "out_dir"})
    out_dir = d.get("out_dir", "out")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("output.out_dir", "expected a non-empty string")
    return OutputConfig(
        snapshot_every=_num(d, "snapshot_every", "output", 0, lo=0, integer=True),
        record_every=_num(d, "record_every", "output", 1, lo=1, integer=True),
        out_dir=out_dir,
    )


def parse_config(text: str | bytes) -> RunConfig:
    """Validated configuration from a UTF-8 JSON document."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError("", f"not UTF-8: {exc}") from None
    try:
        d = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from None
    _obj(d, "", {"grid", "metric", "initial", "control", "probes", "output"}, ("grid", "initial", "control"))
    grid = _parse_grid(d["grid"])
    metric = _parse_metric(d.get("metric", {}))
    if metric.tag == "perturbed":
        try:
            metric.build(grid.build())
        except ValueError as exc:
            raise ConfigError("metric.amplitude", str(exc)) from None
    return RunConfig(
        grid=grid,
        metric=metric,
        initial=_parse_initial(d["initial"], grid),
        control=_parse_control(d["control"]),
        probes=_parse_probes(d.get("probes", []), grid),
        output=_parse_output(d.get("output", {})),
    )
