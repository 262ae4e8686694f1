"""Experiment configuration: TOML in, validated parameters and initial state out.

Schema (every table except ``[model]``, ``[init]`` and ``run.horizon`` has defaults)::

    [model]
    lambda = 1.0
    mu_s = 1.0
    mu0 = 1.0                  # optional, defaults to min(mu_s, inf mu_k)
    [[model.strains]]
    name = "A"
    beta = 2.0                 # constant shorthand, or a kernel table:
    mu = { form = "piecewise", edges = [0.0, 5.0, inf], values = [1.0, 3.0] }

    [grid]
    da = 1e-3
    tail_tol = 1e-12
    a_max = 30.0               # optional, sized from the tail tolerance

    [init]
    s0 = 1.0
    [[init.strains]]           # one per model strain, in the same order
    kind = "window"            # zero | window | equilibrium | table
    lo = 0.0
    hi = 1.0
    height = 0.1

    [run]
    horizon = 50.0
    record_every = 10
    snapshot_times = []
    engine = "auto"

    [analysis]
    lyapunov = true
    classify = true
    oracle = false
    tie_tol = 1e-9
    blocks = [[1, 2], [3]]     # optional: declare R0 blocks instead of detecting ties
    [analysis.tolerances]
    distance = 1e-3

``resolve`` fills every default in, so a resolved config reproduces its run
exactly.
"""
from __future__ import annotations

import copy
import csv
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .classify import Tolerances
from .equilibria import endemic_point
from .grid import DEFAULT_TAIL_TOL, Grid, GridError, GridState
from .kernels import AgeKernel
from .model import (DEFAULT_TIE_TOL, BlockStructure, ModelParams, Strain, blocks,
                    blocks_from_groups, validate)

TOLERANCE_KEYS = {
    "distance": 1e-3, "s_floor": 1e-6, "force_floor": 1e-4, "lyapunov": 1e-6,
    "excluded_mass": 1e-6, "oracle": 1e-3,
}
ENGINES = ("auto", "cohort", "shift")


class ConfigError(ValueError):
    """Configuration problem, anchored to a line of the source when possible."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = source or "config"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")


_HEADER = re.compile(r"^\s*(\[\[?)\s*([A-Za-z0-9_.\-\" ]+?)\s*\]\]?\s*(#.*)?$")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


def line_of(text: str, path: tuple) -> int | None:
    """1-based line where ``path`` (keys and array indices) is set, else its table."""
    counts: dict[tuple, int] = {}
    header: tuple = ()
    best = None
    for no, raw in enumerate(text.splitlines(), start=1):
        m = _HEADER.match(raw)
        if m:
            name = tuple(p.strip().strip('"') for p in m.group(2).split("."))
            if m.group(1) == "[[":
                counts[name] = counts.get(name, -1) + 1
                header = name + (counts[name],)
            else:
                header = name
            if header == path[: len(header)] and (best is None or len(header) > best[1]):
                best = (no, len(header))
            continue
        m = _KEY.match(raw)
        if m and header + (m.group(1),) == path[: len(header) + 1]:
            if best is None or len(header) + 1 >= best[1]:
                best = (no, len(header) + 1)
    return None if best is None else best[0]


def load_text(path) -> tuple[dict, str]:
    text = Path(path).read_text()
    try:
        return tomllib.loads(text), text
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", int(m.group(1)) if m else None,
                          str(path)) from None


def _kernel_record(value) -> dict:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return {"form": "constant", "value": float(value), "window": [0.0, math.inf]}
    if isinstance(value, dict):
        rec = dict(value)
        if rec.get("form", "constant") == "constant":
            rec.setdefault("window", [0.0, math.inf])
            rec["form"] = "constant"
        return rec
    raise ValueError(f"kernel must be a number or a table, got {value!r}")


@dataclass
class ExperimentConfig:
    raw: dict
    params: ModelParams
    grid: Grid
    init: GridState
    base_dir: Path

    @property
    def run(self) -> dict:
        return self.raw["run"]

    @property
    def analysis(self) -> dict:
        return self.raw["analysis"]

    def tolerances(self) -> Tolerances:
        t = self.analysis["tolerances"]
        keep = {k: t[k] for k in ("distance", "s_floor", "force_floor", "lyapunov",
                                  "excluded_mass")}
        return Tolerances(**keep, warmup=t.get("warmup"),
                          lyapunov_warmup=t.get("lyapunov_warmup"))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.raw)


def _fail(msg, text, path, source):
    return ConfigError(msg, line_of(text, path) if text else None, source)


def resolve(raw: dict, text: str = "", source: str | None = None,
            base_dir: Path | None = None) -> ExperimentConfig:
    """Fill defaults, build parameters, grid and initial state; raise ConfigError."""
    cfg = copy.deepcopy(raw)
    base_dir = Path(base_dir or ".")

    def need(table: dict, key: str, path: tuple):
        if key not in table:
            raise _fail(f"missing required key '{'.'.join(map(str, path))}'", text,
                        path[:-1], source)
        return table[key]

    model = need(cfg, "model", ("model",))
    strains_raw = model.get("strains", [])
    strains = []
    for k, st in enumerate(strains_raw):
        try:
            st["beta"] = _kernel_record(need(st, "beta", ("model", "strains", k, "beta")))
            st["mu"] = _kernel_record(need(st, "mu", ("model", "strains", k, "mu")))
            st.setdefault("name", f"strain{k + 1}")
            strains.append(Strain(AgeKernel.from_record(st["beta"]),
                                  AgeKernel.from_record(st["mu"]), st["name"]))
        except ConfigError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise _fail(f"strain {k + 1}: {exc}", text, ("model", "strains", k), source) from None
    lam = float(need(model, "lambda", ("model", "lambda")))
    mu_s = float(need(model, "mu_s", ("model", "mu_s")))
    if "mu0" not in model:
        model["mu0"] = min([mu_s] + [s.mu.ess_inf for s in strains])
    params = ModelParams(lam, mu_s, float(model["mu0"]), tuple(strains))
    report = validate(params)
    if not report.ok:
        f = report.failures[0]
        key = next((k for k in ("lambda", "mu_s", "mu0") if f.message.startswith(k)), None)
        path = ("model", key) if key else (("model", "strains", f.strain) if f.strain is not None
                                           else ("model",))
        who = f" (strain {f.strain + 1})" if f.strain is not None else ""
        raise _fail(f"assumption {f.item} violated{who}: {f.message}", text, path, source)

    g = cfg.setdefault("grid", {})
    g.setdefault("da", 1e-3)
    g.setdefault("tail_tol", DEFAULT_TAIL_TOL)
    try:
        grid = params.grid(float(g["da"]), float(g["tail_tol"]), g.get("a_max"))
    except (GridError, ValueError) as exc:
        raise _fail(str(exc), text, ("grid",), source) from None
    g["a_max"] = grid.a_max

    run = cfg.setdefault("run", {})
    horizon = float(need(run, "horizon", ("run", "horizon")))
    if not horizon > 0:
        raise _fail("run.horizon must be positive", text, ("run", "horizon"), source)
    run.setdefault("record_every", 10)
    run.setdefault("snapshot_times", [])
    run.setdefault("engine", "auto")
    if run["engine"] not in ENGINES:
        raise _fail(f"run.engine must be one of {ENGINES}", text, ("run", "engine"), source)

    an = cfg.setdefault("analysis", {})
    an.setdefault("lyapunov", True)
    an.setdefault("classify", True)
    an.setdefault("oracle", False)
    an.setdefault("tie_tol", DEFAULT_TIE_TOL)
    tol = an.setdefault("tolerances", {})
    for k, v in TOLERANCE_KEYS.items():
        tol.setdefault(k, v)
    unknown = set(tol) - set(TOLERANCE_KEYS) - {"membership", "warmup", "lyapunov_warmup"}
    if unknown:
        raise _fail(f"unknown tolerance keys {sorted(unknown)}", text,
                    ("analysis", "tolerances"), source)

    init_raw = need(cfg, "init", ("init",))
    if "blocks" in an:
        try:
            analysis_blocks(params, an)
        except (ValueError, TypeError) as exc:
            raise _fail(f"analysis.blocks: {exc}", text, ("analysis", "blocks"), source) from None
    init = _build_init(init_raw, params, grid, text, source, base_dir, an)
    return ExperimentConfig(cfg, params, grid, init, base_dir)


def analysis_blocks(params: ModelParams, analysis: dict) -> BlockStructure:
    """Blocks declared in ``analysis.blocks`` (1-based strain lists), else detected ties."""
    if "blocks" in analysis:
        groups = [[int(j) - 1 for j in g] for g in analysis["blocks"]]
        return blocks_from_groups(params, groups, analysis["tie_tol"])
    return blocks(params, analysis["tie_tol"])


def _window(grid: Grid, lo: float, hi: float, height: float) -> np.ndarray:
    a0, a1 = grid.nodes[:-1], grid.nodes[1:]
    overlap = np.clip(np.minimum(a1, hi) - np.maximum(a0, lo), 0.0, None)
    return height * overlap / grid.da


def _build_init(init: dict, params: ModelParams, grid: Grid, text, source, base_dir,
                analysis: dict) -> GridState:
    s0 = float(init.get("s0", params.s_free))
    init["s0"] = s0
    if s0 < 0:
        raise _fail("init.s0 must be nonnegative", text, ("init", "s0"), source)
    entries = init.get("strains", [])
    if len(entries) != params.n:
        raise _fail(f"init lists {len(entries)} strains, model has {params.n}", text,
                    ("init",), source)
    x = np.zeros((params.n, grid.steps))
    derived = None
    for k, entry in enumerate(entries):
        path = ("init", "strains", k)
        kind = entry.get("kind", "zero")
        try:
            if kind == "zero":
                continue
            if kind == "window":
                x[k] = _window(grid, float(entry.get("lo", 0.0)), float(entry["hi"]),
                               float(entry["height"]))
            elif kind == "equilibrium":
                if derived is None:
                    derived = params.derive(grid)
                bs = analysis_blocks(params, analysis)
                pt = endemic_point(params, derived, bs, int(entry["block"]), entry["alpha"])
                x[k] = pt.densities[k]
            elif kind == "table":
                x[k] = _table(base_dir / entry["file"], grid)
            else:
                raise ValueError(f"unknown init kind {kind!r}")
        except (ValueError, KeyError, OSError) as exc:
            msg = f"missing key {exc}" if isinstance(exc, KeyError) else str(exc)
            raise _fail(f"init strain {k + 1}: {msg}", text, path, source) from None
        if np.any(x[k] < 0) or not np.all(np.isfinite(x[k])):
            raise _fail(f"init strain {k + 1}: densities must be finite and nonnegative",
                        text, path, source)
    return GridState(0.0, s0, x)


def _table(path: Path, grid: Grid) -> np.ndarray:
    """Two-column CSV ``a, x`` interpolated at cell midpoints, zero outside its range."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    a = np.array([float(r[0]) for r in rows])
    v = np.array([float(r[1]) for r in rows])
    if a.size == 0 or np.any(np.diff(a) <= 0):
        raise ValueError(f"{path}: ages must be strictly increasing")
    return np.interp(grid.mids, a, v, left=0.0, right=0.0)


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def load(path) -> ExperimentConfig:
    raw, text = load_text(path)
    return resolve(raw, text, str(path), Path(path).parent)


def set_path(raw: dict, dotted: str, value: Any) -> None:
    """Assign ``value`` at a dotted path; integer parts index arrays."""
    parts = dotted.split(".")
    node = raw
    for p in parts[:-1]:
        node = node[int(p)] if isinstance(node, list) else node.setdefault(p, {})
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value
