"""Config files, diagnostics CSV, state snapshots."""
import configparser
import csv
from dataclasses import dataclass
import math
from pathlib import Path
from typing import Optional

import numpy as np

DIAG_COLUMNS = ("n", "t", "entropy", "production", "min_N", "max_N", "min_P", "max_P",
                "h1_Psi", "weak_bv", "fp_iters")

_PROBLEM_KEYS = {"case": str, "lambda2": float, "dt": float, "t_final": float,
                 "cells": int, "mesh_file": str}
_SCHEME_KEYS = {"mu": str, "fp_tol": float, "fp_max_iter": int, "solver": str}
_OUTPUT_KEYS = {"out_dir": str, "snapshot_every": int}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    case: str = "case1"
    lambda2: float = 1.0
    dt: float = 1e-3
    t_final: Optional[float] = None
    cells: int = 160
    mesh_file: Optional[str] = None
    mu: str = "auto"
    fp_tol: float = 1e-11
    fp_max_iter: int = 500
    solver: str = "gummel"
    out_dir: str = "out"
    snapshot_every: int = 0

    @property
    def mu_value(self):
        return "auto" if str(self.mu).strip().lower() == "auto" else float(self.mu)


def read_config(path, base=None):
    """Parse a ``[problem]/[scheme]/[output]`` key = value file into a RunConfig."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = base or RunConfig()
    known = {"problem": _PROBLEM_KEYS, "scheme": _SCHEME_KEYS, "output": _OUTPUT_KEYS}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            conv = known[section].get(key)
            if conv is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                setattr(cfg, key, conv(raw))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return cfg


class DiagnosticsCSV:
    """Observer appending one row per time level to a CSV file."""

    def __init__(self, path, recorder):
        self.path = Path(path)
        self.recorder = recorder
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(DIAG_COLUMNS)

    def __call__(self, state, prev, report):
        self.recorder(state, prev, report)
        r = self.recorder.records[-1]
        vals = (r.t, r.entropy, r.production, r.min_N, r.max_N, r.min_P, r.max_P, r.h1_Psi,
                r.weak_bv_increment)
        row = (int(r.n), *(repr(float(v)) for v in vals), int(r.fp_iters))
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)


def read_diagnostics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("n", "fp_iters") else float(v)) for k, v in r.items()} for r in rows]


def write_snapshot(path, mesh, state, lambda_sq):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"state v1 cells={mesh.n_cells} t={float(state.t)!r} lambda2={float(lambda_sq)!r}\n")
        for k in range(mesh.n_cells):
            coords = ",".join(repr(float(c)) for c in mesh.cell_center[k])
            fh.write(f"{k},{coords},{float(state.N[k])!r},{float(state.P[k])!r},{float(state.Psi[k])!r}\n")


def read_snapshot(path):
    """Return (meta dict, coords array, N, P, Psi)."""
    with open(path) as fh:
        head = fh.readline().split()
        if head[:2] != ["state", "v1"]:
            raise ValueError(f"{path}: not a state v1 snapshot")
        meta = dict(item.split("=", 1) for item in head[2:])
        meta = {"cells": int(meta["cells"]), "t": float(meta["t"]), "lambda2": float(meta["lambda2"])}
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape[0] != meta["cells"]:
        raise ValueError(f"{path}: expected {meta['cells']} rows, found {data.shape[0]}")
    return meta, data[:, 1:-3], data[:, -3], data[:, -2], data[:, -1]


class SnapshotWriter:
    """Observer writing ``state_<n>.txt`` every ``every`` steps (and the final one on demand)."""

    def __init__(self, out_dir, mesh, lambda_sq, every):
        self.out_dir = Path(out_dir)
        self.mesh, self.lambda_sq, self.every = mesh, lambda_sq, every

    def __call__(self, state, prev, report):
        if self.every > 0 and state.n % self.every == 0:
            write_snapshot(self.out_dir / f"state_{state.n:06d}.txt", self.mesh, state, self.lambda_sq)


def fmt_float(x):
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))
