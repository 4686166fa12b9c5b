"""Problem bundles, partitions, constraint files and trace output.

A bundle is a directory. Estimation bundles hold ``graph.json``, ``y.csv``
(``edge,i,j,y,measured``), ``meas.csv`` (``kind,index,value`` with kind
``P_m`` per edge or ``delta_m`` per vertex) and ``config.json``. Linear
bundles hold ``graph.json``, ``H.mtx`` (Matrix Market), ``f.json`` and
``config.json``. Floats are written with ``repr`` so loading is exact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import InputError
from .graph import Graph, Partition
from .matrix import StructuredMatrix
from .problems import EstimationProblem, build_estimation_system


@dataclass
class Bundle:
    g: Graph
    h: StructuredMatrix
    f: np.ndarray
    config: dict = field(default_factory=dict)
    problem: EstimationProblem | None = None


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise InputError(f"missing file {path}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from exc


def write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, default=_jsonable)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_estimation_bundle(path, p: EstimationProblem, config=None):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "graph.json", p.g.to_json())
    with open(out / "y.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["edge", "i", "j", "y", "measured"])
        for e, (i, j) in enumerate(p.g.edges()):
            w.writerow([e, i, j, repr(float(p.y[e])), int(p.measured[e])])
    with open(out / "meas.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "index", "value"])
        for e, v in enumerate(p.P_m):
            w.writerow(["P_m", e, repr(float(v))])
        for i, v in enumerate(p.delta_m):
            w.writerow(["delta_m", i, repr(float(v))])
    cfg = {"problem": "estimation", "c": p.c}
    cfg.update(config or {})
    write_json(out / "config.json", cfg)
    return out


def write_linear_bundle(path, g: Graph, h: StructuredMatrix, f, config=None):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "graph.json", g.to_json())
    scipy.io.mmwrite(str(out / "H.mtx"), sp.coo_matrix(h.csr), symmetry="symmetric",
                     precision=17)
    write_json(out / "f.json", {"f": [float(v) for v in np.asarray(f, dtype=float)]})
    cfg = {"problem": "linear"}
    cfg.update(config or {})
    write_json(out / "config.json", cfg)
    return out


def _read_csv(path):
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError as exc:
        raise InputError(f"missing file {path}") from exc


def load_bundle(path) -> Bundle:
    """Read a bundle directory and assemble ``(H, f)``."""
    root = Path(path)
    if not root.is_dir():
        raise InputError(f"bundle {root} is not a directory")
    config = _read_json(root / "config.json")
    g = Graph.from_json(_read_json(root / "graph.json"))
    kind = config.get("problem")
    if kind == "linear":
        try:
            H = scipy.io.mmread(str(root / "H.mtx"))
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read {root / 'H.mtx'}: {exc}") from exc
        h = StructuredMatrix(sp.csr_matrix(H), symmetric=True)
        f = np.asarray(_read_json(root / "f.json").get("f", []), dtype=float)
        if h.n != g.n_vertices or f.shape != (h.n,):
            raise InputError("H, f and the graph disagree on the number of vertices")
        return Bundle(g, h, f, config)
    if kind == "estimation":
        rows = _read_csv(root / "y.csv")
        edges = g.edges()
        if len(rows) != len(edges):
            raise InputError("y.csv must have one row per graph edge")
        y = np.empty(len(rows))
        measured = np.zeros(len(rows), dtype=bool)
        for r in rows:
            e = int(r["edge"])
            if (int(r["i"]), int(r["j"])) != tuple(edges[e]):
                raise InputError(f"y.csv edge {e} does not match graph.json")
            y[e] = float(r["y"])
            measured[e] = bool(int(r["measured"]))
        P_m = np.full(len(rows), np.nan)
        delta_m = np.full(g.n_vertices, np.nan)
        for r in _read_csv(root / "meas.csv"):
            target = {"P_m": P_m, "delta_m": delta_m}.get(r["kind"])
            if target is None:
                raise InputError(f"unknown measurement kind {r['kind']!r}")
            target[int(r["index"])] = float(r["value"])
        if np.isnan(P_m).any() or np.isnan(delta_m).any():
            raise InputError("meas.csv must give P_m for every edge and delta_m for every vertex")
        p = EstimationProblem(g, y, measured, P_m, delta_m, float(config["c"]))
        h, f = build_estimation_system(p)
        return Bundle(g, h, f, config, p)
    raise InputError(f"config.json: unknown problem kind {kind!r}")


def load_partition(path, n=None) -> Partition:
    p = Partition.from_json(_read_json(path))
    if n is not None and len(p.assignment) != n:
        raise InputError(f"partition covers {len(p.assignment)} vertices, problem has {n}")
    return p


def load_constraints(path, g: Graph, h: StructuredMatrix, f):
    """Read ``bounds.json``.

    Either ``{"rows": [{"edge": [i, j], "lo": a, "hi": b, "mu": m}, ...]}``
    (``mu`` optional per row) or ``{"angle_limit": L, "mu": m}`` for
    ``-L <= x_i - x_j <= L`` on every graph edge.
    """
    from .constrained import ConstrainedProblem

    data = _read_json(path)
    mu = data.get("mu")
    if "rows" in data:
        rows = data["rows"]
        if not rows:
            raise InputError("bounds.json lists no rows")
        edges = [r["edge"] for r in rows]
        lo = [r["lo"] for r in rows]
        hi = [r["hi"] for r in rows]
        if any("mu" in r for r in rows):
            default = mu if mu is not None else 1e3 * float(h.diagonal().max())
            mu = [r.get("mu", default) for r in rows]
        return ConstrainedProblem(h, f, edges, lo, hi, mu)
    if "angle_limit" in data:
        return ConstrainedProblem.angle_bounds(h, f, g, float(data["angle_limit"]), mu)
    raise InputError("bounds.json needs 'rows' or 'angle_limit'")


class TraceWriter:
    """Append-only CSV trace, flushed after every row."""

    def __init__(self, path, extra=()):
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(["iter", "time_s", "residual_inf", *extra])
        self.fh.flush()

    def __call__(self, row):
        self.writer.writerow([row[0], f"{row[1]:.6f}", repr(float(row[2])), *row[3:]])
        self.fh.flush()

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
